"""
Grad-CAM heatmaps through the command line
==========================================

The same pipeline a user would drive from a shell (``dpcn train``, then
``dpcn eval`` and ``dpcn gradcam``), called in-process here. Heatmap PNGs
land in ``demo_output/gradcam``.
"""

import json
from pathlib import Path

from dpcn.cli import main
from dpcn.config import default_text

out = Path("demo_output")
out.mkdir(exist_ok=True)

# a small experiment: 4 shape classes at 32x32, narrow networks, short phases
config = out / "small.ini"
config.write_text(default_text({
    "data": {"classes": 4, "train_per_class": 600, "test_per_class": 50},
    "model": {"width_multiplier": 0.125, "disc_channels": (16, 32)},
    "dpcn": {"phase_epochs": (2, 6, 2)},
    "optim": {"batch_size": 64, "lr": 0.05},
}))
print(config.read_text())

# %%
# Train all three phases; one checkpoint per phase boundary.
main(["train", "--config", str(config), "--out", str(out / "run")])
print(sorted(p.name for p in (out / "run").iterdir()))

# %%
# Accuracy of each head, plus the plain two-network ensemble for reference.
main(["eval", "--config", str(config), "--checkpoint", str(out / "run" / "phase3.ckpt"),
      "--out", str(out / "run")])

# %%
# One heatmap per subnetwork for a few test images, at the default tap.
main(["gradcam", "--config", str(config), "--checkpoint", str(out / "run" / "phase3.ckpt"),
      "--out", str(out / "gradcam"), "--indices", "0,50,100,150"])
report = json.loads((out / "gradcam" / "gradcam.json").read_text())
for item in report["images"]:
    print(item["index"], "class", item["class"], "overlap", item["overlap"])
