"""D-PCN composition, its three-phase training schedule, baselines and a divergence probe.

Two (or three) identical networks are trained so that a discriminator can
tell their tap features apart, then their extractor outputs are fused and an
extra classifier is trained on top with every extractor frozen.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor, backward, concat, no_grad, stack_split
from .data import ImageDataset, batches
from .models import (DISC_CHANNELS, Discriminator, ExtraClassifier, Network, build_discriminator,
                     build_extra_classifier, build_network)
from .optim import SGD, step_decay

log = logging.getLogger(__name__)

DEFAULT_TARGETS = {2: (1.0, 0.0), 3: (1.0, 0.0, 0.5)}


class Phase(str, Enum):
    STEP1 = "step1"
    STEP2 = "step2"
    STEP3 = "step3"
    INFERENCE = "inference"


class PhaseError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; ``snapshot`` holds the offending step's diagnostics."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}: {json.dumps(snapshot, sort_keys=True)}")
        self.snapshot = snapshot


@dataclass
class DpcnConfig:
    lam: float = 1.0
    n_subnets: int = 2
    fusion: str = "concat"
    tap_point: str = "block3"
    phase_epochs: tuple = (5, 20, 10)
    targets: Optional[tuple] = None
    # backbone
    backbone: str = "nin"
    width_multiplier: float = 1.0
    depth_blocks: int = 3
    channels: Optional[tuple] = None
    disc_channels: tuple = DISC_CHANNELS
    disc_sigmoid: Optional[bool] = None     # None: sigmoid only for the NIN backbone
    # optimization
    batch_size: int = 128
    lr: float = 0.1
    disc_lr: Optional[float] = None
    extra_lr: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1
    augment: bool = False
    crop_pad: int = 4
    flip: bool = False
    # seeds: ``seed`` drives data order and augmentation; ``seeds`` one per subnetwork
    seed: int = 0
    seeds: Optional[tuple] = None

    def __post_init__(self):
        self.phase_epochs = tuple(int(e) for e in self.phase_epochs)
        if len(self.phase_epochs) != 3 or min(self.phase_epochs) < 0:
            raise ValueError("phase_epochs needs three non-negative entries")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.n_subnets < 2:
            raise ValueError("D-PCN needs at least two subnetworks")
        if self.fusion not in ("concat", "sum"):
            raise ValueError(f"fusion must be 'concat' or 'sum', not {self.fusion!r}")
        if self.targets is not None:
            self.targets = tuple(float(t) for t in self.targets)
            if len(self.targets) != self.n_subnets:
                raise ValueError("need one discriminator target per subnetwork")
        elif self.n_subnets not in DEFAULT_TARGETS:
            raise ValueError(f"{self.n_subnets} subnetworks need an explicit target list")
        if self.seeds is not None and len(self.seeds) != self.n_subnets:
            raise ValueError("need one seed per subnetwork")

    def subnet_seeds(self) -> List[int]:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [self.seed * 1000 + i + 1 for i in range(self.n_subnets)]

    def use_sigmoid(self) -> bool:
        return self.backbone == "nin" if self.disc_sigmoid is None else bool(self.disc_sigmoid)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PhaseState:
    phase: Phase
    trainable: Dict[str, bool]

    @classmethod
    def for_phase(cls, phase: Phase, n_subnets: int = 2) -> "PhaseState":
        phase = Phase(phase)
        subnet = phase in (Phase.STEP1, Phase.STEP2)
        mask = {}
        for i in range(n_subnets):
            mask[f"extractor.{i}"] = subnet
            mask[f"classifier.{i}"] = subnet
        mask["discriminator"] = phase == Phase.STEP2
        mask["extra"] = phase == Phase.STEP3
        return cls(phase, mask)

    def require(self, phase: Phase) -> None:
        if self.phase != phase:
            raise PhaseError(f"operation requires phase {phase.value}, current phase is {self.phase.value}")


@dataclass
class LossBundle:
    """Per-subnetwork classification, raw discriminator and total losses plus L_D."""

    l_cls: List[Tensor]
    l_disc_side: List[Optional[Tensor]]
    l_total: List[Tensor]
    l_D: Optional[Tensor]
    lam: float = 1.0

    def scalars(self) -> dict:
        val = lambda t: None if t is None else float(t.item())
        return {"ce": [val(t) for t in self.l_cls],
                "disc": [val(t) for t in self.l_disc_side],
                "total": [val(t) for t in self.l_total],
                "l_D": val(self.l_D)}


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def subnet_target(k: int, n_subnets: int, targets: Optional[Sequence[float]] = None) -> float:
    """Discriminator target of subnetwork ``k``: (1, 0) for two, (1, 0, 0.5) for three."""
    if not 0 <= k < n_subnets:
        raise ValueError(f"subnetwork index {k} outside [0, {n_subnets})")
    if targets is not None:
        if len(targets) != n_subnets:
            raise ValueError("need one target per subnetwork")
        return float(targets[k])
    if n_subnets not in DEFAULT_TARGETS:
        raise ValueError(f"no default targets for {n_subnets} subnetworks; configure them explicitly")
    return DEFAULT_TARGETS[n_subnets][k]


def _bundle(logits, labels, d_scores, lam, targets, with_term) -> LossBundle:
    n = len(logits)
    l_cls, side, total = [], [], []
    for k in range(n):
        ce = F.softmax_cross_entropy(logits[k], labels)
        l_cls.append(ce)
        if with_term(k):
            if d_scores[k] is None:
                raise ValueError(f"subnetwork {k} needs discriminator scores")
            term = F.disc_l2_loss(d_scores[k], subnet_target(k, n, targets))
            side.append(term)
            total.append(ce + lam * term)
        else:
            side.append(None)
            total.append(ce)
    present = [t for t in side if t is not None]
    l_d = None
    if present:
        l_d = present[0]
        for t in present[1:]:
            l_d = l_d + t
    return LossBundle(l_cls, side, total, l_d, lam)


def step1_losses(logits: Sequence[Tensor], labels, d_scores: Sequence[Optional[Tensor]],
                 lam: float = 1.0, targets=None, state: Optional[PhaseState] = None) -> LossBundle:
    """Warm-up losses: subnetwork 0 is pure cross entropy, every other one carries its
    discriminator term against a frozen discriminator."""
    if state is not None:
        state.require(Phase.STEP1)
    return _bundle(logits, labels, d_scores, lam, targets, lambda k: k > 0)


def step2_losses(logits: Sequence[Tensor], labels, d_scores: Sequence[Tensor],
                 lam: float = 1.0, targets=None, state: Optional[PhaseState] = None) -> LossBundle:
    """Joint losses: every subnetwork carries ``lam * (1/n) sum (target_k - D(E_k(x)))^2``;
    ``l_D`` is the unweighted sum of those raw terms."""
    if state is not None:
        state.require(Phase.STEP2)
    return _bundle(logits, labels, d_scores, lam, targets, lambda k: True)


def fuse(features: Sequence[Tensor], mode: str = "concat",
         state: Optional[PhaseState] = None) -> Tensor:
    if state is not None and state.phase not in (Phase.STEP3, Phase.INFERENCE):
        raise PhaseError("fusion happens in step 3 or at inference")
    if mode == "concat":
        return F.concat_channels(list(features))
    if mode == "sum":
        return F.sum_features(list(features))
    raise ValueError(f"unknown fusion mode {mode!r}")


# ----------------------------------------------------------------------------
# model container
# ----------------------------------------------------------------------------

class DPCN:
    """Parallel subnetworks, their discriminator and the extra classifier."""

    def __init__(self, nets: List[Network], disc: Discriminator, extra: ExtraClassifier,
                 config: DpcnConfig):
        self.nets = nets
        self.disc = disc
        self.extra = extra
        self.config = config
        self.state = PhaseState.for_phase(Phase.STEP1, len(nets))

    @classmethod
    def build(cls, config: DpcnConfig, num_classes: int, input_shape=(3, 32, 32),
              dtype=np.float32) -> "DPCN":
        nets = [build_network(config.backbone, num_classes, s, config.width_multiplier,
                              config.depth_blocks, config.tap_point, dtype, config.channels)
                for s in config.subnet_seeds()]
        shapes = nets[0].output_shapes((1,) + tuple(input_shape))
        tap_c, tap_h, _ = shapes["tap"]
        disc = build_discriminator(tap_c, tap_h, config.use_sigmoid(), seed=config.seed * 1000 + 101,
                                   channels=config.disc_channels, dtype=dtype)
        feat_c = shapes["features"][0]
        fused = feat_c * len(nets) if config.fusion == "concat" else feat_c
        extra = build_extra_classifier(nets[0].classifier, fused, num_classes,
                                       seed=config.seed * 1000 + 202, dtype=dtype)
        return cls(nets, disc, extra, config)

    def groups(self) -> Dict[str, list]:
        out = {}
        for i, net in enumerate(self.nets):
            out[f"extractor.{i}"] = net.extractor.parameters()
            out[f"classifier.{i}"] = net.classifier.parameters()
        out["discriminator"] = self.disc.parameters()
        out["extra"] = self.extra.parameters()
        return out

    def modules(self) -> Dict[str, object]:
        mods = {f"net{i}": net for i, net in enumerate(self.nets)}
        mods.update(disc=self.disc, extra=self.extra)
        return mods

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self.modules().items():
            out.update({f"{prefix}.{k}": v for k, v in mod.state_dict().items()})
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for prefix, mod in self.modules().items():
            mod.load_state_dict({k[len(prefix) + 1:]: v for k, v in state.items()
                                 if k.startswith(prefix + ".")})

    def set_phase(self, phase: Phase) -> None:
        self.state = PhaseState.for_phase(phase, len(self.nets))

    def fused_features(self, x: Tensor) -> Tensor:
        return fuse([net.extract(x) for net in self.nets], self.config.fusion)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

def _finite(value: float) -> bool:
    return bool(np.isfinite(value))


def evaluate(model: DPCN, data: ImageDataset, batch_size: int = 256,
             heads: Sequence[str] = ("subnets", "extra")) -> Dict[str, float]:
    """Top-1 accuracy of each subnetwork classifier and/or the extra classifier (eval mode)."""
    modes = {m: m.training for m in [*model.nets, model.extra]}
    for m in modes:
        m.eval()
    correct: Dict[str, int] = {}
    try:
        with no_grad():
            for xb, yb in batches(data, batch_size):
                x = Tensor(xb)
                feats = [net.extract(x) for net in model.nets]
                if "subnets" in heads:
                    for i, (net, f) in enumerate(zip(model.nets, feats)):
                        pred = net.classifier(f).data.argmax(axis=1)
                        correct[f"subnet{i}"] = correct.get(f"subnet{i}", 0) + int((pred == yb).sum())
                if "extra" in heads:
                    pred = model.extra(fuse(feats, model.config.fusion)).data.argmax(axis=1)
                    correct["extra"] = correct.get("extra", 0) + int((pred == yb).sum())
    finally:
        for m, mode in modes.items():
            m.train(mode)
    return {k: v / len(data) for k, v in correct.items()}


class Trainer:
    """Runs the three phases on a :class:`DPCN`, keeping optimizer, RNG and metric state.

    ``log_fn`` receives one dict per epoch (phase, epoch, per-subnet CE and
    discriminator terms, L_D, learning rate, eval accuracy).
    """

    def __init__(self, model: DPCN, train: ImageDataset, eval_data: Optional[ImageDataset] = None,
                 log_fn: Optional[Callable[[dict], None]] = None):
        self.model = model
        self.config = cfg = model.config
        self.train_data = train
        self.eval_data = eval_data
        self.log_fn = log_fn
        self.rng = np.random.default_rng(cfg.seed)
        subnet_params = [p for net in model.nets for p in net.parameters()]
        self.subnet_opt = SGD(subnet_params, cfg.lr, cfg.momentum, cfg.weight_decay)
        self.disc_opt = SGD(model.disc.parameters(), cfg.disc_lr or cfg.lr, cfg.momentum,
                            cfg.weight_decay)
        self.extra_opt = SGD(model.extra.parameters(), cfg.extra_lr or cfg.lr, cfg.momentum,
                             cfg.weight_decay)
        self.phases_done = 0
        self.records: List[dict] = []

    # ------------------------------------------------------------------ helpers
    def _batches(self):
        cfg = self.config
        return batches(self.train_data, cfg.batch_size, self.rng, shuffle=True,
                       augment=cfg.augment, pad=cfg.crop_pad, flip=cfg.flip)

    def _subnet_lr(self, global_epoch: int) -> float:
        cfg = self.config
        total = cfg.phase_epochs[0] + cfg.phase_epochs[1]
        return step_decay(cfg.lr, global_epoch, total, cfg.lr_milestones, cfg.lr_decay)

    def _emit(self, record: dict) -> None:
        self.records.append(record)
        if self.log_fn is not None:
            self.log_fn(record)

    def _check(self, values: dict, where: dict) -> None:
        flat = [v for v in values.get("total", []) if v is not None]
        flat += [v for v in values.get("ce", []) if v is not None]
        if values.get("l_D") is not None:
            flat.append(values["l_D"])
        if not all(_finite(v) for v in flat):
            raise TrainingDiverged("non-finite loss", {**where, **values})

    @staticmethod
    def _mean(rows: List[list]) -> list:
        cols = list(zip(*rows))
        return [None if any(v is None for v in col) else float(np.mean(col)) for col in cols]

    def _eval_record(self, heads) -> dict:
        if self.eval_data is None:
            return {}
        return {"acc": evaluate(self.model, self.eval_data, heads=heads)}

    # ------------------------------------------------------------------- phases
    def run_phase1(self) -> None:
        model, cfg = self.model, self.config
        if self.phases_done != 0:
            raise PhaseError("phase 1 already completed")
        model.set_phase(Phase.STEP1)
        e1 = cfg.phase_epochs[0]
        if e1 == 0:
            warnings.warn("phase 1 skipped (0 epochs); subnetworks differ only by initialization")
        disc = model.disc
        disc.eval()
        disc.requires_grad_(False)
        for net in model.nets:
            net.train()
            net.requires_grad_(True)
        try:
            for epoch in range(e1):
                self.subnet_opt.lr = self._subnet_lr(epoch)
                rows = []
                for step, (xb, yb) in enumerate(self._batches()):
                    x = Tensor(xb)
                    outs = [net.forward_all(x) for net in model.nets]
                    d_scores = [None] + [disc(o[2]) for o in outs[1:]]
                    bundle = step1_losses([o[0] for o in outs], yb, d_scores, cfg.lam,
                                          cfg.targets, model.state)
                    total = bundle.l_total[0]
                    for t in bundle.l_total[1:]:
                        total = total + t
                    vals = bundle.scalars()
                    self._check(vals, {"phase": "step1", "epoch": epoch, "step": step})
                    self.subnet_opt.zero_grad()
                    backward(total)
                    self.subnet_opt.step()
                    rows.append(vals)
                self._emit({"phase": "step1", "epoch": epoch, "lr": self.subnet_opt.lr,
                            "ce": self._mean([r["ce"] for r in rows]),
                            "disc": self._mean([r["disc"] for r in rows]),
                            "l_D": None, **self._eval_record(("subnets",))})
        finally:
            disc.requires_grad_(True)
        self.phases_done = 1

    def run_phase2(self) -> None:
        model, cfg = self.model, self.config
        if self.phases_done != 1:
            raise PhaseError("phase 2 needs phase 1 to be completed first")
        model.set_phase(Phase.STEP2)
        n = len(model.nets)
        targets = [subnet_target(k, n, cfg.targets) for k in range(n)]
        disc = model.disc
        for net in model.nets:
            net.train()
            net.requires_grad_(True)
        e1, e2 = cfg.phase_epochs[:2]
        for epoch in range(e2):
            lr = self._subnet_lr(e1 + epoch)
            self.subnet_opt.lr = lr
            self.disc_opt.lr = step_decay(cfg.disc_lr or cfg.lr, e1 + epoch, e1 + e2,
                                          cfg.lr_milestones, cfg.lr_decay)
            rows, d_rows = [], []
            for step, (xb, yb) in enumerate(self._batches()):
                x = Tensor(xb)
                outs = [net.forward_all(x) for net in model.nets]
                taps = [o[2] for o in outs]

                # (a) discriminator update on detached tap features of all subnetworks
                disc.train()
                disc.requires_grad_(True)
                joint = concat([t.detach() for t in taps], axis=0)
                parts = stack_split(disc(joint), [t.shape[0] for t in taps])
                l_d = F.disc_l2_loss(parts[0], targets[0])
                for k in range(1, n):
                    l_d = l_d + F.disc_l2_loss(parts[k], targets[k])
                l_d_val = float(l_d.item())
                if not _finite(l_d_val):
                    raise TrainingDiverged("non-finite discriminator loss",
                                           {"phase": "step2", "epoch": epoch, "step": step})
                self.disc_opt.zero_grad()
                backward(l_d)
                self.disc_opt.step()

                # (b) simultaneous subnetwork updates through the now-fixed discriminator
                disc.eval()
                disc.requires_grad_(False)
                try:
                    d_scores = [disc(t) for t in taps]
                    bundle = step2_losses([o[0] for o in outs], yb, d_scores, cfg.lam,
                                          cfg.targets, model.state)
                    total = bundle.l_total[0]
                    for t in bundle.l_total[1:]:
                        total = total + t
                    vals = bundle.scalars()
                    self._check(vals, {"phase": "step2", "epoch": epoch, "step": step})
                    self.subnet_opt.zero_grad()
                    backward(total)
                    self.subnet_opt.step()
                finally:
                    disc.requires_grad_(True)
                rows.append(vals)
                d_rows.append(l_d_val)
            self._emit({"phase": "step2", "epoch": epoch, "lr": lr,
                        "ce": self._mean([r["ce"] for r in rows]),
                        "disc": self._mean([r["disc"] for r in rows]),
                        "l_D": float(np.mean(d_rows)) if d_rows else None,
                        **self._eval_record(("subnets",))})
        self.phases_done = 2

    def run_phase3(self) -> None:
        model, cfg = self.model, self.config
        if self.phases_done != 2:
            raise PhaseError("phase 3 needs phase 2 to be completed first")
        model.set_phase(Phase.STEP3)
        for net in model.nets:
            net.eval()
            net.requires_grad_(False)
        extra = model.extra
        extra.train()
        e3 = cfg.phase_epochs[2]
        for epoch in range(e3):
            self.extra_opt.lr = step_decay(cfg.extra_lr or cfg.lr, epoch, e3, cfg.lr_milestones,
                                           cfg.lr_decay)
            losses = []
            for step, (xb, yb) in enumerate(self._batches()):
                with no_grad():
                    fused = model.fused_features(Tensor(xb))
                if fused.shape[1] != extra.in_channels:
                    raise ValueError(f"fused width {fused.shape[1]} != extra classifier width "
                                     f"{extra.in_channels}")
                loss = F.softmax_cross_entropy(extra(fused), yb)
                val = float(loss.item())
                if not _finite(val):
                    raise TrainingDiverged("non-finite loss", {"phase": "step3", "epoch": epoch,
                                                               "step": step})
                self.extra_opt.zero_grad()
                backward(loss)
                self.extra_opt.step()
                losses.append(val)
            self._emit({"phase": "step3", "epoch": epoch, "lr": self.extra_opt.lr,
                        "ce_extra": float(np.mean(losses)) if losses else None,
                        **self._eval_record(("extra",))})
        extra.eval()
        model.set_phase(Phase.INFERENCE)
        self.phases_done = 3

    def run(self, until: int = 3) -> None:
        """Run the remaining phases up to and including phase ``until``."""
        steps = [self.run_phase1, self.run_phase2, self.run_phase3]
        while self.phases_done < until:
            steps[self.phases_done]()

    # -------------------------------------------------------------- persistence
    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        for name, opt in (("subnet", self.subnet_opt), ("disc", self.disc_opt),
                          ("extra", self.extra_opt)):
            arrays.update({f"opt.{name}.{k}": v for k, v in opt.state_dict().items()})
        return arrays

    def state_meta(self) -> dict:
        return {"phases_done": self.phases_done, "rng": self.rng.bit_generator.state,
                "records": self.records, "config": self.config.to_dict()}

    def load_state(self, arrays: Dict[str, np.ndarray], meta: dict) -> None:
        self.model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
        for name, opt in (("subnet", self.subnet_opt), ("disc", self.disc_opt),
                          ("extra", self.extra_opt)):
            prefix = f"opt.{name}."
            opt.load_state_dict({k[len(prefix):]: v for k, v in arrays.items()
                                 if k.startswith(prefix)})
        self.rng.bit_generator.state = meta["rng"]
        self.records = list(meta.get("records", []))
        self.phases_done = int(meta["phases_done"])
        phase = [Phase.STEP1, Phase.STEP2, Phase.STEP3, Phase.INFERENCE][self.phases_done]
        self.model.set_phase(phase)
        if self.phases_done >= 2:
            for net in self.model.nets:
                net.eval()
                net.requires_grad_(False)


def run_phase1(nets, disc, data, config: DpcnConfig, extra=None) -> List[Network]:
    """Functional entry point; prefer :class:`Trainer` to keep optimizer state across phases."""
    extra = extra or _placeholder_extra(nets, config)
    trainer = Trainer(DPCN(list(nets), disc, extra, config), data)
    trainer.run_phase1()
    return trainer.model.nets


def _placeholder_extra(nets, config):
    num_classes = nets[0].num_classes
    return build_extra_classifier(nets[0].classifier, num_classes * len(nets), num_classes)


# ----------------------------------------------------------------------------
# inference, baselines, probe
# ----------------------------------------------------------------------------

def predict(model: DPCN, x, batch_size: int = 256) -> np.ndarray:
    """Class probabilities from the extra classifier on fused extractor features.

    Only the extractors and the extra classifier are evaluated.
    """
    for net in model.nets:
        net.eval()
    model.extra.eval()
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    out = []
    with no_grad():
        for lo in range(0, data.shape[0], batch_size):
            xb = Tensor(data[lo:lo + batch_size])
            feats = [net.extract(xb) for net in model.nets]
            out.append(F.softmax(model.extra(fuse(feats, model.config.fusion)).data))
    return np.concatenate(out)


def net_probabilities(net: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    net.eval()
    out = []
    with no_grad():
        for lo in range(0, x.shape[0], batch_size):
            out.append(F.softmax(net(Tensor(x[lo:lo + batch_size])).data))
    return np.concatenate(out)


def ensemble_predict(nets: Sequence[Network], x: np.ndarray) -> np.ndarray:
    """Average of the members' softmax outputs."""
    probs = [net_probabilities(net, x) for net in nets]
    return np.mean(probs, axis=0)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float((probs.argmax(axis=1) == labels).mean())


def train_single(net: Network, train: ImageDataset, config: DpcnConfig, epochs: int,
                 rng_seed: Optional[int] = None, eval_data: Optional[ImageDataset] = None,
                 log_fn: Optional[Callable[[dict], None]] = None) -> Network:
    """Plain cross-entropy training with the same optimizer and step-decay schedule."""
    rng = np.random.default_rng(config.seed if rng_seed is None else rng_seed)
    opt = SGD(net.parameters(), config.lr, config.momentum, config.weight_decay)
    net.train()
    net.requires_grad_(True)
    for epoch in range(epochs):
        opt.lr = step_decay(config.lr, epoch, epochs, config.lr_milestones, config.lr_decay)
        losses = []
        for xb, yb in batches(train, config.batch_size, rng, shuffle=True, augment=config.augment,
                              pad=config.crop_pad, flip=config.flip):
            loss = F.softmax_cross_entropy(net(Tensor(xb)), yb)
            val = float(loss.item())
            if not _finite(val):
                raise TrainingDiverged("non-finite loss", {"phase": "single", "epoch": epoch})
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(val)
        record = {"phase": "single", "epoch": epoch, "lr": opt.lr, "ce": float(np.mean(losses))}
        if eval_data is not None:
            record["acc"] = accuracy(net_probabilities(net, eval_data.images), eval_data.labels)
            net.train()
        if log_fn is not None:
            log_fn(record)
    net.eval()
    return net


def ensemble_baseline(config: DpcnConfig, train: ImageDataset, test: ImageDataset, epochs: int,
                      num_classes: Optional[int] = None) -> Dict[str, float]:
    """Train two identical networks from different initializations; report each and their average."""
    num_classes = num_classes or train.class_count
    nets = []
    for i, seed in enumerate(config.subnet_seeds()[:2]):
        net = build_network(config.backbone, num_classes, seed, config.width_multiplier,
                            config.depth_blocks, config.tap_point, channels=config.channels)
        train_single(net, train, config, epochs, rng_seed=config.seed * 1000 + 500 + i)
        nets.append(net)
    single = [accuracy(net_probabilities(n, test.images), test.labels) for n in nets]
    return {"single_a": single[0], "single_b": single[1],
            "ensemble": accuracy(ensemble_predict(nets, test.images), test.labels)}


def tap_features(net: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    net.eval()
    out = []
    with no_grad():
        for lo in range(0, x.shape[0], batch_size):
            out.append(net.extract(Tensor(x[lo:lo + batch_size]), with_tap=True)[1].data)
    return np.concatenate(out)


def _probe_features(maps: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean and standard deviation."""
    m = maps.astype(np.float64)
    return np.concatenate([m.mean(axis=(2, 3)), m.std(axis=(2, 3))], axis=1)


def logistic_probe(train_x, train_y, test_x, test_y, steps: int = 500, lr: float = 0.5,
                   l2: float = 1e-4) -> float:
    """Full-batch gradient descent on standardized features; held-out accuracy."""
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd < 1e-8] = 1.0
    a, b = (train_x - mu) / sd, (test_x - mu) / sd
    w = np.zeros(a.shape[1])
    bias = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(a @ w + bias)))
        err = p - train_y
        w -= lr * (a.T @ err / len(err) + l2 * w)
        bias -= lr * err.mean()
    pred = (b @ w + bias) > 0
    return float((pred == test_y.astype(bool)).mean())


def divergence_probe(nets: Sequence[Network], data: ImageDataset, seed: int = 0,
                     max_samples: int = 2000) -> float:
    """How well a fresh linear probe tells which subnetwork produced a tap feature map.

    Inputs are split in half; the probe trains on features of the first half
    from every subnetwork and is scored on the unseen half.  0.5 means the
    extractors are indistinguishable.  With more than two subnetworks the mean
    over pairs is returned.
    """
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(data))[:max_samples]
    x = data.images[idx]
    feats = [_probe_features(tap_features(net, x)) for net in nets]
    half = len(idx) // 2
    scores = []
    for i in range(len(nets)):
        for j in range(i + 1, len(nets)):
            fa, fb = feats[i], feats[j]
            tr_x = np.vstack([fa[:half], fb[:half]])
            tr_y = np.concatenate([np.zeros(half), np.ones(half)])
            te_x = np.vstack([fa[half:], fb[half:]])
            te_y = np.concatenate([np.zeros(len(fa) - half), np.ones(len(fb) - half)])
            scores.append(logistic_probe(tr_x, tr_y, te_x, te_y))
    return float(np.mean(scores))
