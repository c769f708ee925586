"""Grad-CAM heatmaps, rendering and overlap between subnetwork heatmaps."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import Tensor, backward
from .layers import Module
from .models import Network


@dataclass
class Heatmap:
    values: np.ndarray          # (H', W'), nonnegative
    class_index: int
    target_layer: str

    def normalized(self) -> np.ndarray:
        peak = float(self.values.max()) if self.values.size else 0.0
        return self.values / peak if peak > 0 else np.zeros_like(self.values)


def cam_from_activations(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU of the channel sum of activations weighted by spatially averaged gradients.

    Both arrays are (K, H, W) for one sample.
    """
    if activations.shape != grads.shape or activations.ndim != 3:
        raise ValueError("activations and gradients must both be (K, H, W)")
    alpha = grads.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)


def resolve_layer(net: Network, target_layer: Optional[str]) -> tuple:
    """Map a tap name (``block2``) or dotted module path (``extractor.2.1``) to a module."""
    name = target_layer or net.tap_point
    if name in net.stage_names:
        return name, net.extractor[net.stage_names[name]]
    try:
        return name, net.get_submodule(name)
    except KeyError:
        raise ValueError(f"target layer {name!r} not found; stages are {sorted(net.stage_names)}") from None


def grad_cam(net: Network, image, class_index: int, target_layer: Optional[str] = None,
             grad_mask: Optional[np.ndarray] = None) -> Heatmap:
    """Grad-CAM for one image (C, H, W) or a batch of one.

    ``grad_mask`` (length num_classes) replaces the one-hot seed on the logits;
    by default only the selected class logit is differentiated.
    """
    if not 0 <= class_index < net.num_classes:
        raise ValueError(f"class index {class_index} outside [0, {net.num_classes})")
    name, layer = resolve_layer(net, target_layer)
    x = np.asarray(image.data if isinstance(image, Tensor) else image)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("grad_cam takes a single image")
    dtype = net.parameters()[0].dtype
    captured = {}

    def hook(module: Module, out: Tensor):
        out.retain_grad()
        captured["act"] = out

    was_training = net.training
    flags = [(p, p.requires_grad) for p in net.parameters()]
    remove = layer.register_forward_hook(hook)
    net.eval()
    try:
        logits = net(Tensor(x.astype(dtype), requires_grad=True))
        if "act" not in captured:
            raise ValueError(f"layer {name!r} was not evaluated in the forward pass")
        act = captured["act"]
        if act.ndim != 4:
            raise ValueError(f"layer {name!r} output is not a 4-D feature map")
        seed = np.zeros(logits.shape, dtype=logits.dtype)
        if grad_mask is None:
            seed[0, class_index] = 1.0
        else:
            seed[0] = grad_mask
        backward((logits * Tensor(seed)).sum())
        grads = act.grad if act.grad is not None else np.zeros_like(act.data)
        values = cam_from_activations(act.data[0].astype(np.float64), grads[0].astype(np.float64))
    finally:
        remove()
        net.zero_grad()
        for p, flag in flags:
            p.requires_grad = flag
        net.train(was_training)
    return Heatmap(values, class_index, name)


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------

def bilinear_upsample(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    h, w = values.shape

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    v = values.astype(np.float64)
    top = v[y0][:, x0] * (1 - fx) + v[y0][:, x1] * fx
    bottom = v[y1][:, x0] * (1 - fx) + v[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


# blue -> cyan -> green -> yellow -> red
_COLORMAP_STOPS = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.0, 1.0, 0.0],
                            [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB in [0, 1]; returns (..., 3)."""
    v = np.clip(values, 0.0, 1.0) * (len(_COLORMAP_STOPS) - 1)
    lo = np.minimum(np.floor(v).astype(int), len(_COLORMAP_STOPS) - 2)
    t = (v - lo)[..., None]
    return _COLORMAP_STOPS[lo] * (1 - t) + _COLORMAP_STOPS[lo + 1] * t


def overlay(heatmap: Heatmap, base_image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colored heatmap over ``base_image`` ((3, H, W) or (H, W, 3), values in [0, 1])."""
    base = np.asarray(base_image, dtype=np.float64)
    if base.ndim == 3 and base.shape[0] == 3 and base.shape[-1] != 3:
        base = base.transpose(1, 2, 0)
    h, w = base.shape[:2]
    heat = bilinear_upsample(heatmap.normalized(), h, w)
    return (1 - alpha) * np.clip(base, 0, 1) + alpha * colormap(heat)


def render_heatmap(heatmap: Heatmap, base_image: np.ndarray, out_path) -> np.ndarray:
    """Write the 0.5 blend as a PNG; returns the blended uint8 image."""
    from PIL import Image

    blended = np.round(overlay(heatmap, base_image) * 255).astype(np.uint8)
    directory = os.path.dirname(os.fspath(out_path))
    if directory and not os.path.isdir(directory):
        raise OSError(f"cannot write {out_path}: directory does not exist")
    Image.fromarray(blended, mode="RGB").save(out_path, format="PNG")
    return blended


def heatmap_overlap(h1, h2) -> float:
    """Cosine similarity of the max-normalized maps (1 = same focus)."""
    a = np.asarray(getattr(h1, "values", h1), dtype=np.float64)
    b = np.asarray(getattr(h2, "values", h2), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"heatmap shapes differ: {a.shape} vs {b.shape}")
    ma, mb = np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0)
    if ma == 0 and mb == 0:
        raise ValueError("both heatmaps are identically zero")
    if ma == 0 or mb == 0:
        return 0.0
    a, b = (a / ma).ravel(), (b / mb).ravel()
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return min(max(cos, 0.0), 1.0)
