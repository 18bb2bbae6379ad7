"""3D Grad-CAM: per-branch class activation maps and population averages.

For a target class the logit (pre-sigmoid) is differentiated with respect to
the last conv block output of each branch.  Channel weights are the spatial
means of those gradients; the map is ``relu(sum_k alpha_k A_k)``, upsampled
to the branch input grid with separable Catmull-Rom interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import voltensor as vt
from .cohort.structures import BRANCHES
from .netarch import ModelCheckpoint, forward

OVERLAY_THRESHOLD = 0.2


@dataclass
class AttentionMap:
    branch: str
    low_res: np.ndarray
    upsampled: np.ndarray
    target_class: int
    subject_id: str = ""
    raw_max: float = 0.0


@dataclass
class PopulationMap:
    branch: str
    mean: np.ndarray
    count: int


def neuron_weights(grads) -> np.ndarray:
    """Spatial mean of the gradient for each of the K feature maps ([K, D, H, W] -> [K])."""
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim != 4:
        raise vt.ShapeError(f"gradients must be [K, D, H, W], got {g.shape}")
    return g.mean(axis=(1, 2, 3))


def cam(alphas, feature_maps) -> np.ndarray:
    """``relu(sum_k alpha_k A_k)`` for maps [K, D, H, W]."""
    a = np.asarray(alphas, dtype=np.float64)
    A = np.asarray(feature_maps, dtype=np.float64)
    if A.ndim != 4 or a.shape != (A.shape[0],):
        raise vt.ShapeError(f"need K weights for K maps; got {a.shape} and {A.shape}")
    return np.maximum(np.tensordot(a, A, axes=1), 0.0)


def _resample_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    a = np.moveaxis(arr, axis, 0)
    # linearly extrapolated ghost samples keep degree-1 fields exact at the borders
    ext = np.concatenate([2 * a[:1] - a[1:2], a, 2 * a[-1:] - a[-2:-1]], axis=0)
    pos = np.zeros(1) if n_out == 1 else np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i = np.minimum(np.floor(pos).astype(int), n_in - 2)
    t = (pos - i).reshape((-1,) + (1,) * (a.ndim - 1))
    p1 = ext[i + 1]
    d0 = ext[i] - p1
    d2 = ext[i + 2] - p1
    d3 = ext[i + 3] - p1
    out = p1 + 0.5 * t * ((d2 - d0) + t * ((2 * d0 + 4 * d2 - d3) + t * (-d0 - 3 * d2 + d3)))
    # sample positions that land on the grid (including the last one, where t == 1)
    exact = pos == np.round(pos)
    if exact.any():
        out[exact] = a[np.round(pos[exact]).astype(int)]
    return np.moveaxis(out, 0, axis)


def upsample_tricubic(volume, target_shape) -> np.ndarray:
    """Separable Catmull-Rom resampling onto ``target_shape`` (corner-aligned).

    Output is clamped at zero.
    """
    v = np.asarray(volume, dtype=np.float64)
    target = tuple(int(s) for s in target_shape)
    if v.ndim != 3 or len(target) != 3:
        raise vt.ShapeError("upsample_tricubic works on 3D volumes")
    if min(target) < 1:
        raise ValueError(f"degenerate target shape {target}")
    if min(v.shape) < 2:
        raise ValueError(f"source extents must be >= 2, got {v.shape}")
    for ax, n in enumerate(target):
        if v.shape[ax] != n:
            v = _resample_axis(v, ax, n)
    return np.maximum(v, 0.0)


def minmax(volume: np.ndarray) -> np.ndarray:
    lo, hi = float(volume.min()), float(volume.max())
    if hi <= lo:
        return np.zeros_like(volume)
    return (volume - lo) / (hi - lo)


def subject_attention(
    model: ModelCheckpoint,
    batch: Mapping[str, np.ndarray],
    target_class: int = 1,
    subject_ids: Sequence[str] | None = None,
) -> list[dict[str, AttentionMap]]:
    """Per-branch normalized attention maps for each subject in ``batch``.

    Runs one inference-mode forward and one backward pass.  Batch-norm uses
    running statistics, so subjects do not interact and the summed logit can
    be differentiated once for the whole batch.
    """
    if target_class not in (0, 1):
        raise ValueError("target_class must be 0 or 1")
    n = len(next(iter(batch.values())))
    ids = list(subject_ids) if subject_ids is not None else [str(i) for i in range(n)]
    with vt.Tape() as tape:
        res = forward(model, batch, training=False)
        score = res.logit.sum() if target_class == 1 else (-res.logit).sum()
    tape.backward(score)
    cfg = model.config
    out = []
    for i in range(n):
        maps = {}
        for b in BRANCHES:
            act = res.activations[b]
            A = act.data[i].astype(np.float64)
            low = cam(neuron_weights(act.grad[i]), A)
            up = upsample_tricubic(low, cfg.input_shape(b)[1:])
            maps[b] = AttentionMap(b, low, minmax(up), target_class, ids[i], float(up.max()))
        out.append(maps)
    for t in tape.tensors():
        t.grad = None
    return out


def population_average(maps: Iterable[AttentionMap]) -> PopulationMap:
    """Voxel-wise running mean of normalized subject maps."""
    mean = None
    count = 0
    branch = None
    for m in maps:
        if mean is None:
            branch, mean = m.branch, np.zeros_like(m.upsampled, dtype=np.float64)
        elif m.branch != branch or m.upsampled.shape != mean.shape:
            raise ValueError("maps must share branch and shape")
        count += 1
        mean += (m.upsampled - mean) / count
    if mean is None:
        raise ValueError("no maps to average")
    return PopulationMap(branch, mean, count)


def top_mass_fraction(volume: np.ndarray, region: np.ndarray, top: float = 0.05) -> float:
    """Share of the attention mass of the top ``top`` fraction of voxels that falls in ``region``."""
    flat = volume.ravel()
    k = max(1, int(round(top * flat.size)))
    idx = np.argsort(-flat, kind="stable")[:k]
    total = flat[idx].sum()
    if total <= 0:
        return 0.0
    return float(flat[idx][region.ravel()[idx]].sum() / total)


# ---------------------------------------------------------------- overlays


def warm_color(v: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow for values in [0, 1]; returns [..., 3] in [0, 1]."""
    v = np.clip(v, 0.0, 1.0)
    return np.stack([np.minimum(1.0, 2 * v), np.clip(2 * v - 1, 0.0, 1.0), np.zeros_like(v)], axis=-1)


def overlay_pixels(attention: np.ndarray, anatomy: np.ndarray, axis: int, slice_index: int) -> np.ndarray:
    """RGB uint8 slice: grayscale anatomy blended with the warm map where map > 0.2.

    The blend weight equals the map value, so a value of 1 shows the pure
    colormap maximum.
    """
    if attention.shape != anatomy.shape:
        raise ValueError(f"shape mismatch: {attention.shape} vs {anatomy.shape}")
    if not 0 <= slice_index < anatomy.shape[axis]:
        raise IndexError(f"slice {slice_index} out of range for axis {axis} (size {anatomy.shape[axis]})")
    a = np.take(anatomy, slice_index, axis=axis).astype(np.float64)
    m = np.take(attention, slice_index, axis=axis).astype(np.float64)
    lo, hi = float(anatomy.min()), float(anatomy.max())
    gray = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    alpha = np.where(m > OVERLAY_THRESHOLD, np.clip(m, 0.0, 1.0), 0.0)[..., None]
    blended = (1 - alpha) * rgb + alpha * warm_color(m)
    return np.round(blended * 255).astype(np.uint8)


def write_ppm(pixels: np.ndarray, path) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def render_overlay(attention, anatomy, axis: int, slice_index: int, path) -> np.ndarray:
    pixels = overlay_pixels(np.asarray(attention), np.asarray(anatomy), axis, slice_index)
    write_ppm(pixels, path)
    return pixels


def write_sidecar(path, branch: str, target_class: int, count: int, pop: np.ndarray, **extra) -> None:
    d = {"branch": branch, "target_class": target_class, "subject_count": count,
         "min": float(pop.min()), "max": float(pop.max()), "normalization": "per-subject min-max", **extra}
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=True))
