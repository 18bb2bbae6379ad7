"""Region crops that feed the CNN branches."""

from __future__ import annotations

import logging

import numpy as np

from .phantom import Subject
from .structures import Region, region_structures

log = logging.getLogger(__name__)


def region_bbox(subject: Subject, region: Region | str) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive (lo, hi) voxel bounds of the union of the region's masks."""
    idx = [s.index for s in region_structures(region)]
    union = subject.masks[idx].any(axis=0)
    if not union.any():
        raise ValueError(f"{subject.subject_id}: all {Region(region).value} masks are empty")
    nz = np.argwhere(union)
    return nz.min(axis=0), nz.max(axis=0)


def crop_window(subject: Subject, region, crop_shape, center=None) -> tuple[np.ndarray, np.ndarray]:
    """Start index (may be negative) and shape of the crop for ``region``.

    The window is centered on ``center`` when given (a fixed anchor such as
    the template bounding-box center), otherwise on the subject's own
    bounding box.
    """
    lo, hi = region_bbox(subject, region)
    crop = np.asarray(crop_shape, dtype=int)
    c = (lo + hi + 1) // 2 if center is None else np.asarray(center, dtype=int)
    start = c - crop // 2
    if (lo < start).any() or (hi >= start + crop).any():
        log.warning(
            "%s: %s bounding box [%s, %s] not inside crop window at %s; clipping",
            subject.subject_id, Region(region).value, lo.tolist(), hi.tolist(), start.tolist(),
        )
    return start, crop


def _extract(volume: np.ndarray, start: np.ndarray, shape: np.ndarray) -> np.ndarray:
    out = np.zeros(tuple(shape), dtype=volume.dtype)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + shape, volume.shape)
    if (src_hi <= src_lo).any():
        return out
    dst_lo = src_lo - start
    dst_hi = dst_lo + (src_hi - src_lo)
    out[tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))] = volume[
        tuple(slice(a, b) for a, b in zip(src_lo, src_hi))
    ]
    return out


def block_mean(volume: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return volume
    d, h, w = volume.shape
    if d % factor or h % factor or w % factor:
        raise ValueError(f"shape {volume.shape} not divisible by downsample factor {factor}")
    v = volume.reshape(d // factor, factor, h // factor, factor, w // factor, factor)
    return v.mean(axis=(1, 3, 5))


def crop_region(
    subject: Subject,
    region: Region | str,
    crop_shape,
    use_mri: bool = True,
    use_mask: bool = True,
    downsample: int = 1,
    center=None,
) -> np.ndarray:
    """Multi-channel crop centered on the region's mask bounding box (or ``center``).

    Channel 0 is the MRI crop z-scored over the crop (when ``use_mri``),
    followed by one binary mask per structure of the region (when
    ``use_mask``).  ``downsample`` block-averages the crop by an integer
    factor; masks are re-binarized at 0.5.

    Returns
    -------
    ndarray, float32, shape [C, D/f, H/f, W/f]
    """
    if not (use_mri or use_mask):
        raise ValueError("at least one of use_mri/use_mask must be set")
    start, shape = crop_window(subject, region, crop_shape, center)
    channels = []
    if use_mri:
        img = block_mean(_extract(subject.image.astype(np.float64), start, shape), downsample)
        sd = img.std()
        channels.append((img - img.mean()) / max(sd, 1e-8))
    if use_mask:
        for s in region_structures(region):
            m = _extract(subject.mask(s).astype(np.float64), start, shape)
            channels.append((block_mean(m, downsample) >= 0.5).astype(np.float64))
    return np.stack(channels).astype(np.float32)
