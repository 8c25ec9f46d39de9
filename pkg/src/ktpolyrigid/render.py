"""PNG renders of three orthogonal slices for quick inspection."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .volume import VolumeGrid


def window_level(values, window: float, level: float) -> np.ndarray:
    """Map intensities to uint8 with the given window width and centre."""
    lo = level - 0.5 * window
    out = (np.asarray(values, dtype=float) - lo) / max(window, 1e-12)
    return np.round(255.0 * np.clip(out, 0.0, 1.0)).astype(np.uint8)


def orthogonal_slices(vol: VolumeGrid, index=None, channel: int = 0):
    """Axial (xy), coronal (xz) and sagittal (yz) slices through ``index`` (default: centre)."""
    data = np.asarray(vol.data, dtype=float)
    if data.ndim == 4:
        data = data[..., channel]
    c = [d // 2 for d in data.shape] if index is None else [int(i) for i in index]
    # rows run along the second axis, flipped so +y / +z point up
    xy = data[:, :, c[2]].T[::-1]
    xz = data[:, c[1], :].T[::-1]
    yz = data[c[0], :, :].T[::-1]
    return xy, xz, yz


def render_png(vol: VolumeGrid, path, window: float | None = None, level: float | None = None,
               index=None, channel: int = 0, gap: int = 2) -> np.ndarray:
    """Write the three slices side by side as an 8-bit grey PNG; returns the pixel array."""
    slices = orthogonal_slices(vol, index, channel)
    finite = np.concatenate([s[np.isfinite(s)].ravel() for s in slices])
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if window is None:
        window = max(hi - lo, 1e-12)
    if level is None:
        level = 0.5 * (lo + hi)
    h = max(s.shape[0] for s in slices)
    w = sum(s.shape[1] for s in slices) + gap * (len(slices) - 1)
    canvas = np.zeros((h, w), dtype=np.uint8)
    x = 0
    for s in slices:
        canvas[:s.shape[0], x:x + s.shape[1]] = window_level(np.nan_to_num(s, nan=lo, posinf=hi, neginf=lo),
                                                             window, level)
        x += s.shape[1] + gap
    Image.fromarray(canvas, mode="L").save(path, format="PNG")
    return canvas
