"""Deformation operator acting on projection stacks.

A flow stack has shape ``(N_theta, N_z, N_s, 2)``; the last axis holds
``(f_s, f_z)`` in pixels, the same layout OpenCV uses for dense flow.
Warping samples ``p[theta, z + f_z, s + f_s]`` bilinearly with replicate-edge
extension. The adjoint scatters each sample's four weights back to its source
pixels, which makes it the exact transpose of the warp for any flow.
"""

from __future__ import annotations

import numpy as np
from matplotlib.colors import hsv_to_rgb

__all__ = [
    "FlowWarp",
    "apply_flow",
    "apply_flow_adjoint",
    "validate_flow",
    "flow_color_image",
]


def validate_flow(f: np.ndarray, shape=None, max_displacement: float | None = None) -> np.ndarray:
    """Check a flow stack and return it unchanged.

    Raises ``ValueError`` for a wrong shape, non-finite entries or vectors
    longer than ``max_displacement``.
    """
    f = np.asarray(f)
    if f.ndim != 4 or f.shape[-1] != 2:
        raise ValueError(f"flow must have shape (N_theta, N_z, N_s, 2), got {f.shape}")
    if shape is not None and f.shape[:3] != tuple(shape):
        raise ValueError(f"flow shape {f.shape[:3]} does not match stack shape {tuple(shape)}")
    if not np.all(np.isfinite(f)):
        raise ValueError("flow contains NaN or Inf")
    if max_displacement is not None:
        peak = float(np.sqrt((f.astype(np.float64) ** 2).sum(-1)).max(initial=0.0))
        if peak > max_displacement:
            raise ValueError(f"flow magnitude {peak:.3g} exceeds max_displacement {max_displacement}")
    return f


class FlowWarp:
    """Precomputed bilinear weights of one flow stack.

    Building the weights once lets the deformation sub-problem apply the warp
    and its transpose many times for the price of four gathers each.
    """

    def __init__(self, flow: np.ndarray, dtype=np.float32):
        flow = validate_flow(flow)
        n_a, n_z, n_s, _ = flow.shape
        self.shape = (n_a, n_z, n_s)
        self.dtype = dtype
        z = np.arange(n_z, dtype=np.float64)[None, :, None] + flow[..., 1]
        s = np.arange(n_s, dtype=np.float64)[None, None, :] + flow[..., 0]
        z = np.clip(z, 0, n_z - 1)
        s = np.clip(s, 0, n_s - 1)
        z0 = np.minimum(np.floor(z), max(n_z - 2, 0)).astype(np.int64)
        s0 = np.minimum(np.floor(s), max(n_s - 2, 0)).astype(np.int64)
        self._fz = (z - z0).astype(dtype)
        self._fs = (s - s0).astype(dtype)
        base = (np.arange(n_a)[:, None, None] * n_z + z0) * n_s + s0
        self._base = base.ravel()
        # neighbour offsets collapse to 0 along singleton axes
        self._ds = 1 if n_s > 1 else 0
        self._dz = n_s if n_z > 1 else 0
        self._size = n_a * n_z * n_s

    def _check(self, p):
        if p.shape != self.shape:
            raise ValueError(f"stack shape {p.shape} does not match flow shape {self.shape}")

    def apply(self, p: np.ndarray) -> np.ndarray:
        self._check(p)
        flat = np.ascontiguousarray(p).ravel()
        b = self._base
        fs = self._fs.ravel()
        fz = self._fz.ravel()
        top = flat[b] * (1 - fs) + flat[b + self._ds] * fs
        bottom = flat[b + self._dz] * (1 - fs) + flat[b + self._dz + self._ds] * fs
        return (top * (1 - fz) + bottom * fz).reshape(self.shape).astype(p.dtype, copy=False)

    def adjoint(self, q: np.ndarray) -> np.ndarray:
        self._check(q)
        flat = np.ascontiguousarray(q).ravel()
        fs = self._fs.ravel()
        fz = self._fz.ravel()
        b = self._base
        out = np.bincount(b, flat * ((1 - fs) * (1 - fz)), minlength=self._size)
        out += np.bincount(b + self._ds, flat * (fs * (1 - fz)), minlength=self._size)
        out += np.bincount(b + self._dz, flat * ((1 - fs) * fz), minlength=self._size)
        out += np.bincount(b + self._dz + self._ds, flat * (fs * fz), minlength=self._size)
        return out.reshape(self.shape).astype(q.dtype, copy=False)


def apply_flow(p: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Resample ``p`` at ``(s + f_s, z + f_z)`` for every angle."""
    if f.shape[:3] != p.shape:
        raise ValueError(f"flow shape {f.shape[:3]} does not match stack shape {p.shape}")
    return FlowWarp(f, dtype=p.dtype if p.dtype == np.float32 else np.float64).apply(p)


def apply_flow_adjoint(p: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`apply_flow` for the same flow."""
    if f.shape[:3] != p.shape:
        raise ValueError(f"flow shape {f.shape[:3]} does not match stack shape {p.shape}")
    return FlowWarp(f, dtype=p.dtype if p.dtype == np.float32 else np.float64).adjoint(p)


def flow_color_image(f: np.ndarray, index: int) -> np.ndarray:
    """Colour-wheel rendering of the flow of one projection.

    Hue encodes direction and saturation the magnitude relative to the
    largest vector of the whole stack, so zero flow renders white.
    Returns an ``(N_z, N_s, 3)`` uint8 image.
    """
    f = validate_flow(f)
    if not 0 <= index < f.shape[0]:
        raise IndexError(f"projection index {index} out of range [0, {f.shape[0]})")
    mag_all = np.sqrt((f.astype(np.float64) ** 2).sum(-1))
    peak = mag_all.max(initial=0.0)
    fs, fz = f[index, ..., 0], f[index, ..., 1]
    hue = (np.arctan2(fz, fs) / (2 * np.pi)) % 1.0
    sat = mag_all[index] / peak if peak > 0 else np.zeros_like(hue)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)
