"""Farneback optical flow between projection stacks.

The per-image polynomial-expansion flow comes from OpenCV. This module adds
the stack-level plumbing: intensity normalisation, warm starts, the
global-shift variant, the shrinking window schedule and the rigid
pre-alignment used by the pre-aligned CG baseline.

Sign convention: ``estimate_flow(reference, moving)`` returns ``f`` with
``moving(s + f_s, z + f_z) ~= reference(s, z)``, i.e.
``apply_flow(moving, f) ~= reference``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import cv2
import numpy as np

from .geometry import ScanGeometry
from .warp import apply_flow

__all__ = [
    "FlowParams",
    "estimate_flow",
    "estimate_shift",
    "window_schedule",
    "prealign",
]

MIN_WINDOW = 8
# OpenCV's Farneback solver regularises with an absolute constant, so images
# are mapped to roughly this dynamic range before estimation.
_INTENSITY_RANGE = 255.0


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 4
    pyramid_scale: float = 0.5
    window_size: int = 15
    iterations_per_level: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1
    dense: bool = True

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if not 0 < self.pyramid_scale < 1:
            raise ValueError("pyramid_scale must lie in (0, 1)")
        if self.poly_n % 2 != 1:
            raise ValueError("poly_n must be odd")
        if self.window_size < self.poly_n:
            raise ValueError("window_size must be >= poly_n")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be >= 1")

    def with_window(self, window: int) -> "FlowParams":
        return replace(self, window_size=max(int(window), self.poly_n))


def _check_pair(reference: np.ndarray, moving: np.ndarray, params: FlowParams):
    if reference.shape != moving.shape:
        raise ValueError(f"stack shapes differ: {reference.shape} vs {moving.shape}")
    if reference.ndim != 3:
        raise ValueError("expected (N_theta, N_z, N_s) stacks")
    if min(reference.shape[1:]) < params.poly_n:
        raise ValueError(
            f"images of size {reference.shape[1:]} are smaller than poly_n={params.poly_n}"
        )


def _flow_one(ref, mov, params: FlowParams, init):
    lo = float(ref.min())
    span = float(ref.max()) - lo
    scale = _INTENSITY_RANGE / span if span > 0 else 1.0
    a = ((ref - lo) * scale).astype(np.float32)
    b = ((mov - lo) * scale).astype(np.float32)
    flags = 0
    if init is not None:
        flow = np.ascontiguousarray(init, dtype=np.float32)
        flags = cv2.OPTFLOW_USE_INITIAL_FLOW
    else:
        flow = None
    return cv2.calcOpticalFlowFarneback(
        a,
        b,
        flow,
        params.pyramid_scale,
        params.pyramid_levels,
        params.window_size,
        params.iterations_per_level,
        params.poly_n,
        params.poly_sigma,
        flags,
    )


def estimate_flow(
    reference: np.ndarray,
    moving: np.ndarray,
    params: FlowParams = FlowParams(),
    initial: np.ndarray | None = None,
) -> np.ndarray:
    """Dense flow per projection such that ``apply_flow(moving, f) ~= reference``.

    Parameters
    ----------
    reference, moving : (N_theta, N_z, N_s) arrays
        In the deformation sub-problem ``reference`` is the measured data and
        ``moving`` the current re-projection estimate.
    params : FlowParams
        Farneback settings; ``window_size`` is usually driven by
        :func:`window_schedule`.
    initial : (N_theta, N_z, N_s, 2) array, optional
        Warm start, typically the flow of the previous ADMM iteration.
    """
    _check_pair(reference, moving, params)
    if initial is not None and initial.shape != reference.shape + (2,):
        raise ValueError(f"initial flow shape {initial.shape} does not match {reference.shape}")
    out = np.empty(reference.shape + (2,), dtype=np.float32)
    for a in range(reference.shape[0]):
        init = None if initial is None else initial[a]
        out[a] = _flow_one(reference[a], moving[a], params, init)
    return out


def _central_box(n: int, fraction: float = 0.8) -> slice:
    margin = int(round(n * (1 - fraction) / 2))
    return slice(margin, n - margin) if n - 2 * margin > 0 else slice(0, n)


def collapse_to_shift(flow: np.ndarray) -> np.ndarray:
    """Replace each projection's flow by its mean over the central 80% box."""
    _, n_z, n_s, _ = flow.shape
    box = flow[:, _central_box(n_z), _central_box(n_s), :]
    mean = box.mean(axis=(1, 2), dtype=np.float64).astype(flow.dtype)
    return np.broadcast_to(mean[:, None, None, :], flow.shape).copy()


def estimate_shift(
    reference: np.ndarray,
    moving: np.ndarray,
    params: FlowParams = FlowParams(),
    initial: np.ndarray | None = None,
) -> np.ndarray:
    """One rigid ``(shift_s, shift_z)`` per projection, returned as a constant flow."""
    return collapse_to_shift(estimate_flow(reference, moving, params, initial))


def window_schedule(
    level_image_min: int,
    total_iterations: int,
    decrement: float = 2,
    min_window: int | None = MIN_WINDOW,
) -> list[int]:
    """Farneback window size for each ADMM iteration of one resolution level.

    Starts at the smaller image dimension and shrinks by ``decrement`` per
    iteration, never below ``min_window`` (pass ``None`` to disable the floor).

    >>> window_schedule(16, 6, 2)
    [16, 14, 12, 10, 8, 8]
    """
    if total_iterations < 1:
        raise ValueError("total_iterations must be >= 1")
    if not decrement > 0:
        raise ValueError("decrement must be positive")
    sizes = []
    for k in range(total_iterations):
        w = int(round(level_image_min - k * decrement))
        if min_window is not None:
            w = max(min_window, w)
        sizes.append(w)
    return sizes


def _first_rotation_reference(d: np.ndarray, g: ScanGeometry, index: int) -> np.ndarray:
    """Projection at ``g.angles[index]`` interpolated from rotation-0 data.

    Rotation-0 projections are extended by their mirror images at
    ``theta + pi`` so the interpolation is cyclic over the full circle.
    """
    n0 = g.n_per_rotation
    base = g.angles[:n0]
    cand_angles = np.concatenate([base, np.mod(base + np.pi, 2 * np.pi)])
    cand_index = np.concatenate([np.arange(n0), np.arange(n0)])
    cand_mirror = np.concatenate([np.zeros(n0, bool), np.ones(n0, bool)])
    order = np.argsort(cand_angles, kind="stable")
    cand_angles, cand_index, cand_mirror = cand_angles[order], cand_index[order], cand_mirror[order]
    keep = np.concatenate([[True], np.diff(cand_angles) > 1e-9])
    cand_angles, cand_index, cand_mirror = cand_angles[keep], cand_index[keep], cand_mirror[keep]

    def proj(k):
        p = d[cand_index[k]]
        return p[:, ::-1] if cand_mirror[k] else p

    theta = g.angles[index]
    hi = int(np.searchsorted(cand_angles, theta))
    lo = hi - 1
    a_lo = cand_angles[lo % len(cand_angles)] - (2 * np.pi if lo < 0 else 0)
    a_hi = cand_angles[hi % len(cand_angles)] + (2 * np.pi if hi >= len(cand_angles) else 0)
    if abs(a_hi - theta) < 1e-12:
        return proj(hi % len(cand_angles))
    w = (theta - a_lo) / (a_hi - a_lo)
    return (1 - w) * proj(lo % len(cand_angles)) + w * proj(hi % len(cand_angles))


def prealign(
    d: np.ndarray, g: ScanGeometry, params: FlowParams = FlowParams(dense=False)
) -> tuple[np.ndarray, np.ndarray]:
    """Rigidly align projections of later rotations to the first rotation.

    Each projection acquired after the first rotation gets one global shift,
    estimated against the rotation-0 projection interpolated to its angle.
    Returns ``(aligned_stack, shift_flow)``; rotation-0 shifts are zero.
    """
    if d.shape[0] != g.n_angles_total:
        raise ValueError("stack and geometry disagree on the number of angles")
    shifts = np.zeros(d.shape + (2,), dtype=np.float32)
    later = np.flatnonzero(g.rotation_index > 0)
    if later.size:
        ref = np.stack([_first_rotation_reference(d, g, i) for i in later])
        shifts[later] = estimate_shift(ref, d[later], params)
    return apply_flow(d, shifts), shifts
