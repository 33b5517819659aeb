"""Deforming tube phantom and scan simulation.

The object is a sum of capsules (cylinders with hemispherical caps). During
the scan it is warped by one smooth random displacement field scaled by
``amount(t) = (1 - exp(-rate t)) / (1 - exp(-rate))``, so the configured
maximum displacement is reached exactly at the end of the acquisition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import ScanGeometry
from .projector import get_projector

__all__ = [
    "Tube",
    "PhantomSpec",
    "DeformationSpec",
    "NoiseSpec",
    "render_tubes",
    "make_tube_phantom",
    "make_deformation_field",
    "deform_volume",
    "deformation_amount",
    "simulate_scan",
]


@dataclass(frozen=True)
class Tube:
    """Capsule between two end points ``(x, y, z)`` in voxel index units."""

    start: tuple
    end: tuple
    radius: float
    intensity: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    n: int = 64
    n_tubes: int = 12
    radius_range: tuple | None = None  # defaults to (n/32, 5n/64): same shapes at every size
    intensity_range: tuple = (0.5, 1.0)
    seed: int = 0
    n_z: int | None = None

    def __post_init__(self):
        if self.n < 16:
            raise ValueError("phantom size must be >= 16")
        if self.radius_range is None:
            object.__setattr__(self, "radius_range", (self.n / 32, 5 * self.n / 64))
        lo, hi = self.radius_range
        if not 0 < lo <= hi < self.n / 4:
            raise ValueError("radius_range must lie within (0, n/4)")
        if self.n_tubes < 0:
            raise ValueError("n_tubes must be >= 0")


@dataclass(frozen=True)
class DeformationSpec:
    max_displacement: float = 5.0
    smoothness_sigma: float | None = None  # defaults to n / 8
    rate: float = 3.0
    seed: int = 1

    def __post_init__(self):
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be >= 0")


@dataclass(frozen=True)
class NoiseSpec:
    poisson_photons: float | None = 1e5
    background_amplitude: float | None = 0.1
    background_sigma: float | None = None  # defaults to N_s / 4
    seed: int = 2

    def __post_init__(self):
        if self.poisson_photons is not None and self.poisson_photons < 1:
            raise ValueError("poisson_photons must be >= 1")


def render_tubes(n: int, tubes, n_z: int | None = None, dtype=np.float32) -> np.ndarray:
    """Rasterise capsules with a one-voxel linear edge ramp.

    The ramp gives partial-volume weights, so cross-section areas match
    ``pi r^2`` closely instead of the staircase count of a hard threshold.
    """
    n_z = n if n_z is None else n_z
    vol = np.zeros((n_z, n, n), dtype=np.float64)
    if not tubes:
        return vol.astype(dtype)
    z, y, x = np.meshgrid(np.arange(n_z), np.arange(n), np.arange(n), indexing="ij")
    for tube in tubes:
        a = np.asarray(tube.start, dtype=np.float64)
        b = np.asarray(tube.end, dtype=np.float64)
        r = float(tube.radius)
        lo = np.floor(np.minimum(a, b) - r - 1).astype(int)
        hi = np.ceil(np.maximum(a, b) + r + 2).astype(int)
        sx = slice(max(lo[0], 0), min(hi[0], n))
        sy = slice(max(lo[1], 0), min(hi[1], n))
        sz = slice(max(lo[2], 0), min(hi[2], n_z))
        px, py, pz = x[sz, sy, sx], y[sz, sy, sx], z[sz, sy, sx]
        ab = b - a
        denom = float(ab @ ab)
        rel = np.stack([px - a[0], py - a[1], pz - a[2]], axis=-1)
        t = np.clip(rel @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(px.shape)
        closest = rel - t[..., None] * ab
        dist = np.sqrt((closest**2).sum(-1))
        vol[sz, sy, sx] += tube.intensity * np.clip(r - dist + 0.5, 0.0, 1.0)
    return vol.astype(dtype)


def _random_tubes(spec: PhantomSpec):
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    n_z = spec.n_z or n
    centre = np.array([(n - 1) / 2, (n - 1) / 2, (n_z - 1) / 2])
    tubes = []
    for _ in range(spec.n_tubes):
        r = rng.uniform(*spec.radius_range)
        # end points inside a shrunken inscribed sphere so the capsule stays
        # clear of the volume border even after deformation
        reach = 0.7 * (min(n, n_z) / 2 - r - 1)
        ends = []
        for _ in range(2):
            v = rng.standard_normal(3)
            v /= np.linalg.norm(v)
            ends.append(centre + v * reach * rng.uniform() ** (1 / 3))
        intensity = rng.uniform(*spec.intensity_range)
        tubes.append(Tube(tuple(ends[0]), tuple(ends[1]), r, intensity))
    return tubes


def make_tube_phantom(spec: PhantomSpec, dtype=np.float32) -> np.ndarray:
    """Seeded random tube phantom of shape ``(n_z, n, n)``."""
    return render_tubes(spec.n, _random_tubes(spec), spec.n_z, dtype)


def make_deformation_field(spec: DeformationSpec, n: int, n_z: int | None = None) -> np.ndarray:
    """Smooth random displacement field ``(3, n_z, n, n)`` with components (x, y, z).

    Seeded white noise is low-pass filtered with a Gaussian of
    ``smoothness_sigma`` voxels (periodic, in Fourier space) and rescaled so
    that the longest displacement equals ``max_displacement``.
    """
    n_z = n if n_z is None else n_z
    shape = (n_z, n, n)
    if spec.max_displacement == 0:
        return np.zeros((3,) + shape, dtype=np.float32)
    sigma = spec.smoothness_sigma if spec.smoothness_sigma is not None else n / 8
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal((3,) + shape)
    out = np.empty_like(noise)
    for c in range(3):
        spec_c = np.fft.rfftn(noise[c])
        spec_c = ndimage.fourier_gaussian(spec_c, sigma=sigma, n=shape[-1])
        out[c] = np.fft.irfftn(spec_c, s=shape, axes=(0, 1, 2))
    peak = np.sqrt((out**2).sum(0)).max()
    return (out * (spec.max_displacement / peak)).astype(np.float32)


def deform_volume(u: np.ndarray, displacement: np.ndarray, amount: float = 1.0) -> np.ndarray:
    """Backward trilinear warp ``u(x + amount * displacement(x))``, edges replicated."""
    if displacement.shape != (3,) + u.shape:
        raise ValueError(f"displacement shape {displacement.shape} does not match volume {u.shape}")
    if amount == 0:
        return u.copy()
    n_z, n_y, n_x = u.shape
    zz, yy, xx = np.meshgrid(
        np.arange(n_z, dtype=np.float32),
        np.arange(n_y, dtype=np.float32),
        np.arange(n_x, dtype=np.float32),
        indexing="ij",
    )
    a = np.float32(amount)
    coords = np.stack(
        [zz + a * displacement[2], yy + a * displacement[1], xx + a * displacement[0]]
    )
    return ndimage.map_coordinates(u, coords, order=1, mode="nearest").astype(u.dtype, copy=False)


def deformation_amount(t, rate: float = 3.0):
    """Normalised deformation progress: 0 at ``t = 0``, 1 at ``t = 1``."""
    t = np.asarray(t, dtype=np.float64)
    if rate == 0:
        return t
    return (1 - np.exp(-rate * t)) / (1 - np.exp(-rate))


def _poisson(p: np.ndarray, photons: float, rng, scale: float) -> np.ndarray:
    expected = photons * np.exp(-p.astype(np.float64) / scale)
    counts = np.maximum(rng.poisson(expected), 1)
    return (-np.log(counts / photons) * scale).astype(p.dtype)


def _background(shape, sigma: float, rng) -> np.ndarray:
    g = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    peak = np.abs(g).max()
    return g / peak if peak > 0 else g


def simulate_scan(
    u0: np.ndarray,
    displacement: np.ndarray | None,
    g: ScanGeometry,
    deformation_rate: float = 3.0,
    noise: NoiseSpec | None = None,
) -> np.ndarray:
    """Project the deforming object at each acquisition time.

    Projection ``i`` sees ``deform_volume(u0, displacement, amount(t_i))``.
    Noise, when requested, uses per-angle generators seeded with
    ``(noise.seed, i)`` so the result does not depend on evaluation order.
    """
    n = u0.shape[-1]
    projector = get_projector("direct", g, n)
    static = displacement is None or not np.any(displacement)
    if static:
        d = projector.forward(u0)
    else:
        amounts = deformation_amount(g.time_stamps, deformation_rate)
        d = np.empty((g.n_angles_total, u0.shape[0], n), dtype=projector_dtype(u0))
        for i, amount in enumerate(amounts):
            d[i] = projector.forward_angle(deform_volume(u0, displacement, float(amount)), i)
    if noise is None:
        return d
    scale = float(np.abs(d).max()) or 1.0
    out = np.empty_like(d)
    sigma = noise.background_sigma if noise.background_sigma is not None else d.shape[-1] / 4
    for i in range(d.shape[0]):
        rng = np.random.default_rng([noise.seed, i])
        p = d[i]
        if noise.poisson_photons is not None:
            p = _poisson(p, noise.poisson_photons, rng, scale)
        if noise.background_amplitude:
            p = p + (noise.background_amplitude * scale * _background(p.shape, sigma, rng)).astype(p.dtype)
        out[i] = p
    return out


def projector_dtype(u: np.ndarray):
    return np.float32 if u.dtype == np.float32 else np.float64
