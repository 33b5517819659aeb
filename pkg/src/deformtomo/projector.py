"""Parallel-beam X-ray transform, its adjoint, and the discrete gradient.

Two projectors are provided:

``direct``
    Ray-driven line integrals. Every ray ``x cos(theta) + y sin(theta) = s``
    is sampled at unit steps with bilinear in-plane interpolation. The
    in-plane weights are identical for every z-slice, so they are stored once
    as a sparse matrix and the adjoint is its exact transpose.

``fourier``
    Fourier-slice projector: the 2D spectrum of each slice is evaluated on
    polar lines with a Kaiser-Bessel gridding kernel (oversampling 2,
    half-width 3) and transformed back along ``s``. The adjoint is built from
    the transposed steps, so the pair is adjoint to round-off.

Arrays are plain numpy arrays: a volume is ``(N_z, N, N)`` in ``(z, y, x)``
order, a projection stack is ``(N_theta, N_z, N_s)`` and a gradient field is
``(3, N_z, N, N)`` with components ``(d/dx, d/dy, d/dz)``.
"""

from __future__ import annotations

import threading
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
from scipy.special import i0

from .geometry import ScanGeometry

__all__ = [
    "DirectProjector",
    "FourierProjector",
    "get_projector",
    "xray_forward_direct",
    "xray_adjoint_direct",
    "xray_forward_fourier",
    "xray_adjoint_fourier",
    "grad",
    "div",
]

OVERSAMPLING = 2
KERNEL_HALF_WIDTH = 3


def _check_volume(u: np.ndarray, n: int, n_z: int | None = None):
    if u.ndim != 3 or u.shape[1:] != (n, n):
        raise ValueError(f"volume must have shape (N_z, {n}, {n}), got {u.shape}")
    if n_z and u.shape[0] != n_z:
        raise ValueError(f"volume has {u.shape[0]} slices, geometry expects {n_z}")


def _work_dtype(a: np.ndarray):
    return np.float32 if a.dtype == np.float32 else np.float64


class _SparseProjector:
    """Shared plumbing for projectors whose in-plane part is one sparse map."""

    n: int
    n_angles: int

    def __init__(self):
        self._lock = threading.Lock()
        self._mats: dict = {}

    def _matrix(self, dtype):
        with self._lock:
            if dtype not in self._mats:
                self._mats[dtype] = self._build().astype(dtype)
            return self._mats[dtype]

    def _matrix_t(self, dtype):
        mat = self._matrix(dtype)
        with self._lock:
            key = ("T", dtype)
            if key not in self._mats:
                self._mats[key] = mat.T.tocsr()
            return self._mats[key]

    def _build(self) -> sp.csr_matrix:  # pragma: no cover - abstract
        raise NotImplementedError


class DirectProjector(_SparseProjector):
    """Ray-driven projector with unit-step bilinear sampling."""

    def __init__(self, angles: np.ndarray, n: int):
        super().__init__()
        self.angles = np.asarray(angles, dtype=np.float64)
        self.n = int(n)
        self.n_angles = len(self.angles)

    def _build(self) -> sp.csr_matrix:
        n = self.n
        c = (n - 1) / 2.0
        # t samples share the parity of n so that axis-aligned rays hit voxel centres
        n_t = int(np.ceil(n * np.sqrt(2.0))) + 2
        if (n_t - n) % 2:
            n_t += 1
        t = np.arange(n_t) - (n_t - 1) / 2.0
        s = np.arange(n) - c
        rows, cols, vals = [], [], []
        ss, tt = np.meshgrid(s, t, indexing="ij")
        ray = np.broadcast_to(np.arange(n)[:, None], ss.shape)
        for a, theta in enumerate(self.angles):
            ct, st = np.cos(theta), np.sin(theta)
            x = ss * ct - tt * st + c
            y = ss * st + tt * ct + c
            # snap round-off so exact grid hits keep a single weight
            x = np.where(np.abs(x - np.round(x)) < 1e-9, np.round(x), x)
            y = np.where(np.abs(y - np.round(y)) < 1e-9, np.round(y), y)
            inside = (x > -1) & (x < n) & (y > -1) & (y < n)
            xi, yi, r = x[inside], y[inside], ray[inside]
            x0 = np.floor(xi).astype(np.int64)
            y0 = np.floor(yi).astype(np.int64)
            fx = xi - x0
            fy = yi - y0
            for dx, dy, w in (
                (0, 0, (1 - fx) * (1 - fy)),
                (1, 0, fx * (1 - fy)),
                (0, 1, (1 - fx) * fy),
                (1, 1, fx * fy),
            ):
                px, py = x0 + dx, y0 + dy
                ok = (px >= 0) & (px < n) & (py >= 0) & (py < n) & (w > 0)
                rows.append(a * n + r[ok])
                cols.append(py[ok] * n + px[ok])
                vals.append(w[ok])
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_angles * n, n * n),
        )
        return mat.tocsr()

    def forward(self, u: np.ndarray) -> np.ndarray:
        _check_volume(u, self.n)
        dtype = _work_dtype(u)
        n_z = u.shape[0]
        flat = np.ascontiguousarray(u.reshape(n_z, -1).T, dtype=dtype)
        out = self._matrix(dtype) @ flat
        return np.ascontiguousarray(out.reshape(self.n_angles, self.n, n_z).transpose(0, 2, 1))

    def forward_angle(self, u: np.ndarray, index: int) -> np.ndarray:
        """Projection ``(N_z, N_s)`` of ``u`` at the single angle ``index``."""
        _check_volume(u, self.n)
        dtype = _work_dtype(u)
        n_z = u.shape[0]
        rows = self._matrix(dtype)[index * self.n : (index + 1) * self.n]
        flat = np.ascontiguousarray(u.reshape(n_z, -1).T, dtype=dtype)
        return np.ascontiguousarray((rows @ flat).T)

    def adjoint(self, p: np.ndarray) -> np.ndarray:
        if p.ndim != 3 or p.shape[0] != self.n_angles or p.shape[2] != self.n:
            raise ValueError(
                f"projection stack must have shape ({self.n_angles}, N_z, {self.n}), got {p.shape}"
            )
        dtype = _work_dtype(p)
        n_z = p.shape[1]
        flat = np.ascontiguousarray(p.transpose(0, 2, 1).reshape(-1, n_z), dtype=dtype)
        out = self._matrix_t(dtype) @ flat
        return np.ascontiguousarray(out.T.reshape(n_z, self.n, self.n))


def kaiser_bessel(t: np.ndarray, half_width: float, beta: float) -> np.ndarray:
    """Kaiser-Bessel window on ``|t| <= half_width`` (zero outside)."""
    t = np.asarray(t, dtype=np.float64)
    arg = 1.0 - (t / half_width) ** 2
    out = np.zeros_like(t)
    m = arg >= 0
    out[m] = i0(beta * np.sqrt(arg[m])) / i0(beta)
    return out


def _kb_beta(half_width: float, sigma: float) -> float:
    width = 2.0 * half_width
    return float(np.pi * np.sqrt((width / sigma) ** 2 * (sigma - 0.5) ** 2 - 0.8))


def _kernel_transform(x: np.ndarray, half_width: float, beta: float, grid: int) -> np.ndarray:
    """``int phi(t) exp(2 pi i t x / grid) dt`` by Gauss-Legendre quadrature."""
    nodes, weights = np.polynomial.legendre.leggauss(256)
    t = nodes * half_width
    w = weights * half_width * kaiser_bessel(t, half_width, beta)
    return np.cos(2 * np.pi * np.outer(x, t) / grid) @ w


class FourierProjector(_SparseProjector):
    """Fourier-slice projector with Kaiser-Bessel gridding."""

    def __init__(
        self,
        angles: np.ndarray,
        n: int,
        oversampling: int = OVERSAMPLING,
        half_width: int = KERNEL_HALF_WIDTH,
    ):
        super().__init__()
        self.angles = np.asarray(angles, dtype=np.float64)
        self.n = int(n)
        self.n_angles = len(self.angles)
        self.grid = oversampling * self.n
        self.n_radial = 2 * self.n  # padded detector length, no wrap-around
        self.half_width = half_width
        self.beta = _kb_beta(half_width, oversampling)
        c = (self.n - 1) / 2.0
        x = np.arange(self.n) - c
        psi = _kernel_transform(x, half_width, self.beta, self.grid)
        self._deconv = 1.0 / np.outer(psi, psi)
        m = np.arange(self.grid)
        m = np.where(m >= self.grid // 2, m - self.grid, m)
        ph = np.exp(2j * np.pi * m * c / self.grid)
        self._grid_phase = np.outer(ph, ph)
        k = np.arange(self.n_radial // 2 + 1)
        self._radial_phase = np.exp(-2j * np.pi * k * c / self.n_radial)
        # adjoint of irfft: rfft / M with interior bins doubled
        w = np.full(k.size, 2.0 / self.n_radial)
        w[0] = w[-1] = 1.0 / self.n_radial
        self._irfft_adjoint_weight = w
        self._half_integer_centre = (self.n % 2) == 0

    def _build(self) -> sp.csr_matrix:
        g = self.grid
        hw = self.half_width
        k = np.arange(self.n_radial // 2 + 1)
        n_k = k.size
        offsets = np.arange(-hw + 1, hw + 1)
        rows, cols, vals = [], [], []
        row_base = np.arange(n_k)
        for a, theta in enumerate(self.angles):
            px = k * np.cos(theta) * g / self.n_radial
            py = k * np.sin(theta) * g / self.n_radial
            fx = np.floor(px).astype(np.int64)
            fy = np.floor(py).astype(np.int64)
            mx = fx[:, None] + offsets[None, :]
            my = fy[:, None] + offsets[None, :]
            wx = kaiser_bessel(px[:, None] - mx, hw, self.beta)
            wy = kaiser_bessel(py[:, None] - my, hw, self.beta)
            mxx = np.broadcast_to(mx[:, None, :], (n_k, offsets.size, offsets.size))
            myy = np.broadcast_to(my[:, :, None], (n_k, offsets.size, offsets.size))
            w = wy[:, :, None] * wx[:, None, :]
            # representative in [-g/2, g/2); each wrap across the period flips the
            # sign of the centring phase when the centre is half-integer
            qx = np.floor((mxx + g // 2) / g).astype(np.int64)
            qy = np.floor((myy + g // 2) / g).astype(np.int64)
            if self._half_integer_centre:
                w = w * np.where((qx + qy) % 2 == 0, 1.0, -1.0)
            col = np.mod(myy, g) * g + np.mod(mxx, g)
            row = np.broadcast_to((a * n_k + row_base)[:, None, None], w.shape)
            keep = w != 0
            rows.append(row[keep])
            cols.append(col[keep])
            vals.append(w[keep])
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_angles * n_k, g * g),
        )
        return mat.tocsr()

    def _factors(self, dtype):
        key = ("factors", dtype)
        with self._lock:
            if key not in self._mats:
                cdtype = np.complex64 if dtype == np.float32 else np.complex128
                self._mats[key] = (
                    self._deconv.astype(dtype),
                    self._grid_phase.astype(cdtype),
                    self._radial_phase.astype(cdtype),
                    (self._irfft_adjoint_weight * np.conj(self._radial_phase)).astype(cdtype),
                )
            return self._mats[key]

    def forward(self, u: np.ndarray) -> np.ndarray:
        _check_volume(u, self.n)
        dtype = _work_dtype(u)
        deconv, grid_phase, radial_phase, _ = self._factors(dtype)
        n_z = u.shape[0]
        g = self.grid
        spec = sfft.fft2(u.astype(dtype, copy=False) * deconv, s=(g, g))
        spec *= grid_phase
        flat = np.ascontiguousarray(spec.reshape(n_z, g * g).T)
        vals = self._matrix(dtype) @ flat.view(dtype)
        line = vals.view(spec.dtype).reshape(self.n_angles, -1, n_z).transpose(0, 2, 1)
        line = line * radial_phase
        out = sfft.irfft(line, n=self.n_radial, axis=-1)[..., : self.n]
        return np.ascontiguousarray(out, dtype=dtype)

    def adjoint(self, p: np.ndarray) -> np.ndarray:
        if p.ndim != 3 or p.shape[0] != self.n_angles or p.shape[2] != self.n:
            raise ValueError(
                f"projection stack must have shape ({self.n_angles}, N_z, {self.n}), got {p.shape}"
            )
        dtype = _work_dtype(p)
        deconv, grid_phase, _, line_weight = self._factors(dtype)
        n_z = p.shape[1]
        g = self.grid
        line = sfft.rfft(p.astype(dtype, copy=False), n=self.n_radial, axis=-1)
        line *= line_weight
        flat = np.ascontiguousarray(line.transpose(0, 2, 1).reshape(-1, n_z))
        vals = self._matrix_t(dtype) @ flat.view(dtype)
        spec = vals.view(line.dtype).T.reshape(n_z, g, g) * np.conj(grid_phase)
        # only the first n rows/columns of the inverse transform are kept
        img = sfft.ifft(spec, axis=1)[:, : self.n, :]
        img = sfft.ifft(img, axis=2)[:, :, : self.n]
        out = img.real * (g * g) * deconv
        return np.ascontiguousarray(out, dtype=dtype)


@lru_cache(maxsize=16)
def _cached(kind: str, angles_key: bytes, n: int):
    angles = np.frombuffer(angles_key, dtype=np.float64)
    if kind == "direct":
        return DirectProjector(angles, n)
    if kind == "fourier":
        return FourierProjector(angles, n)
    raise ValueError(f"unknown projector kind {kind!r}")


def get_projector(kind: str, g: ScanGeometry, n: int | None = None):
    """Cached projector for a geometry; ``n`` overrides ``g.volume_n``."""
    n = int(n or g.volume_n or g.detector_width)
    if n < 1:
        raise ValueError("geometry has no grid size")
    return _cached(kind, np.ascontiguousarray(g.angles, dtype=np.float64).tobytes(), n)


def _check_geometry(u: np.ndarray, g: ScanGeometry):
    n = g.volume_n or u.shape[-1]
    _check_volume(u, n, g.detector_height or None)


def xray_forward_direct(u: np.ndarray, g: ScanGeometry) -> np.ndarray:
    _check_geometry(u, g)
    return get_projector("direct", g, u.shape[-1]).forward(u)


def xray_adjoint_direct(p: np.ndarray, g: ScanGeometry) -> np.ndarray:
    return get_projector("direct", g, p.shape[-1]).adjoint(p)


def xray_forward_fourier(u: np.ndarray, g: ScanGeometry) -> np.ndarray:
    _check_geometry(u, g)
    return get_projector("fourier", g, u.shape[-1]).forward(u)


def xray_adjoint_fourier(p: np.ndarray, g: ScanGeometry) -> np.ndarray:
    return get_projector("fourier", g, p.shape[-1]).adjoint(p)


def grad(u: np.ndarray) -> np.ndarray:
    """Forward differences along x, y, z; the last difference on each axis is 0."""
    out = np.zeros((3,) + u.shape, dtype=u.dtype)
    out[0, :, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    out[1, :, :-1, :] = u[:, 1:, :] - u[:, :-1, :]
    out[2, :-1, :, :] = u[1:, :, :] - u[:-1, :, :]
    return out


def _backward_diff(w: np.ndarray, axis: int) -> np.ndarray:
    w = np.moveaxis(w, axis, 0)
    out = np.empty_like(w)
    if w.shape[0] == 1:
        out[...] = 0
        return np.moveaxis(out, 0, axis)
    out[0] = w[0]
    out[1:-1] = w[1:-1] - w[:-2]
    out[-1] = -w[-2]
    return np.moveaxis(out, 0, axis)


def div(w: np.ndarray) -> np.ndarray:
    """Divergence, the negative adjoint of :func:`grad`."""
    if w.ndim != 4 or w.shape[0] != 3:
        raise ValueError(f"vector field must have shape (3, N_z, N, N), got {w.shape}")
    return _backward_diff(w[0], 2) + _backward_diff(w[1], 1) + _backward_diff(w[2], 0)
