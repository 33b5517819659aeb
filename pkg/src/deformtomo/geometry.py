"""Scan protocols: projection angles, acquisition order and time stamps.

Grid conventions shared by every operator in the package:

* volumes are stored ``(z, y, x)``, projection stacks ``(angle, z, s)``;
* voxel/pixel centres sit on integer indices, the rotation axis passes
  through ``((N - 1) / 2, (N - 1) / 2)`` in the ``(x, y)`` plane and the
  detector coordinate ``s`` is centred at ``(N_s - 1) / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ScanGeometry", "make_interlaced", "make_sequential"]

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class ScanGeometry:
    """Parallel-beam scan with one or more (interlaced) sample rotations.

    ``angles`` and ``time_stamps`` are in acquisition order. Detector sizes
    default to the cubic volume size.
    """

    n_rotations: int
    n_per_rotation: int
    angles: np.ndarray
    time_stamps: np.ndarray
    volume_n: int = 0
    detector_width: int = 0
    detector_height: int = 0
    range_per_rotation: float = TWO_PI

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=np.float64)
        times = np.asarray(self.time_stamps, dtype=np.float64)
        angles.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "time_stamps", times)
        if self.n_rotations < 1 or self.n_per_rotation < 1:
            raise ValueError("rotation and per-rotation counts must be >= 1")
        if angles.shape != (self.n_rotations * self.n_per_rotation,):
            raise ValueError(
                f"expected {self.n_rotations * self.n_per_rotation} angles, "
                f"got {angles.shape[0]}"
            )
        if times.shape != angles.shape:
            raise ValueError("time_stamps must match angles in length")
        if np.any(angles < 0) or np.any(angles >= TWO_PI):
            raise ValueError("angles must lie in [0, 2*pi)")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("time_stamps must be strictly increasing")
        if self.volume_n and not self.detector_width:
            object.__setattr__(self, "detector_width", self.volume_n)
        if self.volume_n and not self.detector_height:
            object.__setattr__(self, "detector_height", self.volume_n)

    @property
    def n_angles_total(self) -> int:
        return int(self.angles.shape[0])

    @property
    def rotation_index(self) -> np.ndarray:
        """Rotation number of every acquisition index."""
        return np.arange(self.n_angles_total) // self.n_per_rotation

    def with_size(self, n: int, height: int | None = None) -> "ScanGeometry":
        """Same angles on a different grid (used by the binning levels)."""
        return ScanGeometry(
            n_rotations=self.n_rotations,
            n_per_rotation=self.n_per_rotation,
            angles=self.angles,
            time_stamps=self.time_stamps,
            volume_n=n,
            detector_width=n,
            detector_height=n if height is None else height,
            range_per_rotation=self.range_per_rotation,
        )

    def subset(self, index) -> "ScanGeometry":
        """Geometry restricted to a subset of acquisition indices.

        The result is treated as a single sequential rotation; used for
        half-set reconstructions.
        """
        index = np.asarray(index)
        angles = self.angles[index]
        times = self.time_stamps[index]
        return ScanGeometry(
            n_rotations=1,
            n_per_rotation=len(angles),
            angles=angles,
            time_stamps=times,
            volume_n=self.volume_n,
            detector_width=self.detector_width,
            detector_height=self.detector_height,
            range_per_rotation=self.range_per_rotation,
        )

    def to_dict(self) -> dict:
        return {
            "n_rotations": self.n_rotations,
            "n_per_rotation": self.n_per_rotation,
            "range_per_rotation": self.range_per_rotation,
            "angles": self.angles.tolist(),
            "time_stamps": self.time_stamps.tolist(),
            "volume_n": self.volume_n,
            "detector_width": self.detector_width,
            "detector_height": self.detector_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(
            n_rotations=int(d["n_rotations"]),
            n_per_rotation=int(d["n_per_rotation"]),
            angles=np.asarray(d["angles"], dtype=np.float64),
            time_stamps=np.asarray(d["time_stamps"], dtype=np.float64),
            volume_n=int(d.get("volume_n", 0)),
            detector_width=int(d.get("detector_width", 0)),
            detector_height=int(d.get("detector_height", 0)),
            range_per_rotation=float(d.get("range_per_rotation", TWO_PI)),
        )


def _time_stamps(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.arange(n) / (n - 1)


def make_interlaced(
    n_per_rotation: int,
    n_rotations: int,
    range_per_rotation: float = TWO_PI,
    volume_n: int = 0,
    detector_height: int = 0,
) -> ScanGeometry:
    """Interlaced scan: rotation ``r`` is offset by ``r / R`` of the step.

    The angle of projection ``j`` within rotation ``r`` is
    ``j * step + r * step / R`` with ``step = range_per_rotation / n_per_rotation``,
    so the union of all rotations is a uniform grid ``R`` times finer than
    any single rotation.

    >>> g = make_interlaced(2, 2, np.pi)
    >>> np.round(g.angles / np.pi, 3).tolist()
    [0.0, 0.5, 0.25, 0.75]
    """
    if n_per_rotation < 1 or n_rotations < 1:
        raise ValueError("n_per_rotation and n_rotations must be >= 1")
    if not range_per_rotation > 0:
        raise ValueError("range_per_rotation must be positive")
    step = range_per_rotation / n_per_rotation
    r, j = np.divmod(np.arange(n_per_rotation * n_rotations), n_per_rotation)
    angles = np.mod(j * step + r * step / n_rotations, TWO_PI)
    return ScanGeometry(
        n_rotations=n_rotations,
        n_per_rotation=n_per_rotation,
        angles=angles,
        time_stamps=_time_stamps(angles.size),
        volume_n=volume_n,
        detector_height=detector_height,
        range_per_rotation=float(range_per_rotation),
    )


def make_sequential(
    n_angles: int, angular_range: float = np.pi, volume_n: int = 0, detector_height: int = 0
) -> ScanGeometry:
    """Single rotation with ``n_angles`` uniformly spaced angles."""
    if n_angles < 1:
        raise ValueError("n_angles must be >= 1")
    return make_interlaced(n_angles, 1, angular_range, volume_n, detector_height)
