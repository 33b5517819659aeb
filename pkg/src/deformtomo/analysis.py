"""Resolution and error metrics for reconstructions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .warp import apply_flow

__all__ = [
    "FscCurve",
    "fsc",
    "half_bit_threshold",
    "error_report",
    "residual_report",
    "write_fsc_csv",
    "plot_fsc",
]


@dataclass
class FscCurve:
    shell_radii: np.ndarray  # cycles/voxel
    correlation: np.ndarray
    half_bit_threshold: np.ndarray
    shell_counts: np.ndarray
    crossing_frequency: float | None

    def to_rows(self):
        return list(
            zip(
                self.shell_radii.tolist(),
                self.correlation.tolist(),
                self.half_bit_threshold.tolist(),
                self.shell_counts.tolist(),
            )
        )


def half_bit_threshold(n_voxels) -> np.ndarray:
    """1/2-bit information threshold for shells of ``n_voxels`` Fourier voxels."""
    root = np.sqrt(np.asarray(n_voxels, dtype=np.float64))
    return (0.2071 + 1.9102 / root) / (1.2071 + 0.9102 / root)


def fsc(a: np.ndarray, b: np.ndarray, shell_width: float | None = None) -> FscCurve:
    """Fourier shell correlation of two volumes up to the Nyquist frequency.

    Shells are ``shell_width`` cycles/voxel thick (default one frequency bin
    of the largest axis). The crossing frequency is the first shell beyond
    the origin whose correlation falls below the half-bit threshold.
    """
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    fa = np.fft.fftn(a.astype(np.float64))
    fb = np.fft.fftn(b.astype(np.float64))
    freqs = np.meshgrid(*[np.fft.fftfreq(n) for n in a.shape], indexing="ij")
    radius = np.sqrt(sum(f**2 for f in freqs))
    width = shell_width if shell_width is not None else 1.0 / max(a.shape)
    if not width > 0:
        raise ValueError("shell_width must be positive")
    shell = np.rint(radius / width).astype(np.int64).ravel()
    n_shells = int(np.floor(0.5 / width)) + 1
    keep = shell < n_shells
    shell = shell[keep]
    prod = (fa * np.conj(fb)).ravel()[keep]
    cross = np.bincount(shell, prod.real, minlength=n_shells) + 1j * np.bincount(shell, prod.imag, minlength=n_shells)
    pa = np.bincount(shell, (np.abs(fa) ** 2).ravel()[keep], minlength=n_shells)
    pb = np.bincount(shell, (np.abs(fb) ** 2).ravel()[keep], minlength=n_shells)
    counts = np.bincount(shell, minlength=n_shells)
    denom = np.sqrt(pa * pb)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, np.abs(cross) / denom, 0.0)
    threshold = half_bit_threshold(np.maximum(counts, 1))
    radii = np.arange(n_shells) * width
    below = np.flatnonzero((corr < threshold) & (np.arange(n_shells) > 0))
    crossing = float(radii[below[0]]) if below.size else None
    return FscCurve(radii, corr, threshold, counts, crossing)


def error_report(u: np.ndarray, reference: np.ndarray) -> dict:
    """Relative L2 error, RMSE, PSNR (peak = max |reference|) and max abs error.

    PSNR is ``inf`` for identical volumes.
    """
    if u.shape != reference.shape:
        raise ValueError(f"volume shapes differ: {u.shape} vs {reference.shape}")
    ref = reference.astype(np.float64)
    diff = u.astype(np.float64) - ref
    ref_norm = np.linalg.norm(ref)
    if ref_norm == 0:
        raise ValueError("reference volume has zero norm")
    rmse = float(np.sqrt(np.mean(diff**2)))
    peak = float(np.abs(ref).max())
    psnr = math.inf if rmse == 0 else float(20 * np.log10(peak / rmse))
    return {
        "rel_l2": float(np.linalg.norm(diff) / ref_norm),
        "rmse": rmse,
        "psnr": psnr,
        "max_abs": float(np.abs(diff).max()),
    }


def residual_report(d: np.ndarray, state_or_psi1, flow: np.ndarray | None = None, xu: np.ndarray | None = None) -> dict:
    """Misalignment before and after applying the recovered flow.

    Pass either a solver state (its ψ₁, flow and 𝒳u are rescaled to the units
    of ``d``) or ``psi1`` and ``flow`` arrays directly, with ``xu`` optional
    for the consensus residual ``‖𝒳u − ψ₁‖``. The alignment gain is
    ``‖d − ψ₁‖ / ‖d − D_f ψ₁‖``.
    """
    if hasattr(state_or_psi1, "psi1"):
        s = state_or_psi1
        psi1 = s.psi1.astype(np.float64) * s.data_scale
        flow = s.flow
        xu = s.projection().astype(np.float64) * s.data_scale
    else:
        psi1 = np.asarray(state_or_psi1, dtype=np.float64)
        if flow is None:
            flow = np.zeros(psi1.shape + (2,), np.float32)
    if d.shape != psi1.shape or flow.shape[:3] != d.shape:
        raise ValueError("data, re-projection and flow shapes disagree")
    d64 = d.astype(np.float64)
    before = d64 - psi1
    after = d64 - apply_flow(psi1.astype(np.float64), flow)
    per_before = np.sqrt((before**2).sum(axis=(1, 2)))
    per_after = np.sqrt((after**2).sum(axis=(1, 2)))
    total_before = float(np.linalg.norm(before))
    total_after = float(np.linalg.norm(after))
    report = {
        "misalignment": total_before,
        "fidelity": total_after,
        "alignment_gain": total_before / total_after if total_after > 0 else math.inf,
        "per_angle_misalignment": per_before.tolist(),
        "per_angle_fidelity": per_after.tolist(),
    }
    if xu is not None:
        report["consensus"] = float(np.linalg.norm(xu.astype(np.float64) - psi1))
    return report


def write_fsc_csv(curve: FscCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency", "correlation", "half_bit_threshold", "shell_voxels"])
        for r, c, t, n in curve.to_rows():
            w.writerow([f"{r:.6g}", f"{c:.9g}", f"{t:.9g}", n])


def plot_fsc(curves: dict, path, voxel_size: float | None = None) -> None:
    """Plot correlation curves (``label -> FscCurve``) with the half-bit threshold.

    With ``voxel_size`` the crossing is also annotated as a resolution in the
    voxel-size unit (``voxel_size / frequency``).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    threshold = None
    for label, curve in curves.items():
        text = label
        if curve.crossing_frequency is not None:
            text += f" ({curve.crossing_frequency:.3f}"
            if voxel_size:
                text += f", {voxel_size / curve.crossing_frequency:.3g}"
            text += ")"
        ax.plot(curve.shell_radii, curve.correlation, label=text)
        threshold = curve
    if threshold is not None:
        ax.plot(threshold.shell_radii, threshold.half_bit_threshold, "k--", label="1/2-bit")
    ax.set_xlabel("spatial frequency (cycles/voxel)")
    ax.set_ylabel("FSC")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
