"""Command-line interface: ``deformtomo <subcommand> ...``.

Exit codes: 0 success, 2 argument error, 3 I/O error, 4 numerical abort.
Errors go to stderr as ``deformtomo: error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .admm import NumericalAbort, SolverConfig, lcurve, lcurve_corner, reconstruct
from .analysis import error_report, fsc, plot_fsc, residual_report, write_fsc_csv
from .geometry import make_interlaced
from .io import DatasetError, array_checksum, load_dataset, save_dataset
from .optical_flow import FlowParams, prealign
from .phantom import (
    DeformationSpec,
    NoiseSpec,
    PhantomSpec,
    deform_volume,
    make_deformation_field,
    make_tube_phantom,
    simulate_scan,
)
from .projector import get_projector
from .warp import apply_flow, flow_color_image

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

PROG = "deformtomo"


class UsageError(Exception):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", message)
        raise SystemExit(EXIT_USAGE)


def _report(code: str, message: str):
    print(f"{PROG}: error[{code}]: {message}", file=sys.stderr)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _binning(text: str):
    if text == "auto":
        return "auto"
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'auto' or e.g. '4,2,1', got {text!r}") from exc


def _add_solver_flags(p: argparse.ArgumentParser):
    p.add_argument("--no-flow", action="store_true", help="disable deformation estimation")
    dense = p.add_mutually_exclusive_group()
    dense.add_argument("--dense", dest="dense", action="store_true", default=True, help="dense optical flow (default)")
    dense.add_argument("--shift-only", dest="dense", action="store_false", help="one global shift per projection")
    p.add_argument("--alpha", type=float, default=0.0, help="TV weight")
    p.add_argument("--admm-iters", type=int, default=32)
    p.add_argument("--inner-iters", type=int, default=4)
    p.add_argument("--binning", type=_binning, default="auto", help="'auto' or factors coarse to fine, e.g. 4,2,1")
    p.add_argument("--projector", choices=("direct", "fourier"), default="fourier")
    p.add_argument("--window-decrement", type=float, default=2.0)
    p.add_argument("--adjoint-warp", choices=("exact", "negated-flow"), default="exact")
    p.add_argument("--factor2-threshold", action="store_true", help="use the factor-2 soft-threshold variant")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--seed", type=int, default=0, help="recorded in provenance; the solver itself is deterministic")


def _solver_config(args) -> SolverConfig:
    try:
        return SolverConfig(
            n_admm=args.admm_iters,
            n_inner_cg=args.inner_iters,
            alpha=args.alpha,
            use_flow=not args.no_flow,
            dense_flow=args.dense,
            binning_levels=args.binning,
            window_decrement=args.window_decrement,
            projector=args.projector,
            adjoint_warp=args.adjoint_warp,
            soft_threshold_factor2=args.factor2_threshold,
            flow_params=FlowParams(dense=args.dense),
            dtype=args.dtype,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Joint tomography and projection deformation reconstruction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="limit numeric library threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a deforming tube phantom scan")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--angles", type=int, default=96, help="projections per rotation")
    p.add_argument("--rotations", type=int, default=2)
    p.add_argument("--max-disp", type=float, default=5.0, help="maximum displacement in voxels")
    p.add_argument("--rate", type=float, default=3.0, help="deformation rate of the exponential schedule")
    p.add_argument("--tubes", type=int, default=12)
    p.add_argument("--photons", type=float, default=None, help="Poisson photon count (default: noiseless)")
    p.add_argument("--background", type=float, default=None, help="low-frequency background amplitude")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("sim"), help="output directory")

    p = sub.add_parser("reconstruct", help="reconstruct a projection dataset")
    p.add_argument("data", type=Path)
    p.add_argument("--out", type=Path, default=Path("recon.json"), help="output volume manifest")
    p.add_argument("--log", type=Path, default=None, help="per-iteration CSV log")
    _add_solver_flags(p)

    p = sub.add_parser("prealign", help="rigidly align later rotations to the first one")
    p.add_argument("data", type=Path)
    p.add_argument("--out", type=Path, default=Path("aligned.json"))

    p = sub.add_parser("fsc", help="Fourier shell correlation of two volumes")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--shell-width", type=float, default=None)
    p.add_argument("--voxel-size", type=float, default=None, help="report the resolution in this unit")
    p.add_argument("--csv", type=Path, default=None)
    p.add_argument("--png", type=Path, default=None)

    p = sub.add_parser("report", help="error metrics of a reconstruction")
    p.add_argument("volume", type=Path)
    p.add_argument("reference", type=Path)
    p.add_argument("--data", type=Path, default=None, help="projection data for the residual report")
    p.add_argument("--flow", type=Path, default=None, help="flow to use for the residual report")
    p.add_argument("--projector", choices=("direct", "fourier"), default="fourier")

    p = sub.add_parser("lcurve", help="TV-weight sweep")
    p.add_argument("data", type=Path)
    p.add_argument("--alphas", type=_float_list, required=True)
    p.add_argument("--csv", type=Path, default=Path("lcurve.csv"))
    _add_solver_flags(p)

    p = sub.add_parser("slices", help="PNG orthogonal slices and flow colourisations")
    p.add_argument("volume", type=Path)
    p.add_argument("--out", type=Path, default=Path("slices"), help="output file prefix")
    p.add_argument("--flow", type=Path, default=None)
    p.add_argument("--flow-index", type=int, action="append", default=None)
    return parser


def _limit_threads(n: int | None):
    if n is None:
        return
    import cv2

    cv2.setNumThreads(n)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover - optional
        pass


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    n = args.n
    spec = PhantomSpec(n=n, n_tubes=args.tubes, seed=args.seed)
    dspec = DeformationSpec(max_displacement=args.max_disp, rate=args.rate, seed=args.seed + 1)
    noise = None
    if args.photons is not None or args.background is not None:
        noise = NoiseSpec(poisson_photons=args.photons, background_amplitude=args.background, seed=args.seed + 2)
    g = make_interlaced(args.angles, args.rotations, volume_n=n)
    u0 = make_tube_phantom(spec)
    disp = make_deformation_field(dspec, n)
    d = simulate_scan(u0, disp, g, args.rate, noise)
    final = deform_volume(u0, disp, 1.0)
    provenance = {
        "phantom": vars(spec) | {"radius_range": list(spec.radius_range), "intensity_range": list(spec.intensity_range)},
        "deformation": vars(dspec),
        "noise": None if noise is None else vars(noise),
        "seed": args.seed,
    }
    out = args.out
    manifests = {
        "data": save_dataset(out / "data.json", d, "stack", g, provenance),
        "truth_initial": save_dataset(out / "truth_initial.json", u0, "volume", g, provenance),
        "truth_final": save_dataset(out / "truth_final.json", final, "volume", g, provenance),
        "displacement": save_dataset(out / "displacement.json", disp, "displacement", g, provenance),
    }
    print(json.dumps({k: m.checksum for k, m in manifests.items()}, indent=2))
    return EXIT_OK


def _load_stack(path):
    d, m = load_dataset(path)
    if m.geometry is None:
        raise DatasetError(f"{path} has no scan geometry")
    return d, m


def cmd_reconstruct(args) -> int:
    cfg = _solver_config(args)
    d, m = _load_stack(args.data)
    u, flow, state = reconstruct(d, m.geometry, cfg, log_file=args.log)
    provenance = {
        "source": str(args.data),
        "source_checksum": m.checksum,
        "solver": cfg.to_dict(),
        "seed": args.seed,
        "lagrangian_history": [float(v) for v in state.lagrangian_history],
        "final_rho": [state.rho1, state.rho2],
    }
    out = args.out if args.out.suffix == ".json" else args.out.with_suffix(".json")
    vol = save_dataset(out, u, "volume", m.geometry, provenance)
    fl = save_dataset(out.with_name(out.stem + "_flow.json"), flow, "flow", m.geometry, {"source": str(args.data)})
    print(json.dumps({"volume": vol.checksum, "flow": fl.checksum}, indent=2))
    return EXIT_OK


def cmd_prealign(args) -> int:
    d, m = _load_stack(args.data)
    aligned, shifts = prealign(d, m.geometry)
    out = args.out if args.out.suffix == ".json" else args.out.with_suffix(".json")
    provenance = {"source": str(args.data), "source_checksum": m.checksum, "operation": "prealign"}
    save_dataset(out, aligned, "stack", m.geometry, provenance)
    save_dataset(out.with_name(out.stem + "_shifts.json"), shifts, "flow", m.geometry, provenance)
    return EXIT_OK


def cmd_fsc(args) -> int:
    a, _ = load_dataset(args.a)
    b, _ = load_dataset(args.b)
    try:
        curve = fsc(a, b, args.shell_width)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.csv:
        write_fsc_csv(curve, args.csv)
    if args.png:
        plot_fsc({"FSC": curve}, args.png, args.voxel_size)
    result = {"crossing_frequency": "none" if curve.crossing_frequency is None else curve.crossing_frequency}
    if args.voxel_size and curve.crossing_frequency:
        result["resolution"] = args.voxel_size / curve.crossing_frequency
    print(json.dumps(result))
    return EXIT_OK


def cmd_report(args) -> int:
    u, m = load_dataset(args.volume)
    ref, _ = load_dataset(args.reference)
    try:
        report = error_report(u, ref)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.data is not None:
        d, dm = _load_stack(args.data)
        flow = np.zeros(d.shape + (2,), np.float32)
        if args.flow is not None:
            flow, _ = load_dataset(args.flow)
        proj = get_projector(args.projector, dm.geometry, d.shape[-1])
        xu = proj.forward(u)
        res = residual_report(d, xu, flow, xu)
        report["residual"] = {k: v for k, v in res.items() if not k.startswith("per_angle")}
    print(json.dumps(report, indent=2, default=lambda v: "inf" if v == float("inf") else v))
    return EXIT_OK


def cmd_lcurve(args) -> int:
    cfg = _solver_config(args)
    d, m = _load_stack(args.data)
    try:
        points = lcurve(d, m.geometry, cfg, args.alphas)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    with open(args.csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "fidelity", "tv_norm"])
        w.writerows([[f"{a:.6g}", f"{f:.9g}", f"{t:.9g}"] for a, f, t in points])
    print(json.dumps({"corner_alpha": lcurve_corner(points)}))
    return EXIT_OK


def _gray_png(path, image):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lo, hi = np.percentile(image, [0.5, 99.5])
    if hi <= lo:
        hi = lo + 1
    plt.imsave(path, np.clip(image, lo, hi), cmap="gray", vmin=lo, vmax=hi)


def cmd_slices(args) -> int:
    import matplotlib.pyplot as plt

    u, _ = load_dataset(args.volume)
    if u.ndim != 3:
        raise UsageError(f"{args.volume} is not a volume")
    nz, ny, nx = u.shape
    prefix = str(args.out)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    _gray_png(f"{prefix}_xy.png", u[nz // 2])
    _gray_png(f"{prefix}_xz.png", u[:, ny // 2, :])
    _gray_png(f"{prefix}_yz.png", u[:, :, nx // 2])
    if args.flow is not None:
        f, _ = load_dataset(args.flow)
        indices = args.flow_index or [0, f.shape[0] // 2, f.shape[0] - 1]
        for i in indices:
            try:
                img = flow_color_image(f, i)
            except IndexError as exc:
                raise UsageError(str(exc)) from exc
            plt.imsave(f"{prefix}_flow_{i:04d}.png", img)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "prealign": cmd_prealign,
    "fsc": cmd_fsc,
    "report": cmd_report,
    "lcurve": cmd_lcurve,
    "slices": cmd_slices,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _limit_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _report("usage", str(exc))
        return EXIT_USAGE
    except DatasetError as exc:
        _report(exc.code, str(exc))
        return EXIT_IO
    except OSError as exc:
        _report("io", str(exc))
        return EXIT_IO
    except NumericalAbort as exc:
        _report("numerical", f"{exc} (variable={exc.variable}, iteration={exc.iteration})")
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
