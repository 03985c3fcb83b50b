"""Command-line interface.

Subcommands: mesh / solve / sif / converge / validate. Exit codes: 0 on
success, 1 validation, 2 meshing, 3 solving, 4 I/O.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from qtsbfem import analysis
from qtsbfem.assembly import AssemblyError
from qtsbfem.geometry import GeometryError
from qtsbfem.mesher import MeshingError

EXIT_VALIDATION = 1
EXIT_MESHING = 2
EXIT_SOLVING = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qtsbfem",
        description="2D stress and fracture analysis on quadtree polygon meshes",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("mesh", "generate the mesh only"),
        ("solve", "run the full analysis"),
        ("sif", "run the analysis and report stress intensity factors"),
        ("converge", "run a convergence sweep"),
        ("validate", "validate a configuration file"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="JSON configuration file")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for cell solves")
        p.add_argument(
            "--no-cache",
            action="store_true",
            help="disable the master-cell stiffness cache",
        )
        if name == "converge":
            p.add_argument(
                "--sweep",
                required=True,
                help="orders=2,3,4 or seeds=1,2,4",
            )
    return parser


def _load_case(path: str) -> analysis.AnalysisCase:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        print(f"error [io]: cannot read {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_IO)
    try:
        return analysis.parse_config(text)
    except analysis.ConfigError as exc:
        print(f"error [validation]: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _run(case, args, mesh_only=False):
    try:
        return analysis.run_pipeline(
            case,
            out_dir=args.out,
            mesh_only=mesh_only,
            no_cache=args.no_cache,
            threads=args.threads,
        )
    except analysis.PipelineError as exc:
        code = {
            "validation": EXIT_VALIDATION,
            "meshing": EXIT_MESHING,
            "assembly": EXIT_SOLVING,
            "solving": EXIT_SOLVING,
        }.get(exc.stage, EXIT_SOLVING)
        print(f"error {exc}", file=sys.stderr)
        raise SystemExit(code)
    except (GeometryError, MeshingError) as exc:
        print(f"error [meshing]: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_MESHING)
    except AssemblyError as exc:
        print(f"error [solving]: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_SOLVING)
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_IO)


def _print_report(report) -> None:
    print(
        f"cells: {report.cells_total} total, {report.cells_computed} computed, "
        f"{report.cells_cached} cached ({report.distinct_master_keys} master keys, "
        f"{report.irregular_cells} irregular)"
    )
    print(f"nodes: {report.nodes}  dofs: {report.dofs}")
    if "solve" in report.stage_seconds:
        print(
            f"solver residual: {report.solver_residual:.3e}  "
            f"equilibrium: {report.equilibrium_residual:.3e}"
        )
    for stage, secs in report.stage_seconds.items():
        print(f"  {stage}: {secs:.3f} s")
    for name in report.artifacts:
        print(f"wrote {name}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    case = _load_case(args.config)
    if args.command == "validate":
        print("configuration is valid")
        return 0
    if args.command == "mesh":
        result = _run(case, args, mesh_only=True)
        _print_report(result.report)
        return 0
    if args.command in ("solve", "sif"):
        result = _run(case, args)
        _print_report(result.report)
        if args.command == "sif":
            if not result.sifs:
                print("no crack tips in this analysis")
            for t in result.sifs:
                print(
                    f"tip ({t.tip[0]:.9g}, {t.tip[1]:.9g}): "
                    f"K_I = {t.k1:.9g}  K_II = {t.k2:.9g}  L_A = {t.length_a:.9g}"
                )
        return 0
    if args.command == "converge":
        kind, _, values = args.sweep.partition("=")
        try:
            nums = [int(x) for x in values.split(",") if x]
        except ValueError:
            print("error [validation]: --sweep expects orders=... or seeds=...", file=sys.stderr)
            return EXIT_VALIDATION
        if kind == "orders":
            table = analysis.convergence_driver(case, orders=nums, threads=args.threads)
        elif kind == "seeds":
            table = analysis.convergence_driver(case, seed_multipliers=nums, threads=args.threads)
        else:
            print("error [validation]: --sweep expects orders=... or seeds=...", file=sys.stderr)
            return EXIT_VALIDATION
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "convergence.csv", "w") as fp:
            table.write_csv(fp)
        for row in table.rows:
            print(f"{row.label}: dofs={row.dofs} error={row.error:.6e}")
        if table.slope is not None:
            print(f"fitted slope: {table.slope:.4f}")
        print("wrote convergence.csv")
        return 0
    return 0


if __name__ == "__main__":
    sys.exit(main())
