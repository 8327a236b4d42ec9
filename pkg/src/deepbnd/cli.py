"""Command line entry point: ``deepbnd <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline


def _config(args) -> dict:
    over = {}
    if args.seed is not None:
        s = args.seed
        over["datasets"] = {"train": {"seed": s}, "validation": {"seed": s + 1},
                            "test": {"seed": s + 2}}
        over["train"] = {"seed": s}
    return pipeline.load_config(args.config, over)


def cmd_sample(args):
    cfg = _config(args)
    ws = Path(args.workspace)
    pipeline.write_json(ws / "config.json", cfg)
    for use, s in pipeline.stage_samples(cfg, ws).items():
        print(f"{use}: {s.shape[0]} x {s.shape[1]} samples (seed {s.seed})")


def cmd_snapshots(args):
    cfg = _config(args)
    pipeline.stage_snapshots(cfg, Path(args.workspace), args.workers)


def cmd_pod(args):
    cfg = _config(args)
    for name, b in pipeline.stage_pod(cfg, Path(args.workspace)).items():
        print(f"{name}: {b.n_rb} modes, leading eigenvalues {np.array2string(b.eigenvalues[:4], precision=3)}")


def cmd_train(args):
    cfg = _config(args)
    ws = Path(args.workspace)
    pipeline.stage_train(cfg, ws)
    print(pipeline.stage_bundle(cfg, ws))


def cmd_offline(args):
    cfg = _config(args)
    print(pipeline.run_offline(cfg, args.workspace, args.workers))


def cmd_predict(args):
    from . import fem
    from .micro import Microstructure
    from .model import predict_bc

    dbm = pipeline.load_bundle(args.model or args.workspace)
    m = Microstructure.load(args.micro)
    if m.config.n_side != dbm.lattice.n_side:
        raise ValueError("microstructure lattice size differs from the model's")
    w = predict_bc(dbm, m.radii, args.strain)
    fem.save_field(args.out, w, dbm.bd.mesh_hash, "ccw-bl-interleaved")
    print(f"wrote {len(w)} boundary values to {Path(args.out).with_suffix('.bin')}")


def cmd_fe2(args):
    from . import fem, macro

    cfg = _config(args)
    lat, geom = pipeline.lattice_of(cfg), pipeline.geometry_of(cfg)
    dbm = pipeline.load_bundle(args.model) if args.model else None
    provider = macro.TangentProvider(args.bc, geom, dbm)
    seed = args.seed if args.seed is not None else 11
    if args.macro == "cook":
        prob = macro.cook_problem(args.divisions)
        n = prob.mesh.cells.shape[0]
        assign = macro.random_draw_assignment(macro.random_draw_pool(lat, n, seed), n, seed)
    else:
        ny = args.ny
        bar = macro.BarMicrostructure.sample(4 * ny, ny, seed, lat.gamma)
        md = args.macro_divisions
        prob = macro.bar_problem((4 * ny * md, ny * md))
        assign = macro.sliding_window_assignment(bar, prob.mesh, lat)
    sol = macro.fe2(prob, assign, provider, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fem.save_field(out / "u", sol.u, sol.mesh.mesh_hash)
    rows = macro.solution_summary(sol, prob.probes, args.bc)
    (out / "report.csv").write_text(macro.rows_to_csv(rows))
    print(macro.rows_to_csv(rows), end="")


def cmd_dns(args):
    from . import fem, macro

    cfg = _config(args)
    seed = args.seed if args.seed is not None else 5
    bar = macro.BarMicrostructure.sample(4 * args.ny, args.ny, seed, cfg["lattice"]["gamma"])
    sol = macro.dns(bar, args.divisions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fem.save_field(out / "u", sol.u, sol.mesh.mesh_hash)
    rows = macro.solution_summary(sol, macro.BAR_PROBES, "dns")
    (out / "report.csv").write_text(macro.rows_to_csv(rows))
    print(macro.rows_to_csv(rows), end="")


def cmd_report(args):
    from .macro import rows_to_csv

    cfg = _config(args)
    for name, rows in pipeline.run_online(cfg, args.workspace, args.workers).items():
        print(f"# {name}")
        print(rows_to_csv(rows), end="")


def cmd_validate(args):
    rep = pipeline.validate_artifacts(args.workspace)
    for line in rep.lines():
        print(line)
    return 0 if rep.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepbnd", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration (JSON)")
    common.add_argument("--workspace", default=".", help="artifact root directory")
    common.add_argument("--seed", type=int, help="base seed overriding the configuration")
    common.add_argument("--workers", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("sample", parents=[common], help="draw LHS parameter sets").set_defaults(fn=cmd_sample)
    sub.add_parser("snapshots", parents=[common], help="HF goal-trace datasets").set_defaults(fn=cmd_snapshots)
    sub.add_parser("pod", parents=[common], help="reduced bases").set_defaults(fn=cmd_pod)
    sub.add_parser("train", parents=[common], help="train networks, write bundle").set_defaults(fn=cmd_train)
    sub.add_parser("offline", parents=[common], help="all offline stages").set_defaults(fn=cmd_offline)

    sp = sub.add_parser("predict", parents=[common], help="predict a boundary trace")
    sp.add_argument("--model", help="bundle.json or workspace (default: --workspace)")
    sp.add_argument("--micro", required=True, help="microstructure JSON")
    sp.add_argument("--strain", type=float, nargs=3, required=True, metavar=("E11", "E22", "G12"))
    sp.add_argument("--out", required=True, help="output path (writes .bin and .json)")
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("fe2", parents=[common], help="two-scale solve")
    sp.add_argument("--macro", choices=["cook", "bar"], required=True)
    sp.add_argument("--bc", choices=["taylor", "linear", "periodic", "minimal", "hf", "deepbnd"],
                    required=True)
    sp.add_argument("--model", help="bundle for --bc deepbnd")
    sp.add_argument("--out", required=True)
    sp.add_argument("--divisions", type=int, default=8, help="Cook macro mesh divisions")
    sp.add_argument("--macro-divisions", type=int, default=4, help="bar macro cells per block")
    sp.add_argument("--ny", type=int, default=4, help="bar blocks across the height")
    sp.set_defaults(fn=cmd_fe2)

    sp = sub.add_parser("dns", parents=[common], help="resolved clamped-bar reference")
    sp.add_argument("--ny", type=int, default=4)
    sp.add_argument("--divisions", type=int, default=15, help="mesh divisions per block")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_dns)

    sub.add_parser("report", parents=[common], help="online experiments and reports").set_defaults(fn=cmd_report)
    sub.add_parser("validate", parents=[common], help="check artifacts").set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        rc = args.fn(args)
    except Exception as exc:   # report and fail; the traceback is shown with -v
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
