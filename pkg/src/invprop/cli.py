"""Command line entry point: gen, train, rollout, tune-gains, compare.

Exit codes: 0 all safety checks passed, 1 a safety check failed,
2 bad arguments or config, 3 the run itself failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from .harness import figures
from .harness.config import EXPERIMENTS, build_config, load_config
from .harness.datasets import GENERATORS, Dataset
from .harness.experiment import compare, is_safe, run_experiment, run_tuning, write_rollout
from .invariance import MODES, run_invariant_rollout
from .node import ModelFormatError, load_model, select_params
from .numerics import IntegratorConfig
from .specs import spec_from_config
from .train import rollout_mse

EXIT_OK, EXIT_UNSAFE, EXIT_USAGE, EXIT_FAILED = 0, 1, 2, 3


def _config(args):
    if args.config:
        return load_config(args.config, args.set, args.experiment)
    return build_config(None, args.set, args.experiment)


def _report(metrics: dict, out) -> None:
    keys = ("mse", "sat_min", "qp_time_mean_us", "qp_infeasible_steps")
    print(" ".join(f"{k}={metrics[k]:.6g}" if isinstance(metrics[k], float) else f"{k}={metrics[k]}"
                   for k in keys))
    print(f"wrote {out}")


def cmd_gen(args) -> int:
    kwargs = {"seed": args.seed}
    if args.name == "spiral":
        kwargs["constrained"] = args.constrained
    ds = GENERATORS[args.name](**kwargs)
    ds.save(args.out)
    print(f"{args.name}: {len(ds.trajectories)} trajectories x {len(ds.t)} points -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg = cfg.model_copy(update={"output_dir": args.out})
    outcome = run_experiment(cfg)
    _report(outcome.metrics, outcome.out_dir)
    return EXIT_OK if outcome.safe else EXIT_UNSAFE


def cmd_tune(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg = cfg.model_copy(update={"output_dir": args.out})
    model = load_model(args.model).model if args.model else None
    outcome, gains = run_tuning(cfg, model)
    print("tuned gains: " + ", ".join(f"{g:.6g}" for g in gains))
    _report(outcome.metrics, outcome.out_dir)
    return EXIT_OK if outcome.safe else EXIT_UNSAFE


def cmd_rollout(args) -> int:
    loaded = load_model(args.model)
    model = loaded.model
    blocks = yaml.safe_load(Path(args.specs).read_text())
    if isinstance(blocks, dict):
        blocks = [blocks]
    specs = [s for b in blocks for s in spec_from_config(b)]
    dataset = Dataset.load(args.dataset) if args.dataset else None
    if args.x0:
        x0 = np.array([float(v) for v in args.x0.split(",")])
    elif dataset is not None:
        x0 = dataset.trajectories[0][0]
    else:
        raise ValueError("give --x0 or --dataset")
    horizon = args.horizon or (float(dataset.t[-1] - dataset.t[0]) if dataset else None)
    if horizon is None:
        raise ValueError("give --horizon or --dataset")
    integ = IntegratorConfig(args.scheme, args.dt, horizon)
    sel = None
    if args.ip_mode in ("linear-layer", "nonlinear-layer"):
        sel = loaded.selection if args.count is None and loaded.selection is not None else \
            select_params(model, args.layer, args.count or 6, seed=args.selection_seed)
    kwargs = {"eps": args.eps, "weights": args.weights} if args.ip_mode == "nonlinear-layer" else {}
    res = run_invariant_rollout(model, args.ip_mode, specs, x0, integ, sel=sel, **kwargs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rollout(out, res, specs)
    per_step = res.h.min(axis=1)
    metrics = {
        "mse": rollout_mse(res.trajectory.states, res.trajectory.t, dataset) if dataset else float("nan"),
        "sat_min": float(per_step.min()),
        "sat_mean": float(per_step.mean()),
        "qp_time_mean_us": float(res.qp_times_us.mean()) if res.diagnostics else 0.0,
        "qp_infeasible_steps": int(res.softened_steps),
        "seed": model.seed,
        "config_hash": None,
        "mode": args.ip_mode,
    }
    metrics["safe"] = is_safe(metrics, args.sat_tol)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    figures.plot_h(out / "h_vs_t.png", res.trajectory.t, res.h, [s.label for s in specs])
    if res.trajectory.states.shape[1] >= 2:
        figures.plot_phase(out / "phase.png", res.trajectory.states,
                           reference=dataset.trajectories[0] if dataset else None,
                           circles=[(tuple(b["center"]), b["radius"]) for b in blocks if b.get("type") == "circle"])
    _report(metrics, out)
    return EXIT_OK if metrics["safe"] else EXIT_UNSAFE


def cmd_compare(args) -> int:
    rows, table = compare(args.dirs, args.csv)
    print(table)
    return EXIT_OK


def _add_config_args(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--experiment", choices=EXPERIMENTS, help="preset to start from when the file has none")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set ip.count=20 (repeatable)")
    p.add_argument("--out", help="output directory (overrides output_dir)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="invprop", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="generate a dataset file (.npz)")
    p.add_argument("name", choices=sorted(GENERATORS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--constrained", action="store_true", help="spiral only: steer the data around the circles")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train, roll out with invariance and write a run directory")
    _add_config_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("tune-gains", help="tune class-K gains with the QP in the loop, then run")
    _add_config_args(p)
    p.add_argument("--model", help="skip training and start from this model file")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("rollout", help="roll out a saved model with an IP mode")
    p.add_argument("--model", required=True)
    p.add_argument("--ip-mode", choices=[m for m in MODES if m != "external-input"], default="linear-layer")
    p.add_argument("--specs", required=True, help="YAML list of spec blocks")
    p.add_argument("--dataset", help=".npz dataset for x0, horizon and MSE")
    p.add_argument("--x0", help="comma separated initial state")
    p.add_argument("--scheme", choices=["euler", "rk4"], default="rk4")
    p.add_argument("--dt", type=float, default=0.025)
    p.add_argument("--horizon", type=float)
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--count", type=int)
    p.add_argument("--selection-seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=10.0)
    p.add_argument("--weights", type=float, default=1.0)
    p.add_argument("--sat-tol", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("compare", help="metric table across run directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ValidationError, ValueError, ModelFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"run failed: {exc!r}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
