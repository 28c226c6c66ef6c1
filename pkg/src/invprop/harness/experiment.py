"""Run directories: train, roll out with invariance, write metrics, CSVs and figures."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from ..invariance import ExternalInputIP, RolloutResult, run_invariant_rollout
from ..node import ExternalInputMlp, MlpOde, save_model, select_params
from ..numerics import IntegratorConfig, integrate_with_hook
from ..specs import Specification, box_specs, spec_from_config
from ..train import TrainResult, rollout_mse, train_node, tune_gains
from . import figures
from .config import ExperimentConfig
from .datasets import GENERATORS, Dataset

log = logging.getLogger(__name__)

METRIC_KEYS = ("mse", "sat_min", "sat_mean", "qp_time_mean_us", "qp_infeasible_steps", "seed", "config_hash")
FLOAT_FMT = "%.17g"


def write_csv(path, header: Sequence[str], rows) -> Path:
    """Comma-separated with a header line; %.17g round-trips float64 exactly."""
    rows = np.asarray(rows, dtype=float).reshape(-1, len(header))
    np.savetxt(path, rows, fmt=FLOAT_FMT, delimiter=",", header=",".join(header), comments="")
    return Path(path)


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.experiment == "inputdemo":
        raise ValueError("the input demo builds its reference from the raw input stream")
    return GENERATORS[cfg.experiment](seed=cfg.seed, **cfg.dataset)


def build_specs(cfg: ExperimentConfig, dataset: Dataset | None = None) -> list[Specification]:
    specs: list[Specification] = []
    for block in cfg.specs:
        block = dict(block)
        if cfg.ip.gains is not None:
            block["gains"] = list(cfg.ip.gains)
        if block.get("type") == "box" and block.pop("from_dataset", False):
            if dataset is None or "lower" not in dataset.provenance:
                raise ValueError("box specs from_dataset need a dataset with recorded bounds")
            specs += box_specs(dataset.provenance["lower"], dataset.provenance["upper"], block.get("gains", []))
        else:
            specs += spec_from_config(block)
    return specs


def circles_of(cfg: ExperimentConfig):
    return [(tuple(b["center"]), b["radius"]) for b in cfg.specs if b.get("type") == "circle"]


def initial_state(cfg: ExperimentConfig, dataset: Dataset | None) -> np.ndarray:
    r = cfg.rollout
    if r.x0 is not None:
        return np.asarray(r.x0, dtype=float)
    if r.corner_seed is not None:
        lo = np.asarray(dataset.provenance["lower"])
        hi = np.asarray(dataset.provenance["upper"])
        signs = np.random.default_rng(r.corner_seed).choice([-1, 1], size=lo.shape[0])
        centre = 0.5 * (lo + hi)
        return centre + r.corner_scale * (np.where(signs > 0, hi, lo) - centre)
    return np.asarray(dataset.trajectories[0][0], dtype=float)


def build_model(cfg: ExperimentConfig) -> MlpOde:
    m = cfg.model
    return MlpOde.init(m.dims, m.activations, seed=cfg.seed, cubic_lift=m.cubic_lift)


def _selection(cfg: ExperimentConfig, model: MlpOde):
    if cfg.ip.mode in ("none", "external-input"):
        return None
    return select_params(model, cfg.ip.layer, cfg.ip.count, seed=cfg.ip.selection_seed)


def _ip_kwargs(cfg: ExperimentConfig) -> dict:
    if cfg.ip.mode == "nonlinear-layer":
        return {"eps": cfg.ip.eps, "weights": cfg.ip.weights}
    return {}


@dataclass
class RunOutcome:
    out_dir: Path
    metrics: dict
    result: RolloutResult
    baseline: RolloutResult | None
    safe: bool


def _diag_rows(res: RolloutResult, n_specs: int):
    header = ["step", "t", "solve_us", "deviation", "max_slack", "softened", "optimal"]
    header += [f"h{j}" for j in range(n_specs)]
    header += [f"psi_pre{j}" for j in range(n_specs)] + [f"psi_post{j}" for j in range(n_specs)]
    rows = []
    for d in res.diagnostics:
        rows.append([d.step, d.t, d.solve_us, d.deviation, d.max_slack, float(d.softened),
                     float(d.status == "optimal"), *d.h, *d.psi_pre, *d.psi_post])
    return header, rows


def write_rollout(out: Path, res: RolloutResult, specs: Sequence[Specification]) -> None:
    traj = res.trajectory
    n = traj.states.shape[1]
    write_csv(out / "trajectory.csv", ["t"] + [f"x{j}" for j in range(n)],
              np.column_stack([traj.t, traj.states]))
    write_csv(out / "h_vs_t.csv", ["t"] + [f"h{j}" for j in range(len(specs))],
              np.column_stack([traj.t, res.h]))
    header, rows = _diag_rows(res, len(specs))
    write_csv(out / "diagnostics.csv", header, rows)


def write_loss_curve(out: Path, train: TrainResult) -> None:
    write_csv(out / "loss_curve.csv", ["epoch", "train_loss", "val_mse", "val_sat"],
              [[r.epoch, r.train_loss, r.val_mse, r.val_sat] for r in train.curve])


def score(res: RolloutResult, mse: float, cfg: ExperimentConfig) -> dict:
    per_step = res.h.min(axis=1) if res.h.size else np.zeros(0)
    return {
        "mse": float(mse),
        "sat_min": float(per_step.min()) if per_step.size else float("nan"),
        "sat_mean": float(per_step.mean()) if per_step.size else float("nan"),
        "qp_time_mean_us": float(res.qp_times_us.mean()) if res.diagnostics else 0.0,
        "qp_infeasible_steps": int(res.softened_steps),
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
    }


def is_safe(metrics: dict, tol: float) -> bool:
    s = metrics["sat_min"]
    return bool(np.isnan(s) or s >= -tol)


def rollout_and_score(cfg, model, specs, dataset, x0=None, mode=None):
    """One rollout from ``x0`` for Sat. and one from the data start for MSE (same if equal)."""
    mode = mode or cfg.ip.mode
    span = float(dataset.t[-1] - dataset.t[0])
    integ = cfg.integrator_config(span)
    sel = _selection(cfg, model)
    x_data = dataset.trajectories[0][0]
    x0 = x_data if x0 is None else np.asarray(x0, dtype=float)
    res = run_invariant_rollout(model, mode, specs, x0, integ, sel=sel, **_ip_kwargs(cfg))
    if np.array_equal(x0, x_data):
        fit = res
    else:
        fit = run_invariant_rollout(model, mode, specs, x_data, integ, sel=sel, **_ip_kwargs(cfg))
    return res, rollout_mse(fit.trajectory.states, fit.trajectory.t, dataset)


def _input_demo(cfg: ExperimentConfig):
    """Input-affine field x' = f(x) + I with a weak random drift and a circular raw input."""
    f_head = build_model(cfg)
    for w in f_head.weights:
        w *= 0.1
    n = f_head.n_out
    hid = cfg.model.dims[1]
    g_head = MlpOde([np.zeros((hid, n)), np.zeros((n * n, hid))],
                    [np.zeros(hid), np.eye(n).reshape(-1)], ["tanh", "identity"])
    model = ExternalInputMlp(f_head, g_head, n)

    def raw(step, t, x):
        v = np.zeros(n)
        v[0], v[1] = -np.sin(t), np.cos(t)
        return v

    return model, raw


def _run_input_demo(cfg: ExperimentConfig, out: Path) -> RunOutcome:
    model, raw = _input_demo(cfg)
    specs = build_specs(cfg)
    x0 = initial_state(cfg, None)
    integ = cfg.integrator_config(cfg.integrator.horizon or 10.0)

    def roll(active):
        eng = ExternalInputIP(model, specs if active else [], raw)
        traj = integrate_with_hook(eng.field, x0, integ, eng.hook)
        h = np.array([[s.h(x) for s in specs] for x in traj.states])
        return RolloutResult(traj, h, list(eng.diagnostics) if active else [], eng)

    base = roll(False)
    res = roll(cfg.ip.mode != "none")
    mse = float(np.mean((res.trajectory.states - base.trajectory.states) ** 2))
    save_model(out / "model.json", model.f_head, class_k_gains=specs[0].gains if specs else None)
    save_model(out / "model_input_matrix.json", model.g_head)
    write_rollout(out, res, specs)
    write_csv(out / "loss_curve.csv", ["epoch", "train_loss", "val_mse", "val_sat"], [])
    metrics = score(res, mse, cfg)
    figures.plot_phase(out / "phase.png", res.trajectory.states, baseline=base.trajectory.states,
                       circles=circles_of(cfg), title="input demo")
    figures.plot_h(out / "h_vs_t.png", res.trajectory.t, res.h, [s.label for s in specs],
                   baseline=(base.trajectory.t, base.h))
    return RunOutcome(out, metrics, res, base, is_safe(metrics, cfg.sat_tol))


def run_experiment(cfg: ExperimentConfig, model: MlpOde | None = None, out_dir=None) -> RunOutcome:
    """Everything for one config, written into its own directory.

    A failure leaves whatever was written plus a FAILED file with the traceback.
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))
    try:
        if cfg.experiment == "inputdemo":
            outcome = _run_input_demo(cfg, out)
        else:
            outcome = _run_standard(cfg, out, model)
    except Exception:
        (out / "FAILED").write_text(traceback.format_exc())
        raise
    metrics = dict(outcome.metrics, experiment=cfg.experiment, mode=cfg.ip.mode, safe=outcome.safe)
    if cfg.experiment == "boxsynth":
        metrics["data"] = "SYNTHETIC"
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    outcome.metrics = metrics
    return outcome


def _run_standard(cfg: ExperimentConfig, out: Path, model: MlpOde | None) -> RunOutcome:
    dataset = make_dataset(cfg)
    dataset.save(out / "dataset.npz")
    specs = build_specs(cfg, dataset)
    if model is None:
        trained = train_node(build_model(cfg), dataset, cfg.train_config(), specs)
        model = trained.model
        write_loss_curve(out, trained)
        figures.plot_loss(out / "loss_curve.png", trained.curve)
    sel = _selection(cfg, model)
    save_model(out / "model.json", model, selection=sel, class_k_gains=specs[0].gains if specs else None)
    x0 = initial_state(cfg, dataset)
    res, mse = rollout_and_score(cfg, model, specs, dataset, x0)
    write_rollout(out, res, specs)
    metrics = score(res, mse, cfg)
    baseline = None
    if cfg.ip.mode != "none":
        baseline, base_mse = rollout_and_score(cfg, model, specs, dataset, x0, mode="none")
        write_csv(out / "h_vs_t_plain.csv", ["t"] + [f"h{j}" for j in range(len(specs))],
                  np.column_stack([baseline.trajectory.t, baseline.h]))
        write_csv(out / "trajectory_plain.csv",
                  ["t"] + [f"x{j}" for j in range(baseline.trajectory.states.shape[1])],
                  np.column_stack([baseline.trajectory.t, baseline.trajectory.states]))
        metrics["plain_mse"] = base_mse
        metrics["plain_sat_min"] = float(baseline.h.min()) if baseline.h.size else float("nan")
    figures.plot_phase(
        out / "phase.png", res.trajectory.states, reference=dataset.trajectories[0],
        baseline=None if baseline is None else baseline.trajectory.states,
        circles=circles_of(cfg), title=f"{cfg.experiment}, {cfg.ip.mode}",
    )
    figures.plot_h(out / "h_vs_t.png", res.trajectory.t, res.h, [s.label for s in specs],
                   baseline=None if baseline is None else (baseline.trajectory.t, baseline.h))
    return RunOutcome(out, metrics, res, baseline, is_safe(metrics, cfg.sat_tol))


def run_tuning(cfg: ExperimentConfig, model: MlpOde | None = None, out_dir=None):
    """Train (unless given a model), tune the shared gains, then run with the tuned gains."""
    dataset = make_dataset(cfg)
    specs = build_specs(cfg, dataset)
    if model is None:
        model = train_node(build_model(cfg), dataset, cfg.train_config(), specs).model
    gains0 = specs[0].gains
    integ = cfg.integrator_config(float(dataset.t[-1] - dataset.t[0]))
    gains, J, history = tune_gains(model, specs, dataset, cfg.ip.mode, _selection(cfg, model), integ,
                                   gains0, cfg.tune_config(), cfg.sat_tol, **_ip_kwargs(cfg))
    tuned = cfg.model_copy(update={"ip": cfg.ip.model_copy(update={"gains": [float(g) for g in gains]})})
    outcome = run_experiment(tuned, model=model, out_dir=out_dir)
    (outcome.out_dir / "gains.json").write_text(json.dumps({
        "initial": list(map(float, gains0)), "tuned": list(map(float, gains)), "objective": float(J),
        "history": [{"gains": list(map(float, g)), "objective": float(f)} for g, f in history],
    }, indent=2))
    return outcome, gains


def compare(run_dirs: Sequence, out_csv=None) -> tuple[list[dict], str]:
    """One row per run directory; a FAILED marker or missing metrics flag the row."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        row = {"run": d.name, "status": "ok", "sat_min": "", "mse": "", "qp_time_mean_us": ""}
        if (d / "FAILED").exists():
            row["status"] = "FAILED"
        try:
            m = json.loads((d / "metrics.json").read_text())
            for k in ("sat_min", "mse", "qp_time_mean_us"):
                row[k] = m[k]
        except (OSError, ValueError, KeyError):
            if row["status"] == "ok":
                row["status"] = "INCOMPLETE"
        rows.append(row)
    cols = ["run", "status", "sat_min", "mse", "qp_time_mean_us"]

    def fmt(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(fmt(r[c]) for c in cols) + " |" for r in rows]
    table = "\n".join(lines)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
    return rows, table
