"""Training by backpropagation through the unrolled fixed-step solver, gain tuning, evaluation.

Reverse-mode gradients come from torch (float64, CPU); the model itself stays
a numpy ``MlpOde`` and is copied in and out of torch around each run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .harness.datasets import Dataset
from .invariance import InfeasibleIP, RolloutResult, run_invariant_rollout
from .node import MlpOde, ParamSelection
from .numerics import IntegratorConfig, StepError, integrate_step
from .specs import Specification

log = logging.getLogger(__name__)

_TORCH_ACT = {
    "identity": lambda s: s,
    "tanh": torch.tanh,
    "tanhshrink": torch.nn.functional.tanhshrink,
    "gelu": torch.nn.functional.gelu,
}


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, checkpoint: MlpOde):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 20
    seq_len: int = 10
    lr: float = 1e-3
    optimizer: str = "rmsprop"
    iters_per_epoch: int = 1
    scheme: str = "rk4"
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.seq_len < 1 or self.iters_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and batch/sequence/iteration counts positive")
        if self.optimizer != "rmsprop":
            raise ValueError("only the rmsprop optimizer is supported")


@dataclass
class LossRecord:
    epoch: int
    train_loss: float
    val_mse: float = float("nan")
    val_sat: float = float("nan")


@dataclass
class TrainResult:
    model: MlpOde
    curve: list[LossRecord] = field(default_factory=list)


class TorchField(torch.nn.Module):
    """Differentiable mirror of an ``MlpOde``."""

    def __init__(self, model: MlpOde):
        super().__init__()
        self.weights = torch.nn.ParameterList(
            [torch.nn.Parameter(torch.tensor(w, dtype=torch.float64)) for w in model.weights]
        )
        self.biases = torch.nn.ParameterList(
            [torch.nn.Parameter(torch.tensor(b, dtype=torch.float64)) for b in model.biases]
        )
        self.activations = list(model.activations)
        self.cubic_lift = model.cubic_lift

    def forward(self, x):
        z = x**3 if self.cubic_lift else x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = _TORCH_ACT[act](z @ w.T + b)
        return z

    def export(self, template: MlpOde) -> MlpOde:
        m = template.copy()
        m.weights = [w.detach().numpy().copy() for w in self.weights]
        m.biases = [b.detach().numpy().copy() for b in self.biases]
        return m


def torch_step(fn, x, dt: float, scheme: str):
    if scheme == "euler":
        return x + dt * fn(x)
    k1 = fn(x)
    k2 = fn(x + 0.5 * dt * k1)
    k3 = fn(x + 0.5 * dt * k2)
    k4 = fn(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _windows(dataset: Dataset, seq_len: int):
    """All (trajectory, start) pairs with seq_len steps of targets after the start."""
    n = dataset.t.shape[0]
    if n <= seq_len:
        raise ValueError("trajectory shorter than the training sequence length")
    return [(i, s) for i in range(len(dataset.trajectories)) for s in range(n - seq_len)]


def _batch(dataset: Dataset, picks, seq_len: int):
    x0 = np.stack([dataset.trajectories[i][s] for i, s in picks])
    target = np.stack([dataset.trajectories[i][s + 1: s + 1 + seq_len] for i, s in picks])
    return torch.tensor(x0), torch.tensor(target)


def window_loss(net: TorchField, x0, target, dt: float, scheme: str):
    """Mean squared error of unrolled predictions against the window targets."""
    x = x0
    preds = []
    for _ in range(target.shape[1]):
        x = torch_step(net, x, dt, scheme)
        preds.append(x)
    pred = torch.stack(preds, dim=1)
    return torch.mean((pred - target) ** 2)


def window_loss_grad(model: MlpOde, dataset: Dataset, picks, seq_len: int, scheme: str = "rk4"):
    """Windowed MSE and its gradient w.r.t. every weight and bias (list per tensor)."""
    net = TorchField(model)
    x0, target = _batch(dataset, picks, seq_len)
    loss = window_loss(net, x0, target, dataset.dt, scheme)
    loss.backward()
    grads_w = [p.grad.numpy().copy() for p in net.weights]
    grads_b = [p.grad.numpy().copy() for p in net.biases]
    return loss.item(), grads_w, grads_b


def window_loss_numpy(model: MlpOde, dataset: Dataset, picks, seq_len: int, scheme: str = "rk4") -> float:
    """Same windowed MSE computed with the numpy integrator (gradient-check oracle path)."""
    total, count = 0.0, 0
    for i, s in picks:
        x = dataset.trajectories[i][s]
        for k in range(seq_len):
            x = integrate_step(model.forward, x, dataset.dt, scheme)
            diff = x - dataset.trajectories[i][s + 1 + k]
            total += float(diff @ diff)
            count += diff.shape[0]
    return total / count


def rollout_mse(states: np.ndarray, t_model: np.ndarray, dataset: Dataset, index: int = 0) -> float:
    """MSE of a rollout against trajectory ``index``, sampled at the data times."""
    ref = dataset.trajectories[index]
    pred = np.stack([np.interp(dataset.t, t_model, states[:, j]) for j in range(states.shape[1])], axis=1)
    return float(np.mean((pred - ref) ** 2))


def train_node(
    model: MlpOde,
    dataset: Dataset,
    cfg: TrainConfig,
    specs: Sequence[Specification] = (),
    callback: Callable[[LossRecord], None] | None = None,
) -> TrainResult:
    """RMSprop on windowed trajectory MSE, unrolling the configured scheme.

    ``epochs * iters_per_epoch`` minibatches of ``batch_size`` windows, drawn
    with a seeded numpy generator so runs are bit-reproducible.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = TorchField(model)
    opt = torch.optim.RMSprop(net.parameters(), lr=cfg.lr)
    windows = _windows(dataset, cfg.seq_len)
    curve: list[LossRecord] = []
    last_good = model.copy()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(cfg.iters_per_epoch):
            idx = np.sort(rng.choice(len(windows), size=min(cfg.batch_size, len(windows)), replace=False))
            x0, target = _batch(dataset, [windows[i] for i in idx], cfg.seq_len)
            opt.zero_grad()
            loss = window_loss(net, x0, target, dataset.dt, cfg.scheme)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, last_good)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        rec = LossRecord(epoch, float(np.mean(losses)))
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            current = net.export(model)
            rec.val_mse, rec.val_sat = _plain_metrics(current, dataset, specs, cfg.scheme)
            if np.isfinite(rec.val_mse):
                last_good = current
            log.info("epoch %d loss %.5f val_mse %.5f", epoch, rec.train_loss, rec.val_mse)
        curve.append(rec)
        if callback:
            callback(rec)
    return TrainResult(net.export(model) if cfg.epochs else model.copy(), curve)


def _plain_metrics(model: MlpOde, dataset: Dataset, specs, scheme: str):
    cfg = IntegratorConfig(scheme, dataset.dt, float(dataset.t[-1] - dataset.t[0]))
    try:
        res = run_invariant_rollout(model, "none", specs, dataset.trajectories[0][0], cfg)
    except StepError:
        return float("nan"), float("nan")
    sat = res.sat_min if specs else float("nan")
    return rollout_mse(res.trajectory.states, res.trajectory.t, dataset), sat


def evaluate(
    model,
    dataset: Dataset,
    specs: Sequence[Specification],
    mode: str,
    integ: IntegratorConfig,
    sel: ParamSelection | None = None,
    x0=None,
    **ip_kwargs,
) -> tuple[dict, RolloutResult]:
    """Roll out once and score it: MSE against trajectory 0, min/mean h, QP timing."""
    x0 = dataset.trajectories[0][0] if x0 is None else x0
    res = run_invariant_rollout(model, mode, specs, x0, integ, sel=sel, **ip_kwargs)
    per_step_min = res.h.min(axis=1) if res.h.size else np.zeros(0)
    metrics = {
        "mse": rollout_mse(res.trajectory.states, res.trajectory.t, dataset),
        "sat_min": float(per_step_min.min()) if per_step_min.size else float("nan"),
        "sat_mean": float(per_step_min.mean()) if per_step_min.size else float("nan"),
        "qp_time_mean_us": float(res.qp_times_us.mean()) if res.diagnostics else 0.0,
        "qp_infeasible_steps": int(res.softened_steps),
    }
    return metrics, res


@dataclass
class GainTuneConfig:
    fd_step: float = 1e-2
    deviation_weight: float = 0.1
    max_iter: int = 20
    min_gain: float = 1e-3
    rel_tol: float = 1e-3
    alternations: int = 1


def projected_fd_descent(
    objective: Callable[[np.ndarray], float],
    x0,
    fd_step: float = 1e-2,
    lower: float = 1e-3,
    max_iter: int = 20,
    rel_tol: float = 1e-3,
):
    """Minimize over positive vectors with central relative-step FD gradients.

    Each iteration takes a backtracking step along the negative gradient,
    scaled so no coordinate moves by more than half its value, then
    projects onto x >= lower. Non-finite objective values count as +inf.
    Returns (x_best, f_best, history).
    """
    x = np.maximum(np.asarray(x0, dtype=float), lower)

    def J(v):
        val = objective(v)
        return float(val) if np.isfinite(val) else np.inf

    fx = J(x)
    history = [(x.copy(), fx)]
    for _ in range(max_iter):
        grad = np.zeros_like(x)
        for i in range(x.size):
            h = fd_step * x[i]
            e = np.zeros_like(x)
            e[i] = h
            lo = np.maximum(x - e, lower)
            hi = x + e
            grad[i] = (J(hi) - J(lo)) / (hi[i] - lo[i])
        if not np.all(np.isfinite(grad)) or not np.any(grad):
            break
        scale = np.max(np.abs(grad) / x)
        step = 0.5 / scale
        improved = False
        for _ in range(12):
            cand = np.maximum(x - step * grad, lower)
            fc = J(cand)
            if fc < fx:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        rel = np.max(np.abs(cand - x) / x)
        x, fx = cand, fc
        history.append((x.copy(), fx))
        if rel < rel_tol:
            break
    return x, fx, history


def tune_gains(
    model: MlpOde,
    specs: Sequence[Specification],
    dataset: Dataset,
    mode: str,
    sel: ParamSelection,
    integ: IntegratorConfig,
    gains0: Sequence[float],
    cfg: GainTuneConfig = GainTuneConfig(),
    sat_tol: float = 1e-3,
    **ip_kwargs,
):
    """Tune the shared class-K gains with the invariance QP in the loop.

    J(k) = MSE(enforced rollout, data) + lambda * mean_t ||theta_t - theta_anchor||^2.
    Rollouts that fail or end below ``-sat_tol`` score +inf, so the tuner
    never trades safety for fit. Returns (gains, J, history).
    """

    def objective(gains):
        ss = [s.with_gains(gains) for s in specs]
        try:
            metrics, res = evaluate(model, dataset, ss, mode, integ, sel, **ip_kwargs)
        except (StepError, InfeasibleIP):
            return np.inf
        if metrics["sat_min"] < -sat_tol:
            return np.inf
        dev = np.mean([d.deviation**2 for d in res.diagnostics]) if res.diagnostics else 0.0
        return metrics["mse"] + cfg.deviation_weight * dev

    return projected_fd_descent(objective, gains0, cfg.fd_step, cfg.min_gain, cfg.max_iter, cfg.rel_tol)
