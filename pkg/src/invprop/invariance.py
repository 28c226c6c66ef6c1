"""Invariance propagation engines and the per-step QP rollout loop.

Three ways to keep h(x(t)) >= 0 along a neural ODE rollout:

* ``LinearLayerIP`` moves selected output-layer weights. The barrier
  condition dh/dx f + a1(h) >= 0 is linear in them, so each step solves
  min ||theta - theta_anchor||^2 subject to one row per spec.
* ``NonlinearLayerIP`` gives selected weights of any layer the dynamics
  theta' = A theta + B u and constrains u through a second-order barrier
  chain. Soft CLF rows pull theta back to its anchor.
* ``ExternalInputIP`` corrects an input stream of an input-affine model,
  min ||I - I_raw||^2 under the first-order condition.

One QP runs before every integration step and its result is held fixed for
the whole step (all four RK4 stages see the same weights or inputs).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .node import AffineSplit, ExternalInputMlp, MlpOde, ParamSelection
from .numerics import IntegratorConfig, Trajectory, integrate_with_hook
from .qp import OPTIMAL, ActiveSetQP, QpProblem, QpSolution
from .specs import Specification

MODES = ("none", "linear-layer", "nonlinear-layer", "external-input")
SOFT_WEIGHT = 1e6


class InfeasibleIP(RuntimeError):
    """Even the softened QP has no solution."""


@dataclass
class IpStepDiagnostics:
    step: int
    t: float
    h: np.ndarray
    psi_pre: np.ndarray
    psi_post: np.ndarray
    status: str
    solve_us: float
    deviation: float
    max_slack: float = 0.0
    softened: bool = False


@dataclass
class AuxiliarySystem:
    """theta' = A theta + B u on the selected parameters, anchored at ``anchor``."""

    theta: np.ndarray
    anchor: np.ndarray
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    eps: np.ndarray | float = 10.0
    weights: np.ndarray | float = 1.0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        self.anchor = np.array(self.anchor, dtype=float)
        d = self.theta.shape[0]
        if self.anchor.shape != (d,):
            raise ValueError("anchor must match theta")
        self.A = np.zeros((d, d)) if self.A is None else np.asarray(self.A, dtype=float)
        self.B = np.eye(d) if self.B is None else np.asarray(self.B, dtype=float)
        self.eps = np.broadcast_to(np.asarray(self.eps, dtype=float), (d,)).copy()
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (d,)).copy()
        if np.any(self.eps <= 0) or np.any(self.weights <= 0):
            raise ValueError("CLF rates and slack weights must be positive")
        if self.A.shape != (d, d) or self.B.shape != (d, d):
            raise ValueError("A and B must be d x d")
        if not self.controllable():
            raise ValueError("(A, B) is not controllable")

    @property
    def d(self) -> int:
        return self.theta.shape[0]

    def controllable(self) -> bool:
        blocks, M = [], self.B
        for _ in range(self.d):
            blocks.append(M)
            if np.linalg.matrix_rank(np.hstack(blocks)) == self.d:
                return True
            M = self.A @ M
        return np.linalg.matrix_rank(np.hstack(blocks)) == self.d

    def rate(self, u) -> np.ndarray:
        return self.A @ self.theta + self.B @ u

    def advance(self, u, dt: float) -> None:
        """Explicit Euler on the auxiliary dynamics (exact for A = 0)."""
        self.theta = self.theta + dt * self.rate(u)

    def lyapunov(self) -> np.ndarray:
        return (self.theta - self.anchor) ** 2


def psi_direct(model: MlpOde, spec: Specification, x) -> float:
    """dh/dx f(x) + alpha_1(h(x)) evaluated straight from the field."""
    return float(spec.grad(x) @ model.forward(x) + spec.alpha(1)(spec.h(x)))


psi1 = psi_direct


def linear_constraint_row(
    model: MlpOde, sel: ParamSelection, spec: Specification, x, split: AffineSplit | None = None
):
    """(a, c) with Psi(theta_p | x) = a . theta_p + c."""
    split = split or model.affine_output_decomposition(x, sel)
    dh = spec.grad(x)
    return dh @ split.basis, float(dh @ split.constant + spec.alpha(1)(spec.h(x)))


def nonlinear_constraint_row(
    model: MlpOde, sel: ParamSelection, spec: Specification, x, aux: AuxiliarySystem, cache=None
):
    """(coef, c) with psi_2(x, u) = coef . u + c for theta' = A theta + B u.

    psi_2 = f'(d2h) f + dh J_theta (A theta + B u) + (dh J_x + a1' dh) f + a2(psi_1)
    """
    f, Jx, Jt = cache if cache is not None else model.jacobian_theta_and_x(x, sel)
    dh = spec.grad(x)
    a1, a2 = spec.alpha(1), spec.alpha(2)
    p1 = float(dh @ f + a1(spec.h(x)))
    lgh = dh @ Jt
    coef = lgh @ aux.B
    c = float(f @ spec.hess(x) @ f + lgh @ (aux.A @ aux.theta) + dh @ (Jx @ f)
              + a1.derivative() * (dh @ f) + a2(p1))
    return coef, c


def clf_rows(aux: AuxiliarySystem):
    """CLF rows over z = (u, delta): 2e_j (A_j theta + B_j u) + eps_j e_j^2 - delta_j <= 0.

    Returned as (G, g) with G z <= g.
    """
    d = aux.d
    e = aux.theta - aux.anchor
    G = np.zeros((d, 2 * d))
    G[:, :d] = 2.0 * e[:, None] * aux.B
    G[:, d:] = -np.eye(d)
    g = -(2.0 * e * (aux.A @ aux.theta) + aux.eps * e**2)
    return G, g


def _soften(p: QpProblem, n_hard: int) -> QpProblem:
    """Append one shared slack s >= 0 relaxing the first ``n_hard`` rows."""
    n, m = p.n, p.m
    H = np.zeros((n + 1, n + 1))
    H[:n, :n] = p.H
    H[n, n] = 2.0 * SOFT_WEIGHT
    G = np.zeros((m + 1, n + 1))
    G[:m, :n] = p.G
    G[:n_hard, n] = -1.0
    G[m, n] = -1.0
    return QpProblem(H, np.append(p.f, 0.0), G, np.append(p.g, 0.0))


def _solve_with_fallback(solver: ActiveSetQP, p: QpProblem, n_hard: int):
    t0 = time.perf_counter_ns()
    sol = solver.solve(p)
    softened = False
    if sol.status != OPTIMAL:
        softened = True
        soft = ActiveSetQP(warm_start=False).solve(_soften(p, n_hard))
        if soft.status != OPTIMAL:
            raise InfeasibleIP("softened invariance QP is infeasible")
        sol = QpSolution(soft.u[:-1], soft.lam[:-1], [i for i in soft.active_set if i < p.m], "softened",
                         soft.iterations)
        solver.reset()
    return sol, (time.perf_counter_ns() - t0) / 1e3, softened


def solve_linear_ip(
    model: MlpOde,
    sel: ParamSelection,
    specs: Sequence[Specification],
    x,
    anchor,
    solver: ActiveSetQP | None = None,
):
    """theta* = argmin ||theta - anchor||^2 s.t. Psi_s(theta | x) >= 0 for every spec.

    Returns (theta*, rows, solution, solve_us, softened); rows is (a, c) stacked.
    """
    solver = solver or ActiveSetQP(warm_start=False)
    anchor = np.asarray(anchor, dtype=float)
    d = anchor.shape[0]
    split = model.affine_output_decomposition(x, sel)
    rows = [linear_constraint_row(model, sel, s, x, split) for s in specs]
    a = np.array([r[0] for r in rows]).reshape(len(specs), d)
    c = np.array([r[1] for r in rows])
    p = QpProblem(2.0 * np.eye(d), -2.0 * anchor, -a, c)
    sol, us, softened = _solve_with_fallback(solver, p, len(specs))
    return sol.u, (a, c), sol, us, softened


def solve_nonlinear_ip(
    aux: AuxiliarySystem, spec_rows: Sequence, solver: ActiveSetQP | None = None
):
    """(u*, delta*) = argmin ||u||^2 + sum w_j delta_j^2 s.t. spec rows (hard) and CLF rows (soft).

    ``spec_rows`` is a sequence of (coef, c) meaning coef . u + c >= 0.
    Returns (u*, delta*, solution, solve_us, softened).
    """
    solver = solver or ActiveSetQP(warm_start=False)
    d = aux.d
    H = np.diag(np.concatenate([2.0 * np.ones(d), 2.0 * aux.weights]))
    Gc, gc = clf_rows(aux)
    Gs = np.zeros((len(spec_rows), 2 * d))
    gs = np.zeros(len(spec_rows))
    for i, (coef, c) in enumerate(spec_rows):
        Gs[i, :d] = -np.asarray(coef)
        gs[i] = c
    p = QpProblem(H, np.zeros(2 * d), np.vstack([Gs, Gc]), np.concatenate([gs, gc]))
    sol, us, softened = _solve_with_fallback(solver, p, len(spec_rows))
    return sol.u[:d], sol.u[d:], sol, us, softened


def input_ip_affine(
    model: ExternalInputMlp,
    specs: Sequence[Specification],
    x,
    raw_input,
    solver: ActiveSetQP | None = None,
):
    """I* = argmin ||I - I_raw||^2 s.t. dh (f + g I) + a1(h) >= 0 per spec.

    Returns (I*, solution, solve_us, softened).
    """
    solver = solver or ActiveSetQP(warm_start=False)
    raw = np.asarray(raw_input, dtype=float)
    k = raw.shape[0]
    fx = model.drift(x)
    gx = model.input_matrix(x)
    G = np.zeros((len(specs), k))
    g = np.zeros(len(specs))
    for i, s in enumerate(specs):
        dh = s.grad(x)
        G[i] = -(dh @ gx)
        g[i] = dh @ fx + s.alpha(1)(s.h(x))
    p = QpProblem(2.0 * np.eye(k), -2.0 * raw, G, g)
    sol, us, softened = _solve_with_fallback(solver, p, len(specs))
    return sol.u, sol, us, softened


def check_output_controllable(jac_theta: np.ndarray, what: str = "selection") -> bool:
    """Every output must be movable through the selected parameters."""
    ok = np.linalg.matrix_rank(jac_theta) == jac_theta.shape[0]
    if not ok:
        warnings.warn(f"{what} cannot move every output (rank-deficient Jacobian)", stacklevel=3)
    return ok


class LinearLayerIP:
    """Per-step minimum-deviation QP on output-layer weights."""

    mode = "linear-layer"

    def __init__(self, model: MlpOde, sel: ParamSelection, specs: Sequence[Specification],
                 warm_start: bool = True):
        if sel.layer != model.n_layers - 1:
            raise ValueError("linear-layer IP needs an output-layer selection")
        self.model = model
        self.sel = sel
        self.specs = list(specs)
        self.anchor = model.get_params(sel)
        self.solver = ActiveSetQP(warm_start=warm_start)
        self.diagnostics: list[IpStepDiagnostics] = []
        self.theta_history: list[np.ndarray] = []

    def field(self, x):
        return self.model.forward(x)

    def check_selection(self, x0) -> bool:
        return check_output_controllable(self.model.jacobian_theta(x0, self.sel), "output-layer selection")

    def hook(self, step: int, t: float, x: np.ndarray):
        theta, (a, c), sol, us, soft = solve_linear_ip(
            self.model, self.sel, self.specs, x, self.anchor, self.solver
        )
        theta_prev = self.model.get_params(self.sel)
        self.model.set_params(self.sel, theta)
        self.theta_history.append(theta.copy())
        diag = IpStepDiagnostics(
            step=step,
            t=t,
            h=np.array([s.h(x) for s in self.specs]),
            psi_pre=a @ theta_prev + c if len(self.specs) else np.zeros(0),
            psi_post=a @ theta + c if len(self.specs) else np.zeros(0),
            status=sol.status,
            solve_us=us,
            deviation=float(np.linalg.norm(theta - self.anchor)),
            softened=soft,
        )
        self.diagnostics.append(diag)
        return diag


class NonlinearLayerIP:
    """Second-order chain through auxiliary parameter dynamics with CLF slack."""

    mode = "nonlinear-layer"

    def __init__(
        self,
        model: MlpOde,
        sel: ParamSelection,
        specs: Sequence[Specification],
        dt: float,
        eps: float | np.ndarray = 10.0,
        weights: float | np.ndarray = 1.0,
        A=None,
        B=None,
        warm_start: bool = True,
    ):
        self.model = model
        self.sel = sel
        self.specs = list(specs)
        self.dt = dt
        theta = model.get_params(sel)
        self.aux = AuxiliarySystem(theta, theta.copy(), A, B, eps, weights)
        self.solver = ActiveSetQP(warm_start=warm_start)
        self.diagnostics: list[IpStepDiagnostics] = []
        self.theta_history: list[np.ndarray] = []
        self._pending_u = None

    def field(self, x):
        return self.model.forward(x)

    def check_selection(self, x0) -> bool:
        return check_output_controllable(self.model.jacobian_theta(x0, self.sel), "parameter selection")

    def hook(self, step: int, t: float, x: np.ndarray):
        if self._pending_u is not None:
            self.aux.advance(self._pending_u, self.dt)
            self.model.set_params(self.sel, self.aux.theta)
        self.theta_history.append(self.aux.theta.copy())
        cache = self.model.jacobian_theta_and_x(x, self.sel)
        rows = [nonlinear_constraint_row(self.model, self.sel, s, x, self.aux, cache) for s in self.specs]
        u, delta, sol, us, soft = solve_nonlinear_ip(self.aux, rows, self.solver)
        self._pending_u = u
        psi_pre = np.array([c for _, c in rows])  # u = 0
        psi_post = np.array([coef @ u + c for coef, c in rows])
        diag = IpStepDiagnostics(
            step=step,
            t=t,
            h=np.array([s.h(x) for s in self.specs]),
            psi_pre=psi_pre,
            psi_post=psi_post,
            status=sol.status,
            solve_us=us,
            deviation=float(np.linalg.norm(self.aux.theta - self.aux.anchor)),
            max_slack=float(np.max(delta, initial=0.0)),
            softened=soft,
        )
        self.diagnostics.append(diag)
        return diag


class ExternalInputIP:
    """Minimal correction of an external input stream for an input-affine model."""

    mode = "external-input"

    def __init__(self, model: ExternalInputMlp, specs: Sequence[Specification],
                 raw_input: Callable[[int, float, np.ndarray], np.ndarray], warm_start: bool = True):
        self.model = model
        self.specs = list(specs)
        self.raw_input = raw_input
        self.solver = ActiveSetQP(warm_start=warm_start)
        self.current = None
        self.raw_history: list[np.ndarray] = []
        self.input_history: list[np.ndarray] = []
        self.diagnostics: list[IpStepDiagnostics] = []

    def field(self, x):
        return self.model.forward(x, self.current)

    def hook(self, step: int, t: float, x: np.ndarray):
        raw = np.asarray(self.raw_input(step, t, x), dtype=float)
        inp, sol, us, soft = input_ip_affine(self.model, self.specs, x, raw, self.solver)
        self.current = inp
        self.raw_history.append(raw)
        self.input_history.append(inp)
        fx_raw = self.model.forward(x, raw)
        fx = self.model.forward(x, inp)
        pre = np.array([s.grad(x) @ fx_raw + s.alpha(1)(s.h(x)) for s in self.specs])
        post = np.array([s.grad(x) @ fx + s.alpha(1)(s.h(x)) for s in self.specs])
        diag = IpStepDiagnostics(
            step=step, t=t, h=np.array([s.h(x) for s in self.specs]), psi_pre=pre, psi_post=post,
            status=sol.status, solve_us=us, deviation=float(np.linalg.norm(inp - raw)), softened=soft,
        )
        self.diagnostics.append(diag)
        return diag


class AugmentedInputIP:
    """Input IP for x' = f([x; y]) with y' = A y + B I (input enters through a state).

    This is the nonlinear-layer construction with y playing the role of the
    moved parameters: psi_2 is linear in I, and the QP keeps I close to the
    raw input. ``model`` takes the concatenated vector [x; y].
    """

    mode = "external-input"

    def __init__(self, model: MlpOde, n_state: int, specs: Sequence[Specification], y0,
                 raw_input: Callable, dt: float, A=None, B=None, warm_start: bool = True):
        self.model = model
        self.n = n_state
        self.specs = list(specs)
        self.y = np.array(y0, dtype=float)
        k = self.y.shape[0]
        if model.n_in != n_state + k or model.n_out != n_state:
            raise ValueError("model must map [x; y] to x'")
        self.A = np.zeros((k, k)) if A is None else np.asarray(A, float)
        self.B = np.eye(k) if B is None else np.asarray(B, float)
        self.raw_input = raw_input
        self.dt = dt
        self.solver = ActiveSetQP(warm_start=warm_start)
        self.diagnostics: list[IpStepDiagnostics] = []
        self.input_history: list[np.ndarray] = []
        self._pending = None

    def field(self, x):
        return self.model.forward(np.concatenate([x, self.y]))

    def hook(self, step: int, t: float, x: np.ndarray):
        if self._pending is not None:
            self.y = self.y + self.dt * (self.A @ self.y + self.B @ self._pending)
        raw = np.asarray(self.raw_input(step, t, x), dtype=float)
        xy = np.concatenate([x, self.y])
        f = self.model.forward(xy)
        J = self.model.jacobian_x(xy)
        Jx, Jy = J[:, : self.n], J[:, self.n:]
        k = raw.shape[0]
        G, g = np.zeros((len(self.specs), k)), np.zeros(len(self.specs))
        for i, s in enumerate(self.specs):
            dh = s.grad(x)
            a1, a2 = s.alpha(1), s.alpha(2)
            p1 = dh @ f + a1(s.h(x))
            lgh = dh @ Jy
            G[i] = -(lgh @ self.B)
            g[i] = (f @ s.hess(x) @ f + lgh @ (self.A @ self.y) + dh @ (Jx @ f)
                    + a1.derivative() * (dh @ f) + a2(p1))
        p = QpProblem(2.0 * np.eye(k), -2.0 * raw, G, g)
        sol, us, soft = _solve_with_fallback(self.solver, p, len(self.specs))
        self._pending = sol.u
        self.input_history.append(sol.u)
        diag = IpStepDiagnostics(
            step=step, t=t, h=np.array([s.h(x) for s in self.specs]), psi_pre=g.copy(),
            psi_post=g - G @ sol.u, status=sol.status, solve_us=us,
            deviation=float(np.linalg.norm(sol.u - raw)), softened=soft,
        )
        self.diagnostics.append(diag)
        return diag


@dataclass
class RolloutResult:
    trajectory: Trajectory
    h: np.ndarray  # (steps + 1, n_specs)
    diagnostics: list[IpStepDiagnostics] = field(default_factory=list)
    engine: object = None

    @property
    def sat_min(self) -> float:
        return float(self.h.min()) if self.h.size else float("inf")

    @property
    def qp_times_us(self) -> np.ndarray:
        return np.array([d.solve_us for d in self.diagnostics])

    @property
    def softened_steps(self) -> int:
        return sum(d.softened for d in self.diagnostics)


def run_invariant_rollout(
    model,
    mode: str,
    specs: Sequence[Specification],
    x0,
    cfg: IntegratorConfig,
    sel: ParamSelection | None = None,
    eps: float = 10.0,
    weights: float = 1.0,
    raw_input: Callable | None = None,
    warm_start: bool = True,
) -> RolloutResult:
    """Roll out ``model`` from ``x0`` with invariance enforced per ``mode``.

    The model passed in is copied; the caller's weights never change.
    """
    if mode not in MODES:
        raise ValueError(f"unknown IP mode {mode!r}; expected one of {MODES}")
    x0 = np.asarray(x0, dtype=float)
    if mode == "none":
        m = model.copy()
        traj = integrate_with_hook(m.forward, x0, cfg)
        engine = None
    elif mode == "external-input":
        if raw_input is None:
            raise ValueError("external-input mode needs a raw input stream")
        engine = ExternalInputIP(model, specs, raw_input, warm_start)
        traj = integrate_with_hook(engine.field, x0, cfg, engine.hook)
    else:
        if sel is None:
            raise ValueError(f"{mode} mode needs a parameter selection")
        m = model.copy()
        if mode == "linear-layer":
            engine = LinearLayerIP(m, sel, specs, warm_start)
        else:
            engine = NonlinearLayerIP(m, sel, specs, cfg.dt, eps, weights, warm_start=warm_start)
        engine.check_selection(x0)
        traj = integrate_with_hook(engine.field, x0, cfg, engine.hook)
    h = np.array([[s.h(x) for s in specs] for x in traj.states]).reshape(len(traj), len(specs))
    return RolloutResult(traj, h, list(engine.diagnostics) if engine else [], engine)
