"""Dense numerics: forward-mode duals, fixed-step integration, FD Jacobians."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

Field = Callable[[np.ndarray], np.ndarray]
Hook = Callable[[int, float, np.ndarray], Any]

SCHEMES = ("euler", "rk4")


class NonFiniteDynamics(FloatingPointError):
    """A vector field or function produced NaN/Inf."""


class StepError(RuntimeError):
    """Raised when a rollout step fails; carries the step index and last good state."""

    def __init__(self, step: int, state: np.ndarray, cause: BaseException):
        super().__init__(f"step {step} failed: {cause!r}")
        self.step = step
        self.state = np.array(state, copy=True)
        self.__cause__ = cause


def _finite(v: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NonFiniteDynamics(f"non-finite {what}: {v}")
    return v


class DualVector:
    """Vector value paired with its Jacobian w.r.t. a fixed seed set.

    ``value`` has shape (n,), ``deriv`` shape (n, s) where s is the seed count.
    Only the operations the MLP fields need are provided: affine maps by
    constant matrices, elementwise products/powers and scalar activations.
    """

    __array_ufunc__ = None  # make ``ndarray @ dual`` defer to __rmatmul__

    def __init__(self, value, deriv):
        self.value = np.asarray(value, dtype=float)
        self.deriv = np.asarray(deriv, dtype=float)
        if self.deriv.ndim != 2 or self.deriv.shape[0] != self.value.shape[0]:
            raise ValueError(
                f"derivative shape {self.deriv.shape} does not match value {self.value.shape}"
            )

    @classmethod
    def seed(cls, x) -> "DualVector":
        x = np.asarray(x, dtype=float)
        return cls(x, np.eye(x.shape[0]))

    @classmethod
    def constant(cls, x, n_seeds: int) -> "DualVector":
        x = np.asarray(x, dtype=float)
        return cls(x, np.zeros((x.shape[0], n_seeds)))

    @property
    def n_seeds(self) -> int:
        return self.deriv.shape[1]

    def __len__(self):
        return self.value.shape[0]

    def _lift(self, other):
        if isinstance(other, DualVector):
            if other.n_seeds != self.n_seeds:
                raise ValueError("seed sets differ")
            return other
        other = np.broadcast_to(np.asarray(other, dtype=float), self.value.shape)
        return DualVector(other, np.zeros_like(self.deriv))

    def __add__(self, other):
        o = self._lift(other)
        return DualVector(self.value + o.value, self.deriv + o.deriv)

    __radd__ = __add__

    def __neg__(self):
        return DualVector(-self.value, -self.deriv)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        o = self._lift(other)
        return DualVector(
            self.value * o.value,
            self.deriv * o.value[:, None] + o.deriv * self.value[:, None],
        )

    __rmul__ = __mul__

    def __pow__(self, p: float):
        return DualVector(self.value**p, (p * self.value ** (p - 1))[:, None] * self.deriv)

    def __rmatmul__(self, m):
        m = np.asarray(m, dtype=float)
        return DualVector(m @ self.value, m @ self.deriv)

    def apply(self, fn: Callable, dfn: Callable) -> "DualVector":
        """Elementwise scalar map with derivative ``dfn``."""
        return DualVector(fn(self.value), dfn(self.value)[:, None] * self.deriv)

    def __repr__(self):
        return f"DualVector(value={self.value!r}, n_seeds={self.n_seeds})"


def dual_jacobian(fn: Callable[[DualVector], DualVector], x) -> np.ndarray:
    """Jacobian of ``fn`` at ``x`` via one forward pass with identity seeds."""
    out = fn(DualVector.seed(x))
    return _finite(out.deriv, "dual Jacobian")


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "rk4"
    dt: float = 0.025
    horizon: float = 25.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError("horizon must be at least one step")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def grid(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    records: list = field(default_factory=list)

    def __len__(self):
        return self.states.shape[0]


def integrate_step(fn: Field, x: np.ndarray, dt: float, scheme: str = "euler") -> np.ndarray:
    """Advance ``x`` by one fixed step of ``scheme``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    # overflow shows up as inf/nan and is reported by _finite
    with np.errstate(over="ignore", invalid="ignore"):
        if scheme == "euler":
            x_next = x + dt * _finite(fn(x), "field output")
        elif scheme == "rk4":
            k1 = _finite(fn(x), "field output")
            k2 = _finite(fn(x + 0.5 * dt * k1), "field output")
            k3 = _finite(fn(x + 0.5 * dt * k2), "field output")
            k4 = _finite(fn(x + dt * k3), "field output")
            x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    return _finite(x_next, "state")


def integrate_with_hook(
    fn: Field, x0, cfg: IntegratorConfig, hook: Hook | None = None
) -> Trajectory:
    """Fixed-step rollout; ``hook(step, t, x)`` runs once before every step.

    The hook may mutate whatever ``fn`` closes over (model weights, inputs).
    Anything it returns other than None is appended to ``Trajectory.records``.
    """
    t = cfg.grid()
    states = np.empty((t.shape[0], np.size(x0)))
    states[0] = x0
    records = []
    for i in range(cfg.n_steps):
        x = states[i]
        try:
            if hook is not None:
                rec = hook(i, t[i], x)
                if rec is not None:
                    records.append(rec)
            states[i + 1] = integrate_step(fn, x, cfg.dt, cfg.scheme)
        except Exception as exc:
            raise StepError(i, x, exc) from exc
    return Trajectory(t, states, records)


def finite_difference_jacobian(fn: Callable, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian; column j is (fn(x+eps e_j) - fn(x-eps e_j)) / 2eps."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cols = []
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = eps
        hi = _finite(np.atleast_1d(np.asarray(fn(x + e), dtype=float)), "FD evaluation")
        lo = _finite(np.atleast_1d(np.asarray(fn(x - e), dtype=float)), "FD evaluation")
        cols.append((hi - lo) / (2.0 * eps))
    return np.stack(cols, axis=1)
