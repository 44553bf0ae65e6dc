"""Benchmark problems: manufactured smooth optimality pairs and the ball target."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AnalyticField",
    "ManufacturedSolution",
    "BallTarget",
    "Problem",
    "smooth_example",
    "d1_smooth_example",
    "ball_target",
    "recover_control",
    "get_problem",
    "PROBLEMS",
]


class AnalyticField:
    """Closed-form space-time function with the derivatives the norms need.

    Every callable takes points of shape ``(..., d + 1)`` with time last.
    """

    def __init__(self, value, grad_x, dt, lap_x):
        self.value = value
        self.grad_x = grad_x
        self.dt = dt
        self.lap_x = lap_x

    def __call__(self, X):
        return self.value(X)


def _sines(X, d):
    x = X[..., :d]
    s = np.sin(np.pi * x)
    S = np.prod(s, axis=-1)
    grad = np.empty(x.shape)
    for i in range(d):
        other = np.prod(np.delete(s, i, axis=-1), axis=-1) if d > 1 else 1.0
        grad[..., i] = np.pi * np.cos(np.pi * x[..., i]) * other
    return S, grad


@dataclass(frozen=True)
class ManufacturedSolution:
    """Separable optimality pair on ``(0,1)^d x (0,1)`` with ``nu = 1``.

    ``y = S(x) (a t^2 + b t)`` and ``p = -varrho S(x) (c a t^2 + (c b + 2a) t + b)``
    with ``S = prod sin(pi x_i)`` and ``c = d pi^2``.  The state equation
    ``varrho (y_t - Lap y) + p = 0`` holds for any ``(a, b)``;
    ``a (c + 2) + b (c + 1) = 0`` makes ``p(., 1) = 0``.
    """

    spatial_dim: int
    varrho: float
    a: float
    b: float = 1.0
    final_time: float = field(default=1.0, init=False)

    def __post_init__(self):
        if not self.varrho > 0:
            raise ValueError(f"varrho must be positive, got {self.varrho}")

    @property
    def c(self) -> float:
        return self.spatial_dim * np.pi**2

    # time profiles
    def _g(self, t):
        return self.a * t**2 + self.b * t

    def _dg(self, t):
        return 2 * self.a * t + self.b

    def _h(self, t):
        c = self.c
        return c * self.a * t**2 + (c * self.b + 2 * self.a) * t + self.b

    def _dh(self, t):
        c = self.c
        return 2 * c * self.a * t + (c * self.b + 2 * self.a)

    def _field(self, prof, dprof, scale):
        d = self.spatial_dim
        c = self.c

        def value(X):
            S, _ = _sines(X, d)
            return scale * S * prof(X[..., -1])

        def grad_x(X):
            _, G = _sines(X, d)
            return scale * G * prof(X[..., -1])[..., None]

        def dt(X):
            S, _ = _sines(X, d)
            return scale * S * dprof(X[..., -1])

        def lap_x(X):
            S, _ = _sines(X, d)
            return -c * scale * S * prof(X[..., -1])

        return AnalyticField(value, grad_x, dt, lap_x)

    @property
    def state(self) -> AnalyticField:
        return self._field(self._g, self._dg, 1.0)

    @property
    def adjoint(self) -> AnalyticField:
        return self._field(self._h, self._dh, -self.varrho)

    @property
    def control(self) -> AnalyticField:
        """``u = -p / varrho``."""
        return self._field(self._h, self._dh, 1.0)

    def y(self, X):
        return self.state.value(X)

    def p(self, X):
        return self.adjoint.value(X)

    def u(self, X):
        return self.control.value(X)

    def target(self, X):
        """``y_d = y + p_t + Lap p = S (g - varrho h' + varrho c h)``."""
        S, _ = _sines(X, self.spatial_dim)
        t = X[..., -1]
        return S * (self._g(t) - self.varrho * self._dh(t) + self.varrho * self.c * self._h(t))

    __call__ = target

    def state_residual(self, X):
        y, p = self.state, self.adjoint
        return self.varrho * (y.dt(X) - y.lap_x(X)) + p.value(X)

    def adjoint_residual(self, X):
        y, p = self.state, self.adjoint
        return -p.dt(X) - p.lap_x(X) - y.value(X) + self.target(X)


def _make(d: int, varrho: float) -> ManufacturedSolution:
    if not varrho > 0:
        raise ValueError(f"varrho must be positive, got {varrho}")
    c = d * np.pi**2
    return ManufacturedSolution(d, float(varrho), a=-(c + 1) / (c + 2), b=1.0)


def smooth_example(varrho: float = 0.01) -> ManufacturedSolution:
    """Smooth 2D benchmark; ``a = -(2 pi^2 + 1) / (2 pi^2 + 2)`` so that ``p(., 1) = 0``."""
    return _make(2, varrho)


def d1_smooth_example(varrho: float = 0.01) -> ManufacturedSolution:
    """One-dimensional analogue with ``S = sin(pi x)`` and ``c = pi^2``."""
    return _make(1, varrho)


@dataclass(frozen=True)
class BallTarget:
    """Indicator ``value * [|(x, t) - center| <= radius]`` (closed ball)."""

    center: tuple = (0.5, 0.5, 0.5)
    radius: float = 0.25
    value: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def __call__(self, X):
        X = np.asarray(X, float)
        r = np.linalg.norm(X - np.asarray(self.center, float), axis=-1)
        return np.where(r <= self.radius, self.value, 0.0)

    def distance_to_sphere(self, X):
        return np.abs(np.linalg.norm(np.asarray(X) - np.asarray(self.center), axis=-1) - self.radius)


def ball_target(x, t) -> float:
    """Ball target of the 2D discontinuous benchmark at ``(x_1, x_2, t)``."""
    X = np.concatenate([np.atleast_1d(np.asarray(x, float)), [float(t)]])
    return float(BallTarget()(X))


def recover_control(p_h, varrho: float) -> np.ndarray:
    """Nodal control from the gradient equation ``p + varrho u = 0``."""
    if not varrho > 0:
        raise ValueError(f"varrho must be positive, got {varrho}")
    return -np.asarray(p_h, float) / varrho


@dataclass(frozen=True)
class Problem:
    name: str
    spatial_dim: int
    varrho: float
    target: object
    exact: ManufacturedSolution | None = None
    final_time: float = 1.0


PROBLEMS = ("smooth2d", "smooth1d", "ball")


def get_problem(name: str, varrho: float, spatial_dim: int | None = None) -> Problem:
    """Look up a benchmark by name; ``ball`` honours ``spatial_dim`` (default 2)."""
    if name == "smooth2d":
        ex = smooth_example(varrho)
        return Problem(name, 2, varrho, ex.target, ex)
    if name == "smooth1d":
        ex = d1_smooth_example(varrho)
        return Problem(name, 1, varrho, ex.target, ex)
    if name == "ball":
        d = 2 if spatial_dim is None else int(spatial_dim)
        if d not in (1, 2):
            raise ValueError("ball target needs spatial_dim 1 or 2")
        if not varrho > 0:
            raise ValueError(f"varrho must be positive, got {varrho}")
        return Problem(name, d, varrho, BallTarget(center=(0.5,) * (d + 1)))
    raise ValueError(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}")
