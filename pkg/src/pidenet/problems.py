"""Benchmark problem definitions: coefficients, jump laws, drivers, exact solutions.

Each problem bundles the forward-process coefficients (drift, diffusion,
jump size), the jump intensity with its mark sampler and the closed-form
compensator integral of the jump size, the backward driver, the terminal
condition, and (when known) the exact solution used only for error
reporting.

Drivers follow the sign convention of the backward one-step map
``Y_next = Y - f*dt + Z.dW + I*dt``: the source term that the benchmark
recursions add with a plus sign is stored negated inside ``f``.  Drivers
accept either numpy arrays or tape variables for (y, z, i), so the same
callable serves simulation-side checks and the differentiable loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficient bundle for one PIDE / forward-backward jump system.

    Coefficient callables receive the state as (rows, d) and the time as
    either a scalar or a (rows, 1) column; implementations must broadcast
    over both.  ``diffusion`` returns full (rows, d, d) matrices;
    ``diffusion_diag``, when set, returns just the (rows, d) diagonal and
    lets the loss skip the dense matrix product.
    """

    name: str
    dim: int
    x0: np.ndarray = field(repr=False)
    total_time: float
    intensity: float
    mark_dim: int
    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    jump_size: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    sample_marks: Callable[[np.ndarray], np.ndarray]
    compensator: Callable[[float, np.ndarray], np.ndarray]
    driver: Callable
    terminal: Callable[[np.ndarray], np.ndarray]
    exact: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    exact_grad: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    diffusion_diag: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=np.float64))
        if self.x0.shape != (self.dim,):
            raise ValueError(f"x0 has shape {self.x0.shape}, expected ({self.dim},)")
        if self.intensity < 0:
            raise ValueError(f"jump intensity must be >= 0, got {self.intensity}")
        if self.total_time <= 0:
            raise ValueError(f"total_time must be positive, got {self.total_time}")


def _normal_mark_sampler(mean: float, std: float) -> Callable[[np.ndarray], np.ndarray]:
    """Inverse-CDF transform from uniforms to i.i.d. normal mark coordinates."""

    def sample(uniforms: np.ndarray) -> np.ndarray:
        return mean + std * ndtri(uniforms)

    return sample


def _squared_radius(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=1, keepdims=True)


def pure_jump_1d(
    lam: float = 0.3,
    mark_mean: float = 0.4,
    mark_std: float = 0.25,
    total_time: float = 1.0,
    x0: float = 1.0,
) -> ProblemSpec:
    """Scalar pure-jump benchmark: no drift or diffusion, multiplicative jumps.

    Jumps send x to x*exp(z) with normal marks z, compensated in closed
    form; the value function is the identity u(t, x) = x.
    """
    if mark_std <= 0:
        raise ValueError("mark_std must be positive")
    kappa = np.exp(mark_mean + 0.5 * mark_std**2) - 1.0

    return ProblemSpec(
        name="pure_jump_1d",
        dim=1,
        x0=np.array([x0]),
        total_time=total_time,
        intensity=lam,
        mark_dim=1,
        drift=lambda t, x: np.zeros_like(x),
        diffusion=lambda t, x: np.zeros((x.shape[0], 1, 1)),
        diffusion_diag=lambda t, x: np.zeros_like(x),
        jump_size=lambda t, x, z: x * (np.exp(z) - 1.0),
        sample_marks=_normal_mark_sampler(mark_mean, mark_std),
        compensator=lambda t, x: lam * kappa * x,
        driver=lambda t, x, y, z, i: 0.0,
        terminal=lambda x: x[:, :1].copy(),
        exact=lambda t, x: x[:, :1].copy(),
        exact_grad=lambda t, x: np.ones_like(x),
        params={"lam": lam, "mark_mean": mark_mean, "mark_std": mark_std},
    )


def pide_1d(
    lam: float = 0.3,
    tau: float = 0.4,
    eps: float = 0.25,
    mark_mean: float = 0.4,
    mark_std: float = 0.25,
    total_time: float = 1.0,
    x0: float = 1.0,
) -> ProblemSpec:
    """Scalar benchmark with diffusion and convection on top of the jumps.

    The backward recursion adds a source eps*x, so the driver stores its
    negation; the value function is again u(t, x) = x.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    kappa = np.exp(mark_mean + 0.5 * mark_std**2) - 1.0

    return ProblemSpec(
        name="pide_1d",
        dim=1,
        x0=np.array([x0]),
        total_time=total_time,
        intensity=lam,
        mark_dim=1,
        drift=lambda t, x: eps * x,
        diffusion=lambda t, x: np.full((x.shape[0], 1, 1), tau),
        diffusion_diag=lambda t, x: np.full_like(x, tau),
        jump_size=lambda t, x, z: x * (np.exp(z) - 1.0),
        sample_marks=_normal_mark_sampler(mark_mean, mark_std),
        compensator=lambda t, x: lam * kappa * x,
        driver=lambda t, x, y, z, i: -eps * x[:, :1],
        terminal=lambda x: x[:, :1].copy(),
        exact=lambda t, x: x[:, :1].copy(),
        exact_grad=lambda t, x: np.ones_like(x),
        params={"lam": lam, "tau": tau, "eps": eps, "mark_mean": mark_mean, "mark_std": mark_std},
    )


def highdim_pide(
    dim: int,
    lam: float = 0.3,
    tau: float = 0.1,
    eps: float = 0.25,
    mark_mean: float = 0.01,
    mark_std: float = 0.1,
    total_time: float = 1.0,
    x0: Optional[np.ndarray] = None,
) -> ProblemSpec:
    """d-dimensional benchmark with additive vector jumps.

    Marks are d-dimensional with i.i.d. normal coordinates so that the
    jump integral of the squared radius matches the lam*(mean^2+std^2)
    source term; the value function is u(t, x) = |x|^2 / d.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    x0 = np.ones(dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    source_const = lam * (mark_mean**2 + mark_std**2) + tau**2

    def driver(t, x, y, z, i):
        return -(source_const + (eps / dim) * _squared_radius(x))

    return ProblemSpec(
        name="highdim_pide",
        dim=dim,
        x0=x0,
        total_time=total_time,
        intensity=lam,
        mark_dim=dim,
        drift=lambda t, x: 0.5 * eps * x,
        diffusion=lambda t, x: np.broadcast_to(tau * np.eye(dim), (x.shape[0], dim, dim)).copy(),
        diffusion_diag=lambda t, x: np.full_like(x, tau),
        jump_size=lambda t, x, e: e,
        sample_marks=_normal_mark_sampler(mark_mean, mark_std),
        compensator=lambda t, x: np.full_like(x, lam * mark_mean),
        driver=driver,
        terminal=lambda x: _squared_radius(x) / dim,
        exact=lambda t, x: _squared_radius(x) / dim,
        exact_grad=lambda t, x: (2.0 / dim) * x,
        params={
            "lam": lam, "tau": tau, "eps": eps,
            "mark_mean": mark_mean, "mark_std": mark_std,
        },
    )


def bsb_jumps(
    dim: int,
    lam: float = 0.3,
    r: float = 0.05,
    tau: float = 0.4,
    mark_mean: float = 0.02,
    mark_std: float = 0.01,
    total_time: float = 1.0,
    x0: Optional[np.ndarray] = None,
) -> ProblemSpec:
    """Black-Scholes-Barenblatt dynamics with additive vector jumps.

    State-proportional drift and diagonal diffusion; the driver couples to
    the value through r*y, and the exact solution carries the factor
    exp((r + tau^2)(T - t)).
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    x0 = np.ones(dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    T = total_time
    mark_msq = mark_mean**2 + mark_std**2

    def diffusion(t, x):
        out = np.zeros((x.shape[0], dim, dim))
        idx = np.arange(dim)
        out[:, idx, idx] = tau * x
        return out

    def driver(t, x, y, z, i):
        return -(r * y + lam * np.exp((r + tau**2) * (T - t)) * mark_msq)

    def exact(t, x):
        return np.exp((r + tau**2) * (T - t)) * _squared_radius(x) / dim

    return ProblemSpec(
        name="bsb_jumps",
        dim=dim,
        x0=x0,
        total_time=T,
        intensity=lam,
        mark_dim=dim,
        drift=lambda t, x: r * x,
        diffusion=diffusion,
        diffusion_diag=lambda t, x: tau * x,
        jump_size=lambda t, x, e: e,
        sample_marks=_normal_mark_sampler(mark_mean, mark_std),
        compensator=lambda t, x: np.full_like(x, lam * mark_mean),
        driver=driver,
        terminal=lambda x: _squared_radius(x) / dim,
        exact=exact,
        exact_grad=lambda t, x: (2.0 / dim) * np.exp((r + tau**2) * (T - t)) * x,
        params={
            "lam": lam, "r": r, "tau": tau,
            "mark_mean": mark_mean, "mark_std": mark_std,
        },
    )


_FACTORIES = {
    "pure_jump_1d": pure_jump_1d,
    "pide_1d": pide_1d,
    "highdim_pide": highdim_pide,
    "bsb_jumps": bsb_jumps,
}


def by_name(name: str, **kwargs) -> ProblemSpec:
    """Problem lookup used by the experiment configs."""
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; known: {sorted(_FACTORIES)}") from None
    return factory(**kwargs)
