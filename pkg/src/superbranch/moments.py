"""First-moment semigroups of the limit superprocess.

T_t f = E_{delta_x} X_t(f) has generator

    B f = Q f + beta (M f - f) - b f,

with M the mean kernel of the non-local displacement law.  U_t drops the
drift term.  Both are linear and integrated with the same fixed-step RK4 as
the cumulant solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cumulant import GRID_TOL, SolverConfig, grid_steps, solve_age_renewal
from .errors import DomainError, GridError, ValidationError
from .mechanisms import LimitSystemSpec, MassFlow, as_test_function, mean_kernel_matrix, norm_b


@dataclass
class MomentField:
    """T_t f or U_t f on the grid t_i = i * step (``kind`` is "T" or "U")."""

    times: np.ndarray
    values: np.ndarray
    step: float
    kind: str

    def index(self, t):
        i = int(round(t / self.step))
        if i < 0 or i >= self.times.shape[0] or abs(i * self.step - t) > GRID_TOL * max(1.0, abs(t)):
            raise GridError(f"time {t} is not on the solver grid")
        return i

    def at(self, t):
        return self.values[self.index(t)]

    @property
    def final(self):
        return self.values[-1]


def moment_generator(spec: LimitSystemSpec, with_drift=True) -> np.ndarray:
    """Matrix of B (``with_drift``) or G acting on site functions."""
    beta = np.asarray(spec.nonlocal_.beta)
    gen = np.array(spec.motion.qmatrix) + beta[:, None] * (mean_kernel_matrix(spec.nonlocal_) - np.eye(spec.n_sites))
    if with_drift:
        gen = gen - np.diag(spec.local.b)
    return gen


def _linear_rk4(gen, f, n_steps, h):
    out = np.empty((n_steps + 1, f.shape[0]))
    out[0] = f
    v = f.copy()
    half = 0.5 * h
    for i in range(n_steps):
        k1 = gen @ v
        k2 = gen @ (v + half * k1)
        k3 = gen @ (v + half * k2)
        k4 = gen @ (v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = v
    return out


def _solve_moment(spec, f, horizon, config, with_drift, kind):
    config = config or SolverConfig()
    f = as_test_function(f, spec.n_sites)
    n_steps = grid_steps(horizon, config.step)
    values = _linear_rk4(moment_generator(spec, with_drift), f.copy(), n_steps, config.step)
    return MomentField(np.arange(n_steps + 1) * config.step, values, config.step, kind)


def solve_T(spec: LimitSystemSpec, f, horizon, config: Optional[SolverConfig] = None) -> MomentField:
    """Mean measure semigroup: mu(T_t f) = E_mu X_t(f)."""
    return _solve_moment(spec, f, horizon, config, True, "T")


def solve_U(spec: LimitSystemSpec, f, horizon, config: Optional[SolverConfig] = None) -> MomentField:
    """Semigroup with generator Q + beta (M - I), i.e. T without the drift term."""
    return _solve_moment(spec, f, horizon, config, False, "U")


def _grid_indices(times, step, n_steps):
    idx = []
    for t in times:
        i = int(round(t / step))
        if i < 0 or i > n_steps or abs(i * step - t) > GRID_TOL * max(1.0, abs(t)):
            raise GridError(f"time {t} is not on the solver grid")
        idx.append(i)
    return idx


def excessive_gap(spec: LimitSystemSpec, f, times, config: Optional[SolverConfig] = None) -> float:
    """max over ``times`` and sites of T_t f - exp(||b|| t) U_t f (should be <= 0)."""
    config = config or SolverConfig()
    times = [float(t) for t in times]
    if not times:
        raise DomainError("need at least one time")
    horizon = max(times)
    t_field = solve_T(spec, f, horizon, config)
    u_field = solve_U(spec, f, horizon, config)
    nb = norm_b(spec)
    gaps = [
        float(np.max(t_field.values[i] - math.exp(nb * t_field.times[i]) * u_field.values[i]))
        for i in _grid_indices(times, config.step, t_field.times.shape[0] - 1)
    ]
    return max(gaps)


def mass_moment_gap(spec: LimitSystemSpec, flow: MassFlow, a0, times, config: Optional[SolverConfig] = None) -> float:
    """max over ``times`` and sites of E X_t(H) - exp((c1 + ||b||) t) H for H(x, a) = a.

    Masses follow g(t, a) = a exp(c t) and non-local offspring carry the
    parent mass times ``offspring_factor``, so the expected mass from a
    particle at (x, a) is a K_t(x) with
        dK/dt = (Q + c + beta (q M - I) - b) K,  K_0 = 1,
    and H is (c1 + ||b||)-excessive with c1 = max(c, 0) whenever q M 1 <= 1.
    """
    config = config or SolverConfig()
    if not a0 > 0:
        raise DomainError("mass must be positive")
    n = spec.n_sites
    q = flow.offspring_factor
    beta = np.asarray(spec.nonlocal_.beta)
    mean = mean_kernel_matrix(spec.nonlocal_)
    if np.any(q * mean.sum(axis=1) > 1.0 + 1e-12):
        raise ValidationError("offspring must not carry more expected mass than the parent")
    gen = (
        np.array(spec.motion.qmatrix)
        + flow.growth * np.eye(n)
        + beta[:, None] * (q * mean - np.eye(n))
        - np.diag(spec.local.b)
    )
    times = [float(t) for t in times]
    n_steps = grid_steps(max(times), config.step)
    kfield = _linear_rk4(gen, np.ones(n), n_steps, config.step)
    rate = max(flow.growth, 0.0) + norm_b(spec)
    return max(
        float(np.max(a0 * kfield[i] - math.exp(rate * i * config.step) * a0))
        for i in _grid_indices(times, config.step, n_steps)
    )


def solve_age_moment(beta, m_scalar, lifetime, f, horizon, step=1e-3, times=None):
    """Mean of the single-site age-reproduction model: the renewal solver with zeta(z) = m z."""
    if m_scalar < 0:
        raise DomainError("offspring mean must be non-negative")
    return solve_age_renewal(beta, lambda z: m_scalar * z, lifetime, f, horizon, step, times)
