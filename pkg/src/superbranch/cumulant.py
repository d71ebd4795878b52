"""Solvers for the cumulant (log-Laplace) equation of the limit superprocess.

On a finite space the cumulant V_t f solves

    dV/dt = Q V - phi(V) - psi(V),    V_0 = f,

which for rebirth systems reduces to dV/dt = Q V + beta zeta(V).  Two
independent methods are provided: fixed-step RK4 on the differential form
and Picard iteration on the mild (variation of constants) form with
trapezoidal quadrature.  Times must lie on the step grid; nothing is
interpolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

from .errors import DomainError, GridError, SolverDivergence, SolverInstability, ValidationError
from .mechanisms import LimitSystemSpec, LocalMechanism, MassFlow, MechanismArrays, as_test_function, spec_arrays

METHODS = ("rk4-ode", "picard-mild")
GRID_TOL = 1e-9
CLAMP_FACTOR = 10.0


@dataclass(frozen=True)
class SolverConfig:
    step: float = 1e-3
    method: str = "rk4-ode"
    picard_tol: float = 1e-10
    picard_max_iter: int = 200

    def __post_init__(self):
        if not (self.step > 0 and math.isfinite(self.step)):
            raise ValidationError("step must be positive and finite")
        if not self.picard_tol > 0:
            raise ValidationError("picard_tol must be positive")
        if self.picard_max_iter < 1:
            raise ValidationError("picard_max_iter must be at least 1")
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")

    def with_step(self, step):
        return SolverConfig(step, self.method, self.picard_tol, self.picard_max_iter)


def grid_steps(horizon, step):
    """Number of steps reaching ``horizon`` exactly; off-grid horizons are errors."""
    if not horizon >= 0:
        raise DomainError("horizon must be non-negative")
    n = int(round(horizon / step))
    if abs(n * step - horizon) > GRID_TOL * max(1.0, horizon):
        raise GridError(f"horizon {horizon} is not a multiple of the step {step}")
    return n


@dataclass
class CumulantField:
    """V_t f on the grid t_i = i * step; ``values[i]`` is the site vector at t_i."""

    times: np.ndarray
    values: np.ndarray
    step: float
    method: str
    clamped: int = 0
    iterations: int = 0
    metadata: dict = field(default_factory=dict)

    def index(self, t):
        i = int(round(t / self.step))
        if i < 0 or i >= self.times.shape[0] or abs(i * self.step - t) > GRID_TOL * max(1.0, abs(t)):
            raise GridError(f"time {t} is not on the solver grid (step {self.step}, horizon {self.times[-1]})")
        return i

    def at(self, t):
        return self.values[self.index(t)]

    @property
    def final(self):
        return self.values[-1]


# -- equations --------------------------------------------------------------


@dataclass
class _Equation:
    """dv/dt = q v - nonlinear(t, v)."""

    q: np.ndarray
    nonlinear: Callable[[float, np.ndarray], np.ndarray]
    autonomous: bool = True

    def rhs(self, t, v):
        return self.q @ v - self.nonlinear(t, v)


def _spec_equation(spec: LimitSystemSpec) -> _Equation:
    arr = spec_arrays(spec)
    if spec.rebirth:
        beta = arr.beta

        def nonlinear(t, v):
            return -(beta * arr.zeta(v))

    else:

        def nonlinear(t, v):
            return arr.phi(v) + arr.psi(v)

    return _Equation(np.array(spec.motion.qmatrix), nonlinear)


def _clamp(v, floor, counter):
    neg = v < 0
    if neg.any():
        if np.any(v < floor):
            raise SolverInstability(
                f"cumulant fell to {v.min():.3e}, below the rounding allowance {floor:.3e}; try a smaller step"
            )
        counter[0] += int(neg.sum())
        v = np.where(neg, 0.0, v)
    return v


def _rk4(eq: _Equation, f, n_steps, h, t0=0.0):
    out = np.empty((n_steps + 1, f.shape[0]))
    out[0] = f
    v = f.copy()
    floor = -CLAMP_FACTOR * h**4
    counter = [0]
    half = 0.5 * h
    for i in range(n_steps):
        t = t0 + i * h
        k1 = eq.rhs(t, v)
        k2 = eq.rhs(t + half, v + half * k1)
        k3 = eq.rhs(t + half, v + half * k2)
        k4 = eq.rhs(t + h, v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        v = _clamp(v, floor, counter)
        out[i + 1] = v
    return out, counter[0]


def _picard(eq: _Equation, f, n_steps, h, tol, max_iter):
    """Iterate V_j = P^j f - sum_i w_i P^i N(V_{j-i}) (trapezoidal in s = i h)."""
    if not eq.autonomous:
        raise ValidationError("the mild-form solver needs an autonomous equation")
    n = f.shape[0]
    step_prop = expm(h * eq.q)
    powers = np.empty((n_steps + 1, n, n))
    powers[0] = np.eye(n)
    for i in range(n_steps):
        powers[i + 1] = step_prop @ powers[i]
    free = np.einsum("ijk,k->ij", powers, f)
    v = free.copy()
    floor = -CLAMP_FACTOR * h**4
    counter = [0]
    residual = math.inf
    for it in range(1, max_iter + 1):
        nl = np.array([eq.nonlinear(0.0, row) for row in v])
        conv = np.zeros_like(v)
        for i in range(n_steps + 1):
            # lag-i contribution P^i N(V_{j-i}) to every time j >= i
            conv[i:] += nl[: n_steps + 1 - i] @ powers[i].T
        # trapezoid end corrections: half weight at lag 0 and at lag j
        conv -= 0.5 * nl
        conv -= 0.5 * np.einsum("jkl,l->jk", powers, nl[0])
        conv[0] = 0.0
        new = free - h * conv
        counter[0] = 0
        new = _clamp(new, floor, counter)
        residual = float(np.max(np.abs(new - v)))
        v = new
        if residual < tol:
            return v, counter[0], it
    raise SolverDivergence(f"Picard iteration did not reach tol {tol} in {max_iter} iterations", residual)


def _solve(eq: _Equation, f, horizon, config: SolverConfig, metadata=None) -> CumulantField:
    h = config.step
    n_steps = grid_steps(horizon, h)
    if config.method == "rk4-ode":
        values, clamped = _rk4(eq, f, n_steps, h)
        iterations = 0
    else:
        values, clamped, iterations = _picard(eq, f, n_steps, h, config.picard_tol, config.picard_max_iter)
    values[0] = f
    times = np.arange(n_steps + 1) * h
    return CumulantField(times, values, h, config.method, clamped, iterations, dict(metadata or {}))


# -- public solvers ---------------------------------------------------------


def solve_cumulant(spec: LimitSystemSpec, f, horizon, config: Optional[SolverConfig] = None) -> CumulantField:
    """V_t f for t on the grid up to ``horizon``."""
    config = config or SolverConfig()
    f = as_test_function(f, spec.n_sites)
    return _solve(_spec_equation(spec), f.copy(), horizon, config, {"rebirth": spec.rebirth})


def solve_controlled_immigration(spec1, spec2, f1, f2, horizon, config: Optional[SolverConfig] = None):
    """Cumulants (v1, v2) of a population whose mass drives immigration of the other.

    v2 solves its own autonomous equation and enters v1's as a source:
    dv1/dt = Q1 v1 - phi1(v1) + v2.  The pair is integrated jointly, so with
    f2 = 0 the source is exactly zero and v1 matches the standalone solve.
    """
    config = config or SolverConfig()
    n = spec1.n_sites
    if spec2.n_sites != n:
        raise ValidationError("both populations must live on the same sites")
    f1 = as_test_function(f1, n)
    f2 = as_test_function(f2, n)
    a1, a2 = spec_arrays(spec1), spec_arrays(spec2)
    q = np.zeros((2 * n, 2 * n))
    q[:n, :n] = spec1.motion.qmatrix
    q[n:, n:] = spec2.motion.qmatrix

    def nonlinear(t, v):
        v1, v2 = v[:n], v[n:]
        return np.concatenate([(a1.phi(v1) + a1.psi(v1)) - v2, a2.phi(v2) + a2.psi(v2)])

    joint = _solve(_Equation(q, nonlinear), np.concatenate([f1, f2]), horizon, config)
    part = lambda sl: CumulantField(joint.times, joint.values[:, sl].copy(), joint.step, joint.method,
                                    joint.clamped, joint.iterations)
    return part(slice(0, n)), part(slice(n, 2 * n))


def laplace_functional(mu, field_: CumulantField, t) -> float:
    """exp(-mu(V_t f))."""
    mu = np.asarray(mu, dtype=float)
    v = field_.at(t)
    if mu.shape != v.shape:
        raise DomainError("initial measure and field have different site counts")
    return math.exp(-float(mu @ v))


def semigroup_residual(spec, f, s, t, config: Optional[SolverConfig] = None) -> float:
    """sup |V_{t+s} f - V_t(V_s f)|."""
    if not (s > 0 and t > 0):
        raise DomainError("s and t must be positive")
    config = config or SolverConfig()
    whole = solve_cumulant(spec, f, s + t, config).final
    first = solve_cumulant(spec, f, s, config).final
    second = solve_cumulant(spec, first, t, config).final
    return float(np.max(np.abs(whole - second)))


def solver_gap(spec, f, horizon, step=1e-3, picard_tol=1e-10) -> float:
    """Sup-norm distance between the RK4 and Picard solutions over the grid."""
    a = solve_cumulant(spec, f, horizon, SolverConfig(step, "rk4-ode"))
    b = solve_cumulant(spec, f, horizon, SolverConfig(step, "picard-mild", picard_tol))
    return float(np.max(np.abs(a.values - b.values)))


# -- mass-structured (time-inhomogeneous) cumulants ---------------------------


def solve_inhomogeneous_mass(
    spec: LimitSystemSpec,
    flow: MassFlow,
    local_at_mass: Optional[Callable[[float], LocalMechanism]],
    a0,
    r,
    t,
    f,
    config: Optional[SolverConfig] = None,
) -> CumulantField:
    """V^a_{r,t} f for a particle whose mass follows the deterministic flow.

    The local mechanism at time s is ``local_at_mass(g(s, a0))`` (default:
    the local mechanism of ``spec`` scaled by the mass).  The returned field is indexed
    by remaining time u = t - s, so ``final`` is V^a_{r,t} f.
    """
    config = config or SolverConfig()
    if config.method != "rk4-ode":
        raise ValidationError("the mass-structured solver integrates with rk4-ode only")
    if not a0 > 0:
        raise DomainError("initial mass must be positive")
    if not 0 <= r <= t:
        raise DomainError("need 0 <= r <= t")
    f = as_test_function(f, spec.n_sites)
    if local_at_mass is None:
        local_at_mass = spec.local.scaled
    nl = spec.nonlocal_

    def nonlinear(u, v):
        arr = MechanismArrays(local_at_mass(flow.g(t - u, a0)), nl)
        return arr.phi(v) + arr.psi(v)

    eq = _Equation(np.array(spec.motion.qmatrix), nonlinear, autonomous=False)
    h = config.step
    n_steps = grid_steps(t - r, h)
    values, clamped = _rk4(eq, f.copy(), n_steps, h)
    values[0] = f
    return CumulantField(np.arange(n_steps + 1) * h, values, h, "rk4-ode", clamped, 0, {"a0": a0, "r": r, "t": t})


def mass_representation_gap(spec, flow: MassFlow, local_at_mass, a, r, t, f, config=None) -> float:
    """sup_x |V^a_{r,t} f(x) - V_{t-r} f(x, g(r, a))|.

    The right side starts the flow afresh from mass g(r, a) at time 0.
    """
    lhs = solve_inhomogeneous_mass(spec, flow, local_at_mass, a, r, t, f, config).final
    rhs = solve_inhomogeneous_mass(spec, flow, local_at_mass, flow.g(r, a), 0.0, t - r, f, config).final
    return float(np.max(np.abs(lhs - rhs)))


# -- age renewal on a single site -------------------------------------------


@dataclass
class AgeGrid:
    """V_t f(a) on a uniform age grid, stored at selected grid times."""

    ages: np.ndarray
    times: np.ndarray
    values: np.ndarray  # values[i, j] = V_{times[i]} f(ages[j])
    newborn: np.ndarray  # V_{t} f(0) at every grid time
    step: float
    lifetime: float

    def at(self, t, a=None):
        hits = np.nonzero(np.abs(self.times - t) <= GRID_TOL * max(1.0, abs(t)))[0]
        if hits.size == 0:
            raise GridError(f"time {t} was not recorded")
        row = self.values[hits[0]]
        if a is None:
            return row
        j = int(round(a / self.step))
        if j < 0 or j >= self.ages.shape[0] or abs(j * self.step - a) > GRID_TOL * max(1.0, a):
            raise GridError(f"age {a} is not on the age grid")
        return row[j]


def _as_rate(beta):
    if callable(beta):
        return beta
    value = float(beta)
    if value < 0:
        raise DomainError("reproduction rate must be non-negative")
    return lambda a: np.full_like(np.asarray(a, dtype=float), value)


def solve_age_renewal(beta, zeta, lifetime, f, horizon, step=1e-3, times=None, tol=1e-14) -> AgeGrid:
    """Cumulant of the single-site age-reproduction model.

    Newborns solve the renewal equation
        W(t) = f(t) 1{t<L} + int_0^{min(L,t)} beta(s) zeta(W(t-s)) ds
    (trapezoidal in s, implicit in the newest value), and a particle of age a
    then has V_t f(a) = f(a+t) 1{a+t<L} + int_0^{min(L-a,t)} beta(a+s) zeta(W(t-s)) ds.

    ``beta`` and ``f`` are callables of age (or constants); ``zeta`` is a
    scalar callable.  ``times`` selects the recorded grid times (default:
    0 and the horizon).
    """
    if not lifetime > 0:
        raise ValidationError("lifetime must be positive")
    h = float(step)
    n_t = grid_steps(horizon, h)
    if math.isfinite(lifetime):
        n_a = grid_steps(lifetime, h)
    else:
        n_a = n_t
    rate = _as_rate(beta)
    f_fun = f if callable(f) else (lambda a, _c=float(f): np.full_like(np.asarray(a, dtype=float), _c))
    life_steps = n_a if math.isfinite(lifetime) else n_t + 1

    grid_len = n_a + n_t + 1
    ages_all = np.arange(grid_len) * h
    beta_all = np.asarray(rate(ages_all), dtype=float)
    f_all = np.asarray(f_fun(ages_all), dtype=float)
    if np.any(beta_all < 0) or np.any(f_all < 0):
        raise DomainError("rates and test function must be non-negative")
    index = np.arange(grid_len)
    alive = index < n_a if math.isfinite(lifetime) else np.ones(grid_len, dtype=bool)

    w = np.zeros(n_t + 1)
    z = np.zeros(n_t + 1)  # zeta(W) on the grid
    for i in range(n_t + 1):
        m = min(i, life_steps)
        base = f_all[i] if alive[i] else 0.0
        if m >= 1:
            idx = np.arange(1, m + 1)
            weights = np.ones(m)
            weights[-1] = 0.5
            base += h * float(np.dot(weights * beta_all[idx], z[i - idx]))
            lead = 0.5 * h * beta_all[0]
        else:
            lead = 0.0
        val = base
        if lead > 0:
            for _ in range(200):
                nxt = base + lead * float(zeta(val))
                if abs(nxt - val) <= tol * max(1.0, abs(nxt)):
                    val = nxt
                    break
                val = nxt
        w[i] = val
        z[i] = float(zeta(val))

    record = [0.0, horizon] if times is None else sorted(set(float(s) for s in times))
    rows = []
    for s in record:
        i = grid_steps(s, h)
        if i > n_t:
            raise GridError(f"time {s} beyond the horizon")
        row = np.empty(n_a + 1)
        for j in range(n_a + 1):
            m = min(i, n_a - j) if math.isfinite(lifetime) else i
            val = f_all[i + j] if alive[i + j] else 0.0
            if m >= 1:
                lags = np.arange(m + 1)
                weights = np.ones(m + 1)
                weights[0] = weights[-1] = 0.5
                val += h * float(np.dot(weights * beta_all[j + lags], z[i - lags]))
            row[j] = val
        rows.append(row)
    return AgeGrid(np.arange(n_a + 1) * h, np.array(record), np.array(rows), w, h, float(lifetime))
