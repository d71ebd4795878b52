"""State spaces, branching mechanisms and their particle-level approximations.

Everything lives on a finite ordered site list.  Mechanism parameters are
per-site lookup tables and jump/count measures are finite atom lists.

The local mechanism is

    phi(x, z) = b(x) z + c(x) z^2 + sum_j m_j (exp(-z u_j) - 1 + z u_j)

and the non-local displacement functional is a finite mixture

    zeta(x, f) = sum_r w_r [ d_r pi_r(f) + sum_j n_rj (1 - exp(-u_rj pi_r(f))) ]

with psi(x, f) = beta(x) (f(x) - zeta(x, f)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DensityTooSmall, DomainError, ValidationError

ROW_SUM_TOL = 1e-12
WEIGHT_TOL = 1e-12

FIXED = 0
POISSON = 1
AT_PARENT = -1


def _frozen(values, dtype=float):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _freeze_atoms(atoms, n_sites, what):
    if atoms is None or len(atoms) == 0:
        return tuple(() for _ in range(n_sites))
    if len(atoms) != n_sites:
        raise ValidationError(f"{what}: expected one atom list per site ({n_sites}), got {len(atoms)}")
    out = []
    for site, lst in enumerate(atoms):
        site_atoms = []
        for pair in lst:
            u, w = (float(v) for v in pair)
            if not (u > 0 and w > 0) or not (math.isfinite(u) and math.isfinite(w)):
                raise ValidationError(f"{what}: atom ({u}, {w}) at site {site} must have positive finite entries")
            site_atoms.append((u, w))
        out.append(tuple(site_atoms))
    return tuple(out)


@dataclass(frozen=True)
class SiteSpace:
    """Ordered finite list of site labels, optionally a flattened product E x I.

    With ``factorization=(base, types)`` the flattened index of ``(x, i)`` is
    ``i * len(base) + x`` (type-major blocks).
    """

    sites: tuple
    factorization: Optional[tuple] = None

    def __post_init__(self):
        sites = tuple(self.sites)
        object.__setattr__(self, "sites", sites)
        if not sites:
            raise ValidationError("site space must be non-empty")
        if len(set(sites)) != len(sites):
            raise ValidationError("site labels must be unique")
        if self.factorization is not None:
            base, types = (tuple(part) for part in self.factorization)
            object.__setattr__(self, "factorization", (base, types))
            if len(base) * len(types) != len(sites):
                raise ValidationError(
                    f"factored space needs |E|*|I| = {len(base)}*{len(types)} sites, got {len(sites)}"
                )

    @classmethod
    def range(cls, n):
        return cls(tuple(range(n)))

    @classmethod
    def product(cls, base, types):
        base, types = tuple(base), tuple(types)
        sites = tuple((x, i) for i in types for x in base)
        return cls(sites, (base, types))

    def __len__(self):
        return len(self.sites)

    def index(self, label):
        try:
            return self.sites.index(label)
        except ValueError:
            raise DomainError(f"unknown site {label!r}") from None

    def flat_index(self, base_index, type_index):
        if self.factorization is None:
            raise DomainError("space is not factored")
        return type_index * len(self.factorization[0]) + base_index


def as_test_function(values, n_sites=None):
    """Validate a non-negative finite site function and return it as an array."""
    f = np.asarray(values, dtype=float)
    if f.ndim != 1:
        raise DomainError("test function must be one-dimensional")
    if n_sites is not None and f.shape[0] != n_sites:
        raise DomainError(f"test function has {f.shape[0]} values for {n_sites} sites")
    if not np.all(np.isfinite(f)) or np.any(f < 0):
        raise DomainError("test function must be finite and non-negative")
    return f


# -- deterministic flows ------------------------------------------------------


@dataclass(frozen=True)
class AgeFlow:
    """Age grows at unit speed; particles are removed when age reaches ``lifetime``.

    ``rate_factor(age)`` in [0, 1] scales branching rates by thinning against
    the declared (dominating) rates of the particle laws.
    """

    lifetime: float = math.inf
    rate_factor: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if not self.lifetime > 0:
            raise ValidationError("lifetime must be positive")

    def g(self, t, a0):
        return a0 + t


@dataclass(frozen=True)
class MassFlow:
    """Exponential mass flow g(t, a) = a exp(growth t).

    Offspring start with ``offspring_factor`` times the parent's current mass.
    ``rate_factor(mass)`` in [0, 1] thins branching as for ``AgeFlow``.
    """

    growth: float = 0.0
    offspring_factor: float = 1.0
    rate_factor: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if not self.offspring_factor > 0:
            raise ValidationError("mass factor must be positive")
        if not math.isfinite(self.growth):
            raise ValidationError("mass growth must be finite")

    def g(self, t, a0):
        return a0 * math.exp(self.growth * t)


@dataclass(frozen=True)
class MotionGenerator:
    qmatrix: np.ndarray
    flows: tuple = ()

    def __post_init__(self):
        q = _frozen(self.qmatrix)
        object.__setattr__(self, "qmatrix", q)
        object.__setattr__(self, "flows", tuple(self.flows))
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValidationError("q-matrix must be square")
        if not np.all(np.isfinite(q)):
            raise ValidationError("q-matrix entries must be finite")
        off = q - np.diag(np.diag(q))
        if np.any(off < 0):
            raise ValidationError("q-matrix off-diagonal entries must be non-negative")
        scale = np.maximum(1.0, np.abs(q).max(axis=1))
        if np.any(np.abs(q.sum(axis=1)) > ROW_SUM_TOL * scale):
            raise ValidationError("q-matrix rows must sum to zero")
        kinds = [type(fl) for fl in self.flows]
        if len(set(kinds)) != len(kinds):
            raise ValidationError("at most one flow rule of each kind")

    @classmethod
    def still(cls, n, flows=()):
        return cls(np.zeros((n, n)), flows)

    @property
    def n_sites(self):
        return self.qmatrix.shape[0]

    def flow(self, kind):
        for fl in self.flows:
            if isinstance(fl, kind):
                return fl
        return None


# -- mechanisms ---------------------------------------------------------------


@dataclass(frozen=True)
class LocalMechanism:
    """Per-site drift ``b``, diffusion ``c`` and jump atoms ``(u, m)``."""

    b: np.ndarray
    c: np.ndarray
    atoms: tuple = ()

    def __post_init__(self):
        b, c = _frozen(self.b), _frozen(self.c)
        if b.ndim != 1 or b.shape != c.shape:
            raise ValidationError("b and c must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise ValidationError("b and c must be finite")
        if np.any(c < 0):
            raise ValidationError("diffusion coefficient c must be non-negative")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "atoms", _freeze_atoms(self.atoms, b.shape[0], "local jump measure"))

    @classmethod
    def uniform(cls, n, b=0.0, c=0.0, atoms=()):
        return cls(np.full(n, float(b)), np.full(n, float(c)), tuple(tuple(atoms) for _ in range(n)))

    @property
    def n_sites(self):
        return self.b.shape[0]

    def shifted(self, db):
        """Return the mechanism phi(z) + db * z."""
        return LocalMechanism(self.b + np.broadcast_to(db, self.b.shape), self.c, self.atoms)

    def scaled(self, factor):
        """Return factor * phi for a scalar factor >= 0."""
        if factor < 0:
            raise ValidationError("scale factor must be non-negative")
        atoms = tuple(tuple((u, factor * m) for u, m in site if factor * m > 0) for site in self.atoms)
        return LocalMechanism(factor * self.b, factor * self.c, atoms)


@dataclass(frozen=True)
class MixtureComponent:
    """One displacement law of the non-local mixture.

    ``pi`` is the offspring location distribution; ``d`` the deterministic
    part and ``atoms`` the ``(u, n)`` count atoms.
    """

    weight: float
    pi: np.ndarray
    d: float = 0.0
    atoms: tuple = ()

    def __post_init__(self):
        pi = _frozen(self.pi)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "d", float(self.d))
        object.__setattr__(self, "atoms", _freeze_atoms([self.atoms], 1, "count measure")[0])
        if self.weight < 0:
            raise ValidationError("mixture weight must be non-negative")
        if pi.ndim != 1 or np.any(pi < 0) or abs(pi.sum() - 1.0) > WEIGHT_TOL:
            raise ValidationError("displacement distribution must be a probability vector")
        if not 0.0 <= self.d <= 1.0:
            raise ValidationError("deterministic part d must lie in [0, 1]")
        if self.mean > 1.0 + WEIGHT_TOL:
            raise ValidationError(f"subcriticality violated: d + sum u n = {self.mean} > 1")

    @property
    def mean(self):
        return self.d + math.fsum(u * n for u, n in self.atoms)


@dataclass(frozen=True)
class NonlocalMechanism:
    beta: np.ndarray
    mixtures: tuple

    def __post_init__(self):
        beta = _frozen(self.beta)
        object.__setattr__(self, "beta", beta)
        mixtures = tuple(tuple(site) for site in self.mixtures)
        object.__setattr__(self, "mixtures", mixtures)
        n = beta.shape[0]
        if beta.ndim != 1 or np.any(beta < 0) or not np.all(np.isfinite(beta)):
            raise ValidationError("beta must be a finite non-negative 1-d array")
        if len(mixtures) != n:
            raise ValidationError("need one mixture per site")
        for x, comps in enumerate(mixtures):
            if not comps:
                raise ValidationError(f"site {x} has an empty mixture")
            for comp in comps:
                if comp.pi.shape[0] != n:
                    raise ValidationError(f"site {x}: displacement law has wrong length")
            total = math.fsum(comp.weight for comp in comps)
            if abs(total - 1.0) > WEIGHT_TOL:
                raise ValidationError(f"site {x}: mixture weights sum to {total}, not 1")

    @classmethod
    def none(cls, n):
        """No non-local branching: beta = 0, identity displacement."""
        return cls(np.zeros(n), tuple((MixtureComponent(1.0, np.eye(n)[x], d=1.0),) for x in range(n)))

    @classmethod
    def single(cls, beta, pis, d=1.0, atoms=()):
        """One deterministic displacement law per site (the G = delta_pi case)."""
        beta = np.asarray(beta, dtype=float)
        n = beta.shape[0]
        pis = np.asarray(pis, dtype=float)
        d = np.broadcast_to(np.asarray(d, dtype=float), (n,))
        per_site = len(atoms) > 0 and (len(atoms[0]) == 0 or isinstance(atoms[0][0], (tuple, list, np.ndarray)))
        if atoms and not per_site:
            atoms = tuple(tuple(atoms) for _ in range(n))
        atoms = atoms or tuple(() for _ in range(n))
        return cls(beta, tuple((MixtureComponent(1.0, pis[x], float(d[x]), atoms[x]),) for x in range(n)))

    @property
    def n_sites(self):
        return self.beta.shape[0]


@dataclass(frozen=True)
class LimitSystemSpec:
    """Complete description of a non-local branching superprocess on a finite space."""

    space: SiteSpace
    motion: MotionGenerator
    local: LocalMechanism
    nonlocal_: NonlocalMechanism
    rebirth: bool = False

    def __post_init__(self):
        n = len(self.space)
        for name, part in (("motion", self.motion), ("local", self.local), ("nonlocal", self.nonlocal_)):
            if part.n_sites != n:
                raise ValidationError(f"{name} is defined on {part.n_sites} sites, space has {n}")
        if self.rebirth:
            forced = rebirth_local(self.nonlocal_.beta)
            if not (
                np.array_equal(self.local.b, forced.b)
                and np.array_equal(self.local.c, forced.c)
                and all(len(a) == 0 for a in self.local.atoms)
            ):
                raise ValidationError("rebirth systems require the local mechanism b = -beta, c = 0, no atoms")

    @property
    def n_sites(self):
        return len(self.space)

    @property
    def age_config(self):
        return self.motion.flow(AgeFlow)

    @property
    def mass_config(self):
        return self.motion.flow(MassFlow)

    @property
    def has_flows(self):
        return bool(self.motion.flows)


def rebirth_local(beta):
    beta = np.asarray(beta, dtype=float)
    return LocalMechanism(-beta, np.zeros_like(beta), ())


# -- evaluation ---------------------------------------------------------------


def _check_site(site, n):
    if isinstance(site, (bool, np.bool_)) or not isinstance(site, (int, np.integer)) or not 0 <= site < n:
        raise DomainError(f"unknown site {site!r}")
    return int(site)


def eval_phi(local: LocalMechanism, site, z) -> float:
    x = _check_site(site, local.n_sites)
    z = float(z)
    if not z >= 0:
        raise DomainError(f"phi needs z >= 0, got {z}")
    val = local.b[x] * z + local.c[x] * (z * z)
    for u, m in local.atoms[x]:
        val += m * (math.expm1(-z * u) + z * u)
    return float(val)


def _check_f(f, n):
    f = np.asarray(f, dtype=float)
    if f.shape != (n,):
        raise DomainError(f"test function must have {n} values")
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise DomainError("test function must be finite and non-negative")
    return f


def _component_zeta(comp, p):
    val = comp.d * p
    for u, n in comp.atoms:
        val += n * -math.expm1(-u * p)
    return val


def eval_zeta(nl: NonlocalMechanism, site, f) -> float:
    x = _check_site(site, nl.n_sites)
    f = _check_f(f, nl.n_sites)
    return float(math.fsum(comp.weight * _component_zeta(comp, float(comp.pi @ f)) for comp in nl.mixtures[x]))


def eval_psi(nl: NonlocalMechanism, site, f) -> float:
    x = _check_site(site, nl.n_sites)
    f = _check_f(f, nl.n_sites)
    return float(nl.beta[x] * (f[x] - eval_zeta(nl, x, f)))


def eval_mean_kernel(nl: NonlocalMechanism, site, f) -> float:
    """Linearisation of zeta at zero: sum_r w_r (d_r + sum_j u_rj n_rj) pi_r(f)."""
    x = _check_site(site, nl.n_sites)
    f = _check_f(f, nl.n_sites)
    return float(math.fsum(comp.weight * comp.mean * float(comp.pi @ f) for comp in nl.mixtures[x]))


def mean_kernel_matrix(nl: NonlocalMechanism) -> np.ndarray:
    n = nl.n_sites
    m = np.zeros((n, n))
    for x, comps in enumerate(nl.mixtures):
        for comp in comps:
            m[x] += comp.weight * comp.mean * comp.pi
    return m


# -- particle laws ------------------------------------------------------------


@dataclass(frozen=True)
class Outcome:
    """One branching outcome: at ``rate``, produce a count then place it.

    ``kind`` is FIXED (``param`` offspring) or POISSON (mean ``param``);
    ``place`` is AT_PARENT or an index into ``ParticleLaws.pis``.
    """

    rate: float
    kind: int
    param: float
    place: int = AT_PARENT


@dataclass(frozen=True)
class NonlocalLaw:
    """h_k mixture of one displacement component at one site."""

    weight: float
    pi_index: int
    none: float
    d: float
    atoms: tuple  # (u, n) pairs; count ~ Poisson(k u) with probability n / k


@dataclass(frozen=True)
class ParticleLaws:
    k: int
    n_sites: int
    local: tuple  # per site: tuple of Outcome (placed at the parent site)
    nonlocal_: tuple  # per site: tuple of NonlocalLaw
    beta: np.ndarray
    pis: tuple
    rebirth: bool = False
    outcomes: tuple = field(default=(), repr=False)

    @property
    def alpha(self):
        return np.array([math.fsum(o.rate for o in site) for site in self.local])

    @property
    def gamma(self):
        return np.array([math.fsum(o.rate for o in site) for site in self.outcomes])

    def local_pmf(self, site, tail=1e-16):
        """Offspring pmf of local branching at ``site`` (empty law -> point mass at 1)."""
        outs = self.local[site]
        total = math.fsum(o.rate for o in outs)
        if total == 0:
            return np.array([0.0, 1.0])
        return _mixture_pmf([(o.rate / total, o.kind, o.param) for o in outs], tail)

    def nonlocal_pmf(self, site, component, tail=1e-16):
        law = self.nonlocal_[site][component]
        parts = [(law.none, FIXED, 0), (law.d, FIXED, 1)]
        parts += [(n / self.k, POISSON, self.k * u) for u, n in law.atoms]
        return _mixture_pmf(parts, tail)


def _poisson_pmf(lam, n_max):
    i = np.arange(n_max + 1)
    logp = i * math.log(lam) - lam - np.array([math.lgamma(v + 1) for v in i]) if lam > 0 else None
    if logp is None:
        out = np.zeros(n_max + 1)
        out[0] = 1.0
        return out
    return np.exp(logp)


def _mixture_pmf(parts, tail):
    n_max = 1
    for _, kind, param in parts:
        if kind == FIXED:
            n_max = max(n_max, int(param))
        else:
            n_max = max(n_max, int(param + 12 * math.sqrt(param) + 40))
    pmf = np.zeros(n_max + 1)
    for w, kind, param in parts:
        if w == 0:
            continue
        if kind == FIXED:
            pmf[int(param)] += w
        else:
            pmf += w * _poisson_pmf(param, n_max)
    return pmf


def k_min(spec: LimitSystemSpec) -> int:
    """Smallest density making every construction weight non-negative."""
    bound = 1.0
    for comps in spec.nonlocal_.mixtures:
        for comp in comps:
            total_n = math.fsum(n for _, n in comp.atoms)
            if total_n > 0:
                slack = 1.0 - comp.d
                if slack <= 0:
                    return math.inf
                bound = max(bound, total_n / slack)
    if not spec.rebirth:
        for site in spec.local.atoms:
            for u, _ in site:
                bound = max(bound, 1.0 / u)
    return int(math.ceil(bound - 1e-12))


def build_particle_laws(spec: LimitSystemSpec, k: int) -> ParticleLaws:
    """Particle-level branching laws at density ``k`` converging to ``spec``.

    Local part (skipped for rebirth systems, whose death term is compensated
    by the retained parent):

    * diffusion c: binary splitting, 0 or 2 offspring each at rate k c;
    * drift b > 0: pure death at rate b;
    * drift b < 0: sure binary splitting at rate |b| (adds |b| z^2 / k);
    * atom (u, m): Poisson(k u) offspring at rate m / k plus pure death at
      rate m (u - 1/k), which reproduces the atom's term of phi exactly.

    Non-local part: at rate beta pick a mixture component, then no offspring
    with probability 1 - d - sum n / k, one offspring with probability d and
    Poisson(k u_j) offspring with probability n_j / k.  This is the h_k
    generating function exp-construction, and zeta_k equals zeta exactly.
    """
    if isinstance(k, bool) or int(k) != k or k < 1:
        raise DomainError("density k must be a positive integer")
    k = int(k)
    need = k_min(spec)
    if k < need:
        raise DensityTooSmall(
            f"density k={k} is below k_min={need}: construction weights would be negative "
            "(no-offspring probability 1 - d - sum(n)/k or atom death rate m(u - 1/k))",
            constraint="no-offspring probability 1 - d - sum(n)/k >= 0 and m(u - 1/k) >= 0",
            k_min=need,
        )
    n = spec.n_sites
    loc = spec.local
    local = []
    for x in range(n):
        outs = []
        if not spec.rebirth:
            if loc.c[x] > 0:
                outs.append(Outcome(k * loc.c[x], FIXED, 0))
                outs.append(Outcome(k * loc.c[x], FIXED, 2))
            if loc.b[x] > 0:
                outs.append(Outcome(loc.b[x], FIXED, 0))
            elif loc.b[x] < 0:
                outs.append(Outcome(-loc.b[x], FIXED, 2))
            for u, m in loc.atoms[x]:
                outs.append(Outcome(m / k, POISSON, k * u))
                death = m * (u - 1.0 / k)
                if death > 0:
                    outs.append(Outcome(death, FIXED, 0))
        local.append(tuple(outs))

    pis, pi_index = [], {}
    nonlocal_ = []
    outcomes = []
    for x in range(n):
        laws = []
        beta = spec.nonlocal_.beta[x]
        outs = list(local[x])
        for comp in spec.nonlocal_.mixtures[x]:
            key = comp.pi.tobytes()
            if key not in pi_index:
                pi_index[key] = len(pis)
                pis.append(comp.pi)
            idx = pi_index[key]
            total_n = math.fsum(nn for _, nn in comp.atoms)
            none = 1.0 - comp.d - total_n / k
            if none < 0:
                if none < -1e-12:
                    raise DensityTooSmall(
                        f"site {x}: no-offspring probability {none} < 0 at k={k}",
                        constraint="1 - d - sum(n)/k >= 0",
                        k_min=need,
                    )
                none = 0.0
            laws.append(NonlocalLaw(comp.weight, idx, none, comp.d, comp.atoms))
            if beta > 0 and comp.weight > 0:
                rate = beta * comp.weight
                if none > 0:
                    outs.append(Outcome(rate * none, FIXED, 0, idx))
                if comp.d > 0:
                    outs.append(Outcome(rate * comp.d, FIXED, 1, idx))
                for u, nn in comp.atoms:
                    outs.append(Outcome(rate * nn / k, POISSON, k * u, idx))
        nonlocal_.append(tuple(laws))
        outcomes.append(tuple(outs))
    return ParticleLaws(
        k=k,
        n_sites=n,
        local=tuple(local),
        nonlocal_=tuple(nonlocal_),
        beta=_frozen(spec.nonlocal_.beta),
        pis=tuple(_frozen(p) for p in pis),
        rebirth=spec.rebirth,
        outcomes=tuple(outcomes),
    )


def eval_phi_k(laws: ParticleLaws, site, z) -> float:
    """k alpha_k [g_k(1 - z/k) - (1 - z/k)] from the stored offspring laws.

    Fixed-count outcomes are expanded in w = z/k through factorial moments so
    that exact cancellations (such as binary splitting, which gives c z^2)
    survive in floating point.
    """
    x = _check_site(site, laws.n_sites)
    k = laws.k
    z = float(z)
    if not 0.0 <= z <= k:
        raise DomainError(f"phi_k needs 0 <= z <= k={k}, got {z}")
    w = z / k
    linear = 0.0
    moments = {}
    poisson = 0.0
    for o in laws.local[x]:
        if o.kind == FIXED:
            cnt = int(o.param)
            linear += o.rate * (1 - cnt)
            for j in range(2, cnt + 1):
                moments[j] = moments.get(j, 0.0) + o.rate * math.comb(cnt, j)
        else:
            lam = o.param
            linear += o.rate * (1.0 - lam)
            poisson += (k * o.rate) * (math.expm1(-lam * w) + lam * w)
    val = linear * z
    for j in sorted(moments):
        coeff = moments[j] / k ** (j - 1)
        val += (-1) ** j * coeff * (z * z if j == 2 else z**j)
    return float(val + poisson)


def eval_zeta_k(laws: ParticleLaws, site, f) -> float:
    """sum_r w_r k [1 - h_k(x, pi_r, 1 - pi_r(f)/k)] from the stored mixture."""
    x = _check_site(site, laws.n_sites)
    f = _check_f(f, laws.n_sites)
    k = laws.k
    if f.max(initial=0.0) > k:
        raise DomainError(f"zeta_k needs ||f|| <= k={k}")
    terms = []
    for law in laws.nonlocal_[x]:
        w = float(laws.pis[law.pi_index] @ f) / k
        val = (k * law.d) * w
        for u, n in law.atoms:
            val += (k * (n / k)) * -math.expm1(-(k * u) * w)
        terms.append(law.weight * val)
    return float(math.fsum(terms))


# -- vectorised forms used by the solvers --------------------------------------


class MechanismArrays:
    """Padded array views of a spec's mechanisms for vectorised evaluation."""

    def __init__(self, local: LocalMechanism, nl: NonlocalMechanism):
        n = local.n_sites
        self.n = n
        self.b = np.asarray(local.b)
        self.c = np.asarray(local.c)
        ja = max((len(a) for a in local.atoms), default=0)
        self.lu = np.zeros((n, ja))
        self.lm = np.zeros((n, ja))
        for x, atoms in enumerate(local.atoms):
            for j, (u, m) in enumerate(atoms):
                self.lu[x, j], self.lm[x, j] = u, m
        self.beta = np.asarray(nl.beta)
        comps = [(x, comp) for x, cs in enumerate(nl.mixtures) for comp in cs]
        nc = len(comps)
        jn = max((len(comp.atoms) for _, comp in comps), default=0)
        self.pi = np.zeros((nc, n))
        self.d = np.zeros(nc)
        self.nu = np.zeros((nc, jn))
        self.nn = np.zeros((nc, jn))
        self.assign = np.zeros((n, nc))
        for r, (x, comp) in enumerate(comps):
            self.pi[r] = comp.pi
            self.d[r] = comp.d
            self.assign[x, r] = comp.weight
            for j, (u, nn) in enumerate(comp.atoms):
                self.nu[r, j], self.nn[r, j] = u, nn
        self.mean = mean_kernel_matrix(nl)
        self.has_nonlocal = bool(np.any(self.beta > 0))

    def phi(self, v):
        out = self.b * v + self.c * (v * v)
        if self.lu.shape[1]:
            uv = self.lu * v[:, None]
            out = out + (self.lm * (np.expm1(-uv) + uv)).sum(axis=1)
        return out

    def zeta(self, v):
        p = self.pi @ v
        comp = self.d * p
        if self.nu.shape[1]:
            comp = comp + (self.nn * -np.expm1(-self.nu * p[:, None])).sum(axis=1)
        return self.assign @ comp

    def psi(self, v):
        if not self.has_nonlocal:
            return np.zeros_like(v)
        return self.beta * (v - self.zeta(v))


def spec_arrays(spec: LimitSystemSpec) -> MechanismArrays:
    return MechanismArrays(spec.local, spec.nonlocal_)


def norm_b(spec: LimitSystemSpec) -> float:
    return float(np.max(np.abs(spec.local.b)))


def simple_spec(
    qmatrix: Sequence[Sequence[float]] | np.ndarray,
    b=0.0,
    c=0.0,
    atoms=(),
    beta=0.0,
    pis=None,
    d=1.0,
    count_atoms=(),
    rebirth=False,
    labels=None,
    flows=(),
):
    """Convenience constructor for uniform-coefficient specs used by tests and configs."""
    q = np.asarray(qmatrix, dtype=float)
    n = q.shape[0]
    space = SiteSpace(tuple(labels) if labels is not None else tuple(range(n)))
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (n,)).copy()
    if pis is None:
        pis = np.eye(n)
    nonlocal_ = NonlocalMechanism.single(beta, pis, d=d, atoms=count_atoms)
    if rebirth:
        local = rebirth_local(beta)
    else:
        bb = np.broadcast_to(np.asarray(b, dtype=float), (n,))
        cc = np.broadcast_to(np.asarray(c, dtype=float), (n,))
        local = LocalMechanism(bb, cc, tuple(tuple(atoms) for _ in range(n)))
    return LimitSystemSpec(space, MotionGenerator(q, flows), local, nonlocal_, rebirth=rebirth)
