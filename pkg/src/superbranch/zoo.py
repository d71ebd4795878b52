"""Named model families built on the general spec.

Each constructor returns a validated ``LimitSystemSpec`` (or a small bundle
around one) and the registry at the bottom maps model names to
constructors and their parameter schemas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cumulant import AgeGrid, SolverConfig, solve_age_renewal, solve_controlled_immigration
from .errors import DomainError, GuardExceeded, ValidationError
from .mechanisms import (
    FIXED,
    AgeFlow,
    LimitSystemSpec,
    LocalMechanism,
    MassFlow,
    MixtureComponent,
    MotionGenerator,
    NonlocalMechanism,
    SiteSpace,
    build_particle_laws,
    rebirth_local,
)
from .particles import Population, kernel_tables
from .rng import RngStream, Xoshiro256


def _square(q, what):
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValidationError(f"{what} must be a square matrix")
    return q


# -- multitype ----------------------------------------------------------------


def make_ktype(motions, locals_, betas, transitions, zetas=None, base=None) -> LimitSystemSpec:
    """Flattened multitype spec on E x {0..kappa-1}.

    Motion is block diagonal in types.  Non-local branching at (x, i) keeps
    the position and draws the offspring type from ``transitions[i]``;
    ``zetas[i] = (d, atoms)`` is the count mechanism of type i (default d = 1).
    """
    kappa = len(motions)
    if not (len(locals_) == len(betas) == kappa):
        raise ValidationError("need one motion, local mechanism and beta per type")
    if kappa < 1:
        raise ValidationError("need at least one type")
    motions = [_square(q, "motion") for q in motions]
    n = motions[0].shape[0]
    if any(q.shape != (n, n) for q in motions) or any(loc.n_sites != n for loc in locals_):
        raise ValidationError("every type must live on the same base space")
    trans = np.asarray(transitions, dtype=float)
    if trans.shape != (kappa, kappa):
        raise ValidationError(f"type transitions must be {kappa}x{kappa}")
    zetas = zetas or [(1.0, ())] * kappa
    if len(zetas) != kappa:
        raise ValidationError("need one count mechanism per type")
    betas = [np.broadcast_to(np.asarray(b, dtype=float), (n,)) for b in betas]

    size = n * kappa
    q = np.zeros((size, size))
    for i, qi in enumerate(motions):
        q[i * n : (i + 1) * n, i * n : (i + 1) * n] = qi
    b = np.concatenate([loc.b for loc in locals_])
    c = np.concatenate([loc.c for loc in locals_])
    atoms = tuple(a for loc in locals_ for a in loc.atoms)
    beta = np.concatenate(betas)
    mixtures = []
    for i in range(kappa):
        d, count_atoms = zetas[i]
        for x in range(n):
            pi = np.zeros(size)
            pi[x + n * np.arange(kappa)] = trans[i]
            mixtures.append((MixtureComponent(1.0, pi, d, count_atoms),))
    base = tuple(base) if base is not None else tuple(range(n))
    space = SiteSpace.product(base, range(kappa)) if kappa > 1 else SiteSpace(base)
    return LimitSystemSpec(space, MotionGenerator(q), LocalMechanism(b, c, atoms), NonlocalMechanism(beta, tuple(mixtures)))


# -- controlled immigration ---------------------------------------------------


@dataclass(frozen=True)
class ControlledImmigration:
    """Solver pair (spec1, spec2) and the flattened two-type simulation spec."""

    spec1: LimitSystemSpec
    spec2: LimitSystemSpec
    flat: LimitSystemSpec

    @property
    def n_base(self):
        return self.spec1.n_sites

    def solve(self, f1, f2, horizon, config: Optional[SolverConfig] = None):
        return solve_controlled_immigration(self.spec1, self.spec2, f1, f2, horizon, config)

    def flat_function(self, f1, f2):
        return np.concatenate([np.asarray(f1, dtype=float), np.asarray(f2, dtype=float)])


def make_controlled_immigration(motion1, motion2, local1: LocalMechanism, local2: LocalMechanism) -> ControlledImmigration:
    """Population 2 immigrates at a rate driven by population 1's mass.

    The simulation spec is a two-type system: type 1 carries phi1(z) - z
    locally and, at rate 1, turns into a single type-2 particle at the same
    site; type 2 branches locally with phi2.
    """
    q1, q2 = _square(motion1, "motion1"), _square(motion2, "motion2")
    n = q1.shape[0]
    if q2.shape != (n, n) or local1.n_sites != n or local2.n_sites != n:
        raise ValidationError("both populations must live on the same base space")
    spec1 = LimitSystemSpec(SiteSpace.range(n), MotionGenerator(q1), local1, NonlocalMechanism.none(n))
    spec2 = LimitSystemSpec(SiteSpace.range(n), MotionGenerator(q2), local2, NonlocalMechanism.none(n))
    flat = make_ktype(
        [q1, q2],
        [local1.shifted(-1.0), local2],
        [np.ones(n), np.zeros(n)],
        [[0.0, 1.0], [0.0, 1.0]],
    )
    return ControlledImmigration(spec1, spec2, flat)


# -- rebirth ------------------------------------------------------------------


def make_rebirth(motion, beta, pis, d=1.0, atoms=(), local: Optional[LocalMechanism] = None) -> LimitSystemSpec:
    """Rebirth system: the parent survives each non-local branching.

    The local mechanism is forced to -beta z; a caller-supplied ``local``
    must equal that reduction.
    """
    q = _square(motion, "motion")
    n = q.shape[0]
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (n,)).copy()
    nl = NonlocalMechanism.single(beta, pis, d=d, atoms=atoms)
    return LimitSystemSpec(
        SiteSpace.range(n), MotionGenerator(q), local if local is not None else rebirth_local(beta), nl, rebirth=True
    )


# -- mass structure -----------------------------------------------------------


def make_mass_structured(
    motion,
    mass_factor,
    growth,
    local: LocalMechanism,
    nonlocal_: Optional[NonlocalMechanism] = None,
    rate_factor=None,
) -> LimitSystemSpec:
    """Particles carry a mass that grows as a exp(growth t); offspring get parent mass * mass_factor."""
    if not mass_factor > 0:
        raise ValidationError("mass factor must be positive")
    q = _square(motion, "motion")
    n = q.shape[0]
    flow = MassFlow(float(growth), float(mass_factor), rate_factor)
    return LimitSystemSpec(
        SiteSpace.range(n), MotionGenerator(q, (flow,)), local, nonlocal_ or NonlocalMechanism.none(n)
    )


def aggregate_mass(pop: Population, n_sites) -> np.ndarray:
    """Y(x) = sum over particles at x of weight * mass.

    Particles are grouped by (site, mass anchor); each group contributes
    g(t, anchor) * (weight * count), so a population started from a single
    mass a gives exactly g(t, a) * X_t.
    """
    out = np.zeros(n_sites)
    if len(pop) == 0:
        return out
    if pop.mass_anchor is None:
        raise DomainError("population has no mass coordinate")
    keys, counts = np.unique(np.column_stack([pop.site.astype(float), pop.mass_anchor]), axis=0, return_counts=True)
    scale = math.exp(pop.growth * pop.time)
    for (x, anchor), cnt in zip(keys, counts):
        out[int(x)] += (anchor * scale) * (pop.weight * float(cnt))
    return out


# -- multilevel ---------------------------------------------------------------


EMPIRICAL = "empirical-sample"
RESTRICTION = "restriction"


@dataclass
class Level2Particle:
    """A level-2 individual: an island and the level-1 counts living on it."""

    island: int
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValidationError("sub-population counts must be non-negative")
        if self.counts.sum() == 0:
            raise ValidationError("sub-population must be non-empty")


@dataclass(frozen=True)
class MultilevelSpec:
    """Two-level branching system.

    Level-1 individuals branch and move on the sub-sites S according to
    ``level1`` at density ``k1``; a level-2 individual dies when its
    sub-population dies out.  Level-2 individuals migrate between islands
    with ``island_motion`` and branch at rate ``beta2``, producing
    ``n_offspring`` children whose sub-populations come from the mechanism.
    """

    island_motion: np.ndarray
    level1: LimitSystemSpec
    k1: int
    beta2: float
    mechanism: str
    sample_pmf: Optional[np.ndarray] = None  # law of N for the empirical-sample mechanism
    subset: Optional[np.ndarray] = None  # membership mask of B for the restriction mechanism
    n_offspring: int = 1

    @property
    def n_islands(self):
        return self.island_motion.shape[0]

    @property
    def n_sub(self):
        return self.level1.n_sites


def critical_binary_level1(sub_motion, c=0.5):
    """Default level-1 dynamics: critical binary branching with diffusion c."""
    q = _square(sub_motion, "sub-site motion")
    n = q.shape[0]
    return LimitSystemSpec(SiteSpace.range(n), MotionGenerator(q), LocalMechanism.uniform(n, 0.0, c), NonlocalMechanism.none(n))


def make_multilevel(
    island_motion,
    sub_motion,
    beta2,
    mechanism,
    sample_pmf=None,
    subset=None,
    level1: Optional[LimitSystemSpec] = None,
    k1=10,
    n_offspring=1,
) -> MultilevelSpec:
    q = _square(island_motion, "island motion")
    MotionGenerator(q)  # validates the q-matrix
    level1 = level1 or critical_binary_level1(sub_motion)
    if level1.has_flows or level1.rebirth:
        raise ValidationError("level-1 dynamics must be a plain count system")
    if not beta2 >= 0:
        raise ValidationError("level-2 branching rate must be non-negative")
    if isinstance(n_offspring, bool) or int(n_offspring) != n_offspring or n_offspring < 0:
        raise ValidationError("level-2 offspring count must be a non-negative integer")
    if mechanism == EMPIRICAL:
        pmf = np.asarray(sample_pmf if sample_pmf is not None else [0.0, 1.0], dtype=float)
        if pmf.ndim != 1 or np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-12 or pmf[0] > 0:
            raise ValidationError("sample-size law must be a pmf on {1, 2, ...}")
        pmf.setflags(write=False)
        sample_pmf, subset = pmf, None
    elif mechanism == RESTRICTION:
        mask = np.asarray(subset, dtype=bool)
        if mask.shape != (level1.n_sites,):
            raise ValidationError("restriction subset needs one flag per sub-site")
        mask.setflags(write=False)
        sample_pmf, subset = None, mask
    else:
        raise ValidationError(f"unknown level-2 mechanism {mechanism!r}")
    build_particle_laws(level1, k1)  # fails early on an invalid density
    return MultilevelSpec(q, level1, int(k1), float(beta2), mechanism, sample_pmf, subset, int(n_offspring))


def level2_offspring(counts, spec: MultilevelSpec, stream) -> list:
    """Sub-populations of the children of a level-2 branching.

    Empirical sample: draw N from the sample-size law and N locations i.i.d.
    from the normalised parent measure, then spread the parent's total count
    over those locations by multinomial placement, so every child has
    exactly the parent's total count.  Restriction: the parent counts on B;
    an empty restriction yields no children.
    """
    gen = stream if isinstance(stream, Xoshiro256) else stream.generator()
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    children = []
    for _ in range(spec.n_offspring):
        if spec.mechanism == RESTRICTION:
            child = np.where(spec.subset, counts, 0)
            if child.sum() == 0:
                return []
            children.append(child)
            continue
        cdf = np.cumsum(spec.sample_pmf)
        n_draw = gen.categorical(cdf, cdf.shape[0])
        site_cdf = np.cumsum(counts.astype(float))
        locations = [gen.categorical(site_cdf, site_cdf.shape[0]) for _ in range(n_draw)]
        child = np.zeros_like(counts)
        for _ in range(total):
            child[locations[gen.below(n_draw)]] += 1
        children.append(child)
    return children


def aggregate_level(particles: Sequence[Level2Particle], n_islands, n_sub, weight=1.0) -> np.ndarray:
    """Flattened measure on islands x sub-sites: weight * counts summed over level-2 individuals."""
    out = np.zeros((n_islands, n_sub))
    for p in particles:
        out[p.island] += weight * p.counts
    return out


@dataclass
class MultilevelTrace:
    snapshots: list  # (time, list of Level2Particle)
    branch_events: int = 0
    suppressed: int = 0
    audit: list = field(default_factory=list)  # (parent counts, children) for the first branch events


def simulate_multilevel(
    spec: MultilevelSpec,
    initial: Sequence[Level2Particle],
    horizon,
    snapshot_times=(),
    stream=None,
    max_events=10**7,
    max_particles=10**5,
    audit=0,
) -> MultilevelTrace:
    """One trajectory of the two-level system (exact, event by event)."""
    gen = stream if isinstance(stream, Xoshiro256) else (stream or RngStream(0)).generator()
    laws = build_particle_laws(spec.level1, spec.k1)
    tab = kernel_tables(laws, spec.level1)
    srate, jrate = tab.site_rate, tab.jump_rate
    isl = spec.island_motion
    island_rate = np.array([isl[e].sum() - isl[e, e] for e in range(spec.n_islands)])
    island_off = isl - np.diag(np.diag(isl))
    island_cdf = [np.cumsum(row) for row in island_off]
    snaps = [float(s) for s in (snapshot_times or (horizon,))]
    particles = [Level2Particle(p.island, p.counts.copy()) for p in initial]
    trace = MultilevelTrace([])
    t, si, events = 0.0, 0, 0

    def level1_rate(p):
        return float(np.dot(p.counts, srate))

    while True:
        rates = np.array([level1_rate(p) + island_rate[p.island] + spec.beta2 for p in particles])
        total = float(rates.sum()) if particles else 0.0
        t_next = t + gen.exponential(total) if total > 0 else math.inf
        while si < len(snaps) and snaps[si] < t_next:
            trace.snapshots.append((snaps[si], [Level2Particle(p.island, p.counts.copy()) for p in particles]))
            si += 1
        if t_next > horizon:
            break
        if events >= max_events:
            raise GuardExceeded("multilevel simulation hit the event guard", trace, "events")
        t = t_next
        events += 1
        i = gen.categorical(np.cumsum(rates), len(particles))
        p = particles[i]
        u = gen.uniform() * rates[i]
        own = level1_rate(p)
        if u < own:
            # one level-1 event inside p
            x = gen.categorical(np.cumsum(p.counts * srate), p.counts.shape[0])
            if gen.uniform() * srate[x] < jrate[x] or tab.out_ptr[x + 1] == tab.out_ptr[x]:
                y = gen.categorical(tab.jump_cdf[x], int(tab.jump_len[x]))
                p.counts[x] -= 1
                p.counts[y] += 1
            else:
                start, stop = tab.out_ptr[x], tab.out_ptr[x + 1]
                o = start + gen.categorical(tab.out_cdf[start:stop], stop - start)
                cnt = int(tab.out_param[o]) if tab.out_kind[o] == FIXED else gen.poisson(tab.out_param[o])
                p.counts[x] -= 1
                place = tab.out_place[o]
                for _ in range(cnt):
                    y = x if place < 0 else gen.categorical(tab.pi_cdf[place], int(tab.pi_len[place]))
                    p.counts[y] += 1
            if p.counts.sum() == 0:
                particles.pop(i)  # extinct sub-population kills its carrier
        elif u < own + island_rate[p.island]:
            p.island = gen.categorical(island_cdf[p.island], spec.n_islands)
        else:
            children = level2_offspring(p.counts, spec, gen)
            trace.branch_events += 1
            if not children:
                trace.suppressed += 1
            if len(trace.audit) < audit:
                trace.audit.append((p.counts.copy(), [c.copy() for c in children]))
            particles.pop(i)
            particles.extend(Level2Particle(p.island, c) for c in children)
            if len(particles) > max_particles:
                raise GuardExceeded("multilevel simulation hit the population guard", trace, "population")
    return trace


# -- age reproduction ---------------------------------------------------------


@dataclass(frozen=True)
class AgeReproduction:
    """Single-site age-structured rebirth model and its renewal-equation solver."""

    spec: LimitSystemSpec
    rate: Callable
    d: float
    atoms: tuple
    lifetime: float

    def zeta(self, z):
        return self.d * z + math.fsum(n * -math.expm1(-u * z) for u, n in self.atoms)

    def renewal(self, f, horizon, step=1e-3, times=None) -> AgeGrid:
        return solve_age_renewal(self.rate, self.zeta, self.lifetime, f, horizon, step, times)

    def moment(self, f, horizon, step=1e-3, times=None) -> AgeGrid:
        mean = self.d + math.fsum(u * n for u, n in self.atoms)
        return solve_age_renewal(self.rate, lambda z: mean * z, self.lifetime, f, horizon, step, times)


def make_age_reproduction(beta, lifetime=math.inf, d=1.0, atoms=(), beta_max=None) -> AgeReproduction:
    """Particles age at unit speed, die at age ``lifetime`` and reproduce at rate beta(age).

    The parent survives each reproduction (rebirth) and its children start
    at age 0.  An age-dependent ``beta`` needs ``beta_max`` bounding it; the
    simulation thins a rate-``beta_max`` clock.
    """
    if not lifetime > 0:
        raise ValidationError("lifetime must be positive")
    if callable(beta):
        if beta_max is None:
            raise ValidationError("an age-dependent rate needs a bound beta_max")
        bound = float(beta_max)
        rate = beta
        factor = (lambda a: float(beta(a)) / bound) if bound > 0 else None
    else:
        bound = float(beta)
        if bound < 0:
            raise ValidationError("reproduction rate must be non-negative")
        rate = bound
        factor = None
    flow = AgeFlow(float(lifetime), factor)
    nl = NonlocalMechanism.single(np.array([bound]), np.ones((1, 1)), d=d, atoms=(tuple(atoms),))
    spec = LimitSystemSpec(SiteSpace.range(1), MotionGenerator(np.zeros((1, 1)), (flow,)), rebirth_local([bound]), nl, rebirth=True)
    return AgeReproduction(spec, rate, float(d), tuple(tuple(a) for a in atoms), float(lifetime))


# -- registry -----------------------------------------------------------------

_NUM = {"type": "number"}
_MATRIX = {"type": "array", "items": {"type": "array", "items": _NUM}}
_VECTOR = {"type": "array", "items": _NUM}
_ATOMS = {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}}
_LOCAL = {
    "type": "object",
    "properties": {"b": _VECTOR, "c": _VECTOR, "atoms": {"type": "array", "items": _ATOMS}},
    "required": ["b", "c"],
    "additionalProperties": False,
}


def _obj(props, required):
    return {"type": "object", "properties": props, "required": required, "additionalProperties": False}


def _local_from(params, n):
    atoms = params.get("atoms") or [[] for _ in range(n)]
    return LocalMechanism(params["b"], params["c"], tuple(tuple(tuple(a) for a in site) for site in atoms))


def _build_age(p):
    return make_age_reproduction(p["beta"], p.get("lifetime", math.inf), p.get("d", 1.0), tuple(map(tuple, p.get("atoms", []))))


def _build_controlled(p):
    n = len(p["motion1"])
    return make_controlled_immigration(p["motion1"], p["motion2"], _local_from(p["local1"], n), _local_from(p["local2"], n))


def _build_ktype(p):
    n = len(p["motions"][0])
    return make_ktype(
        p["motions"],
        [_local_from(loc, n) for loc in p["locals"]],
        p["betas"],
        p["transitions"],
        [(z.get("d", 1.0), tuple(map(tuple, z.get("atoms", [])))) for z in p["zetas"]] if "zetas" in p else None,
    )


def _build_mass(p):
    n = len(p["motion"])
    return make_mass_structured(p["motion"], p["mass_factor"], p["growth"], _local_from(p["local"], n))


def _build_multilevel(p):
    return make_multilevel(
        p["island_motion"],
        p["sub_motion"],
        p["beta2"],
        p["mechanism"],
        p.get("sample_pmf"),
        p.get("subset"),
        k1=p.get("k1", 10),
        n_offspring=p.get("n_offspring", 1),
    )


def _build_rebirth(p):
    return make_rebirth(p["motion"], p["beta"], p["pis"], p.get("d", 1.0), tuple(map(tuple, p.get("atoms", []))))


@dataclass(frozen=True)
class ModelEntry:
    name: str
    summary: str
    schema: dict
    build: Callable


MODELS = {
    e.name: e
    for e in sorted(
        [
            ModelEntry(
                "age-reproduction",
                "single-site aging particles with lifetime and rebirth reproduction",
                _obj({"beta": _NUM, "lifetime": _NUM, "d": _NUM, "atoms": _ATOMS}, ["beta"]),
                _build_age,
            ),
            ModelEntry(
                "controlled-immigration",
                "two populations, the first driving immigration of the second",
                _obj({"motion1": _MATRIX, "motion2": _MATRIX, "local1": _LOCAL, "local2": _LOCAL},
                     ["motion1", "motion2", "local1", "local2"]),
                _build_controlled,
            ),
            ModelEntry(
                "ktype",
                "finitely many types; non-local branching changes type at fixed position",
                _obj(
                    {
                        "motions": {"type": "array", "items": _MATRIX, "minItems": 1},
                        "locals": {"type": "array", "items": _LOCAL},
                        "betas": {"type": "array", "items": _VECTOR},
                        "transitions": _MATRIX,
                        "zetas": {"type": "array", "items": _obj({"d": _NUM, "atoms": _ATOMS}, [])},
                    },
                    ["motions", "locals", "betas", "transitions"],
                ),
                _build_ktype,
            ),
            ModelEntry(
                "mass-structured",
                "particles carry a deterministic exponentially growing mass",
                _obj({"motion": _MATRIX, "mass_factor": _NUM, "growth": _NUM, "local": _LOCAL},
                     ["motion", "mass_factor", "growth", "local"]),
                _build_mass,
            ),
            ModelEntry(
                "multilevel",
                "level-2 individuals each carrying a level-1 branching population",
                _obj(
                    {
                        "island_motion": _MATRIX,
                        "sub_motion": _MATRIX,
                        "beta2": _NUM,
                        "mechanism": {"enum": [EMPIRICAL, RESTRICTION]},
                        "sample_pmf": _VECTOR,
                        "subset": {"type": "array", "items": {"type": "boolean"}},
                        "k1": {"type": "integer", "minimum": 1},
                        "n_offspring": {"type": "integer", "minimum": 0},
                    },
                    ["island_motion", "sub_motion", "beta2", "mechanism"],
                ),
                _build_multilevel,
            ),
            ModelEntry(
                "rebirth",
                "non-local branching in which the parent survives",
                _obj({"motion": _MATRIX, "beta": _VECTOR, "pis": _MATRIX, "d": _NUM, "atoms": _ATOMS},
                     ["motion", "beta", "pis"]),
                _build_rebirth,
            ),
        ],
        key=lambda e: e.name,
    )
}


def model_names():
    return sorted(MODELS)


def build_model(name, params):
    try:
        entry = MODELS[name]
    except KeyError:
        raise ValidationError(f"unknown model {name!r}; known: {', '.join(model_names())}") from None
    return entry.build(params)
