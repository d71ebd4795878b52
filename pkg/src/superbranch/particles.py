"""Exact event-driven simulation of renormalised branching particle systems.

Two engines share the same laws and random streams:

* the count engine tracks only per-site particle counts and runs in the
  compiled kernel (or its pure-Python twin);
* the flow engine tracks individual particles with age and mass
  coordinates, lifetimes and rate thinning, and is pure Python.

``simulate`` picks the flow engine whenever ``spec`` declares a flow rule
or the initial population carries non-trivial particle coordinates.
"""

from __future__ import annotations

import heapq
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernel
from .errors import DomainError, GridError, GuardExceeded, InvariantViolation, ValidationError
from .mechanisms import FIXED, LimitSystemSpec, ParticleLaws, as_test_function
from .rng import RngStream, Xoshiro256
from .stats import ExperimentResult, summarize

# tolerance on a thinning factor before it counts as exceeding its dominating rate
THIN_SLACK = 1e-12


@dataclass(frozen=True)
class Particle:
    """One particle read out of a ``Population``."""

    id: int
    site: int
    birth_time: float
    age: Optional[float] = None
    mass: Optional[float] = None
    repro_count: int = 0


@dataclass
class Population:
    """Particles of mass ``weight`` each, stored column-wise.

    ``site`` and ``ids`` are always present.  ``birth_time``, ``mass_anchor``
    and ``repro_count`` are filled by the flow engine; a particle's mass at
    time t is ``mass_anchor * exp(growth * t)``, so every particle started
    from a common mass a carries exactly g(t, a).
    """

    site: np.ndarray
    weight: float
    time: float = 0.0
    ids: Optional[np.ndarray] = None
    birth_time: Optional[np.ndarray] = None
    mass_anchor: Optional[np.ndarray] = None
    repro_count: Optional[np.ndarray] = None
    growth: float = 0.0

    def __post_init__(self):
        self.site = np.asarray(self.site, dtype=np.int64)
        if not self.weight > 0:
            raise ValidationError("population weight must be positive")
        if self.ids is None:
            self.ids = np.arange(self.site.shape[0], dtype=np.int64)

    def __len__(self):
        return int(self.site.shape[0])

    @classmethod
    def from_counts(cls, counts, weight, time=0.0):
        counts = np.asarray(counts, dtype=np.int64)
        return cls(np.repeat(np.arange(counts.shape[0], dtype=np.int64), counts), weight, time)

    @property
    def has_coordinates(self):
        return self.birth_time is not None

    @property
    def age(self):
        return None if self.birth_time is None else self.time - self.birth_time

    @property
    def mass(self):
        if self.mass_anchor is None:
            return None
        return self.mass_anchor * math.exp(self.growth * self.time)

    @property
    def birth_mass(self):
        if self.mass_anchor is None:
            return None
        return self.mass_anchor * np.exp(self.growth * self.birth_time)

    def counts(self, n_sites):
        return np.bincount(self.site, minlength=n_sites).astype(np.int64)

    def measure(self, n_sites):
        """X(B) for every singleton B."""
        return self.weight * self.counts(n_sites)

    def integrate(self, f):
        """X(f) = weight * sum over particles of f(site)."""
        f = np.asarray(f, dtype=float)
        return _pair(self.weight, self.counts(f.shape[0]), f[:, None])[0]

    def particles(self):
        age, mass = self.age, self.mass
        for i in range(len(self)):
            yield Particle(
                int(self.ids[i]),
                int(self.site[i]),
                float(self.birth_time[i]) if self.birth_time is not None else 0.0,
                None if age is None else float(age[i]),
                None if mass is None else float(mass[i]),
                int(self.repro_count[i]) if self.repro_count is not None else 0,
            )


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    snapshot_times: tuple = ()
    max_events: int = 10**9
    max_population: int = 10**7
    event_log: int = 0  # number of leading events to record

    def __post_init__(self):
        snaps = tuple(float(s) for s in (self.snapshot_times or (self.horizon,)))
        object.__setattr__(self, "snapshot_times", snaps)
        if not (self.horizon >= 0 and math.isfinite(self.horizon)):
            raise ValidationError("horizon must be finite and non-negative")
        if any(b <= a for a, b in zip(snaps, snaps[1:])):
            raise ValidationError("snapshot times must be strictly increasing")
        if snaps and (snaps[0] < 0 or snaps[-1] > self.horizon):
            raise ValidationError("snapshot times must lie in [0, horizon]")
        if self.max_events < 1 or self.max_population < 1:
            raise ValidationError("guards must be positive")
        if self.event_log < 0:
            raise ValidationError("event log capacity must be non-negative")


@dataclass
class SimulationTrace:
    """Everything one run produced; ``status`` is a ``kernel.STATUS_*`` code."""

    snapshots: list
    status: int
    events: int
    t_final: float
    occupation: np.ndarray  # time-integrated particle counts per site
    births: np.ndarray  # non-local offspring placed at each site
    log_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_i: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))

    @property
    def truncated(self):
        return self.status != kernel.STATUS_OK


# -- kernel tables ----------------------------------------------------------


@dataclass(frozen=True)
class KernelTables:
    site_rate: np.ndarray
    jump_rate: np.ndarray
    jump_cdf: np.ndarray
    jump_len: np.ndarray
    out_ptr: np.ndarray
    out_cdf: np.ndarray
    out_kind: np.ndarray
    out_param: np.ndarray
    out_place: np.ndarray
    pi_cdf: np.ndarray
    pi_len: np.ndarray


def _cumulative_rows(rows, width):
    """Cumulative tables with trailing zero-weight entries trimmed off."""
    cdf = np.zeros((max(len(rows), 1), width))
    lengths = np.ones(max(len(rows), 1), dtype=np.int64)
    for i, row in enumerate(rows):
        row = np.asarray(row, dtype=float)
        nz = np.nonzero(row > 0)[0]
        if nz.size:
            n = int(nz[-1]) + 1
            cdf[i, :n] = np.cumsum(row[:n])
            lengths[i] = n
    return cdf, lengths


def kernel_tables(laws: ParticleLaws, spec: LimitSystemSpec) -> KernelTables:
    if laws.n_sites != spec.n_sites or laws.rebirth != spec.rebirth:
        raise ValidationError("particle laws were not built from this spec")
    n = spec.n_sites
    q = spec.motion.qmatrix
    jump_rate = np.array([q[x].sum() - q[x, x] for x in range(n)])
    off = q - np.diag(np.diag(q))
    jump_cdf, jump_len = _cumulative_rows(off, n)
    ptr = [0]
    cdf, kind, param, place = [], [], [], []
    for x in range(n):
        outs = [o for o in laws.outcomes[x] if o.rate > 0]
        cdf.extend(np.cumsum([o.rate for o in outs]).tolist())
        kind.extend(o.kind for o in outs)
        param.extend(float(o.param) for o in outs)
        place.extend(o.place for o in outs)
        ptr.append(len(cdf))
    gamma = np.array([cdf[ptr[x + 1] - 1] if ptr[x + 1] > ptr[x] else 0.0 for x in range(n)])
    pi_cdf, pi_len = _cumulative_rows(laws.pis, n)
    return KernelTables(
        site_rate=jump_rate + gamma,
        jump_rate=jump_rate,
        jump_cdf=jump_cdf,
        jump_len=jump_len,
        out_ptr=np.array(ptr, dtype=np.int64),
        out_cdf=np.array(cdf, dtype=float),
        out_kind=np.array(kind, dtype=np.int64),
        out_param=np.array(param, dtype=float),
        out_place=np.array(place, dtype=np.int64),
        pi_cdf=pi_cdf,
        pi_len=pi_len,
    )


# -- initial conditions -------------------------------------------------------


def _generator(stream):
    if isinstance(stream, Xoshiro256):
        return stream
    if isinstance(stream, RngStream):
        return stream.generator()
    raise TypeError("stream must be an RngStream or a Xoshiro256 generator")


def sample_poisson_initial(mu, k, stream, max_population=10**7, mass=None, age=0.0) -> Population:
    """Independent Poisson(k mu(x)) particles at each site, each of mass 1/k.

    ``mass`` (a scalar) equips particles with a mass coordinate and ``age``
    with a common starting age; both are only read by the flow engine.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1 or np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise DomainError("initial measure must be finite and non-negative")
    if isinstance(k, bool) or int(k) != k or k < 1:
        raise DomainError("density k must be a positive integer")
    intensity = k * float(mu.sum())
    if intensity > max_population:
        raise GuardExceeded(
            f"initial intensity {intensity} exceeds max_population={max_population}",
            partial=None,
            reason="population",
        )
    gen = _generator(stream)
    counts = np.array([gen.poisson(k * m) for m in mu], dtype=np.int64)
    if counts.sum() > max_population:
        raise GuardExceeded("initial population exceeds max_population", partial=None, reason="population")
    pop = Population.from_counts(counts, 1.0 / k)
    if mass is not None or age != 0.0:
        size = len(pop)
        pop.birth_time = np.full(size, -float(age))
        pop.repro_count = np.zeros(size, dtype=np.int64)
        if mass is not None:
            if not mass > 0:
                raise DomainError("initial mass must be positive")
            pop.mass_anchor = np.full(size, float(mass))
    return pop


# -- engines ------------------------------------------------------------------


def _check_density(laws, init):
    if not math.isclose(init.weight * laws.k, 1.0, rel_tol=1e-12):
        raise ValidationError(f"population weight {init.weight} does not match laws at k={laws.k}")


def simulate_trace(laws, spec, init: Population, config: SimConfig, stream, backend=None) -> SimulationTrace:
    """Run one trajectory and return snapshots plus diagnostics (never raises on guards)."""
    _check_density(laws, init)
    if init.time != 0.0:
        raise ValidationError("initial population must be at time 0")
    if spec.has_flows or init.has_coordinates:
        return _run_flows(laws, spec, init, config, _generator(stream))
    return _run_counts(laws, spec, init, config, _generator(stream), backend)


def simulate(laws, spec, init: Population, config: SimConfig, stream, backend=None) -> list:
    """Snapshots of one trajectory at ``config.snapshot_times``.

    Raises ``GuardExceeded`` (with the snapshots recorded so far on
    ``partial``) when an event or population guard trips.
    """
    trace = simulate_trace(laws, spec, init, config, stream, backend)
    if trace.truncated:
        reason = "events" if trace.status == kernel.STATUS_EVENTS else "population"
        raise GuardExceeded(f"simulation stopped at t={trace.t_final} on the {reason} guard", trace.snapshots, reason)
    return trace.snapshots


def _run_counts(laws, spec, init, config, gen, backend):
    n = spec.n_sites
    tab = kernel_tables(laws, spec)
    run = kernel.get_backend(backend)
    counts = init.counts(n)
    snaps = np.array(config.snapshot_times, dtype=float)
    snap_out = np.zeros((snaps.shape[0], n), dtype=np.int64)
    occupation = np.zeros(n)
    births = np.zeros(n, dtype=np.int64)
    log_t = np.zeros(config.event_log)
    log_i = np.zeros((config.event_log, 4), dtype=np.int64)
    state = gen.state_array()
    status, events, t_final, n_logged, n_snaps = run(
        state,
        counts,
        tab.site_rate,
        tab.jump_rate,
        tab.jump_cdf,
        tab.jump_len,
        tab.out_ptr,
        tab.out_cdf,
        tab.out_kind,
        tab.out_param,
        tab.out_place,
        tab.pi_cdf,
        tab.pi_len,
        snaps,
        float(config.horizon),
        int(config.max_events),
        int(config.max_population),
        bool(laws.rebirth),
        snap_out,
        occupation,
        births,
        log_t,
        log_i,
    )
    gen.set_state(state)
    snapshots = [Population.from_counts(snap_out[i], init.weight, float(snaps[i])) for i in range(n_snaps)]
    return SimulationTrace(
        snapshots, int(status), int(events), float(t_final), occupation, births, log_t[:n_logged], log_i[:n_logged]
    )


def _thinning(spec):
    age = spec.age_config
    mass = spec.mass_config
    age_f = age.rate_factor if age is not None else None
    mass_f = mass.rate_factor if mass is not None else None
    if age_f is None and mass_f is None:
        return None
    growth = mass.growth if mass is not None else 0.0

    def factor(t, birth, anchor):
        val = 1.0
        if age_f is not None:
            val *= float(age_f(t - birth))
        if mass_f is not None:
            val *= float(mass_f(anchor * math.exp(growth * t)))
        if not (-THIN_SLACK <= val <= 1.0 + THIN_SLACK):
            raise InvariantViolation(f"thinning factor {val} outside [0, 1]: rate exceeds its declared bound")
        return val

    return factor


def _run_flows(laws, spec, init, config, gen):
    """Per-particle engine for age and mass coordinates."""
    n = spec.n_sites
    tab = kernel_tables(laws, spec)
    srate = tab.site_rate.tolist()
    jrate = tab.jump_rate.tolist()
    jcdf = tab.jump_cdf.tolist()
    jlen = tab.jump_len.tolist()
    optr = tab.out_ptr.tolist()
    ocdf = tab.out_cdf.tolist()
    okind = tab.out_kind.tolist()
    oparam = tab.out_param.tolist()
    oplace = tab.out_place.tolist()
    pcdf = tab.pi_cdf.tolist()
    plen = tab.pi_len.tolist()

    age = spec.age_config
    mass = spec.mass_config
    lifetime = age.lifetime if age is not None else math.inf
    growth = mass.growth if mass is not None else 0.0
    factor = mass.offspring_factor if mass is not None else 1.0
    thin = _thinning(spec)
    rebirth = laws.rebirth

    size = len(init)
    pid = init.ids.tolist()
    site = init.site.tolist()
    birth = init.birth_time.tolist() if init.birth_time is not None else [0.0] * size
    anchor = init.mass_anchor.tolist() if init.mass_anchor is not None else [1.0] * size
    repro = init.repro_count.tolist() if init.repro_count is not None else [0] * size
    alive = [True] * size
    has_mass = mass is not None or init.mass_anchor is not None
    members = [[] for _ in range(n)]
    where = [0] * size
    for s in range(size):
        where[s] = len(members[site[s]])
        members[site[s]].append(s)
    next_id = max(pid, default=-1) + 1
    deaths = []
    if math.isfinite(lifetime):
        for s in range(size):
            if birth[s] + lifetime <= 0.0:
                raise ValidationError("initial particle already past its lifetime")
            deaths.append((birth[s] + lifetime, pid[s], s))
        heapq.heapify(deaths)

    def detach(s):
        group = members[site[s]]
        last = group.pop()
        if last != s:
            group[where[s]] = last
            where[last] = where[s]

    def attach(s, x):
        site[s] = x
        where[s] = len(members[x])
        members[x].append(s)

    def add(x, t, a):
        nonlocal next_id
        s = len(pid)
        pid.append(next_id)
        next_id += 1
        site.append(x)
        birth.append(t)
        anchor.append(a)
        repro.append(0)
        alive.append(True)
        where.append(0)
        attach(s, x)
        if math.isfinite(lifetime):
            heapq.heappush(deaths, (t + lifetime, pid[s], s))

    def snapshot(t):
        slots = sorted((s for group in members for s in group), key=pid.__getitem__)

        def pick(arr, dtype):
            return np.array([arr[s] for s in slots], dtype=dtype)

        return Population(
            pick(site, np.int64),
            init.weight,
            t,
            ids=pick(pid, np.int64),
            birth_time=pick(birth, float),
            mass_anchor=pick(anchor, float) if has_mass else None,
            repro_count=pick(repro, np.int64),
            growth=growth,
        )

    def log(t, kind, x, a, b):
        if len(log_t) < config.event_log:
            log_t.append(t)
            log_i.append((kind, x, a, b))

    snaps = config.snapshot_times
    horizon = config.horizon
    snapshots = []
    occ = [0.0] * n
    born = [0] * n
    log_t, log_i = [], []
    total = size
    t = 0.0
    si = 0
    events = 0
    status = kernel.STATUS_OK
    while True:
        rate_sum = 0.0
        for x in range(n):
            rate_sum += len(members[x]) * srate[x]
        t_next = t + -math.log1p(-gen.uniform()) / rate_sum if rate_sum > 0.0 else math.inf
        while deaths and not alive[deaths[0][2]]:
            heapq.heappop(deaths)
        t_death = deaths[0][0] if deaths else math.inf
        t_event = min(t_next, t_death)
        while si < len(snaps) and snaps[si] < t_event:
            snapshots.append(snapshot(snaps[si]))
            si += 1
        if t_event > horizon:
            for x in range(n):
                occ[x] += len(members[x]) * (horizon - t)
            t = horizon
            break
        if events >= config.max_events:
            status = kernel.STATUS_EVENTS
            break
        for x in range(n):
            occ[x] += len(members[x]) * (t_event - t)
        t = t_event
        events += 1

        if t_death <= t_next:
            _, _, s = heapq.heappop(deaths)
            alive[s] = False
            detach(s)
            total -= 1
            log(t, 2, site[s], pid[s], 0)
            continue

        u = gen.uniform() * rate_sum
        acc = 0.0
        x = -1
        for y in range(n):
            w = len(members[y]) * srate[y]
            if w > 0.0:
                x = y
                acc += w
                if u < acc:
                    break
        group = members[x]
        s = group[gen.below(len(group))]
        if gen.uniform() * srate[x] < jrate[x] or optr[x + 1] == optr[x]:
            y = gen.categorical(jcdf[x], jlen[x])
            detach(s)
            attach(s, y)
            log(t, 0, x, y, 1)
            continue
        if thin is not None and gen.uniform() >= thin(t, birth[s], anchor[s]):
            continue  # rejected branching proposal

        start = optr[x]
        o = start + gen.categorical(ocdf[start : optr[x + 1]], optr[x + 1] - start)
        cnt = int(oparam[o]) if okind[o] == FIXED else gen.poisson(oparam[o])
        child_anchor = anchor[s] * factor
        if rebirth:
            repro[s] += 1
        else:
            alive[s] = False
            detach(s)
            total -= 1
        place = oplace[o]
        for _ in range(cnt):
            if place < 0:
                y = x
            else:
                y = gen.categorical(pcdf[place], plen[place])
                born[y] += 1
            add(y, t, child_anchor)
        total += cnt
        log(t, 1, x, o - start, cnt)
        if total > config.max_population:
            status = kernel.STATUS_POPULATION
            break

    return SimulationTrace(
        snapshots,
        status,
        events,
        t,
        np.array(occ),
        np.array(born, dtype=np.int64),
        np.array(log_t, dtype=float),
        np.array(log_i, dtype=np.int64).reshape(-1, 4),
    )


# -- estimators and replicate orchestration -----------------------------------


def _pair(weight, counts, fmat):
    """weight * counts @ fmat with a fixed summation order over sites."""
    acc = np.zeros(fmat.shape[1])
    for x in range(fmat.shape[0]):
        if counts[x]:
            acc = acc + float(counts[x]) * fmat[x]
    return weight * acc


def empirical_laplace(snapshots_by_replicate, f, t):
    """Sample mean and standard error of exp(-X_t(f)) over replicates."""
    vals = []
    for snaps in snapshots_by_replicate:
        hit = [p for p in snaps if p.time == t]
        if not hit:
            raise GridError(f"time {t} is not a snapshot time")
        vals.append(math.exp(-hit[0].integrate(as_test_function(f, len(np.asarray(f))))))
    s = summarize(vals)
    return s.mean, s.stderr


def thread_cap(requested=None):
    """Worker count: the request, capped by SUPERBRANCH_THREADS when set."""
    cap = os.environ.get("SUPERBRANCH_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def _function_matrix(functions, n):
    if functions is None:
        functions = {"one": np.ones(n)}
    elif not isinstance(functions, dict):
        functions = {f"f{j}": f for j, f in enumerate(functions)}
    names = tuple(functions)
    fmat = np.column_stack([as_test_function(functions[name], n) for name in names]) if names else np.zeros((n, 0))
    return names, fmat


def run_replicates(
    laws,
    spec,
    mu,
    k,
    config: SimConfig,
    n_replicates,
    master_seed,
    functions=None,
    threads=None,
    backend=None,
    initial_mass=None,
    keep_traces=False,
    initial_age=0.0,
) -> ExperimentResult:
    """Independent replicates, replicate r drawing from RngStream(master_seed, r).

    ``functions`` maps names to test functions (default: the constant 1).
    Results are stored by replicate index, so the output does not depend on
    the thread schedule.  Truncated replicates keep the snapshots they
    reached (later entries are NaN) and are listed on ``truncated``.
    """
    if n_replicates < 1:
        raise DomainError("need at least one replicate")
    if laws.k != k:
        raise ValidationError(f"laws built at k={laws.k}, asked for k={k}")
    n = spec.n_sites
    names, fmat = _function_matrix(functions, n)
    times = np.array(config.snapshot_times, dtype=float)
    values = np.full((n_replicates, times.shape[0], len(names)), np.nan)
    totals = np.full((n_replicates, times.shape[0]), -1, dtype=np.int64)
    events = np.zeros(n_replicates, dtype=np.int64)
    occupation = np.zeros((n_replicates, n))
    births = np.zeros((n_replicates, n), dtype=np.int64)
    truncated = [False] * n_replicates
    traces = [None] * n_replicates if keep_traces else None

    def one(r):
        gen = RngStream(master_seed, r).generator()
        init = sample_poisson_initial(mu, k, gen, config.max_population, mass=initial_mass, age=initial_age)
        trace = simulate_trace(laws, spec, init, config, gen, backend)
        for i, pop in enumerate(trace.snapshots):
            counts = pop.counts(n)
            values[r, i] = _pair(pop.weight, counts, fmat)
            totals[r, i] = len(pop)
        events[r] = trace.events
        occupation[r] = trace.occupation
        births[r] = trace.births
        truncated[r] = trace.truncated
        if keep_traces:
            traces[r] = trace

    workers = thread_cap(threads)
    if workers == 1 or n_replicates == 1:
        for r in range(n_replicates):
            one(r)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(n_replicates)))
    result = ExperimentResult(
        k=k,
        master_seed=master_seed,
        snapshot_times=times,
        function_names=names,
        values=values,
        totals=totals,
        truncated=tuple(r for r in range(n_replicates) if truncated[r]),
        events=events,
        occupation=occupation,
        births=births,
        traces=traces,
    )
    return result
