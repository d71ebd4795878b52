"""Acceptance criteria, each checked at its stated tolerance and time budget."""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from superbranch.cumulant import (
    SolverConfig,
    mass_representation_gap,
    semigroup_residual,
    solve_controlled_immigration,
    solve_cumulant,
    solver_gap,
)
from superbranch.mechanisms import (
    LocalMechanism,
    NonlocalMechanism,
    build_particle_laws,
    eval_phi,
    eval_phi_k,
    eval_zeta,
    eval_zeta_k,
    simple_spec,
)
from superbranch.moments import excessive_gap, solve_T
from superbranch.particles import SimConfig, run_replicates, sample_poisson_initial, simulate
from superbranch.rng import RngStream
from superbranch.sampling import random_specs
from superbranch.stats import compare, summarize
from superbranch.zoo import (
    EMPIRICAL,
    RESTRICTION,
    Level2Particle,
    aggregate_mass,
    level2_offspring,
    make_age_reproduction,
    make_controlled_immigration,
    make_mass_structured,
    make_multilevel,
    make_rebirth,
    simulate_multilevel,
)

ROOT = Path(__file__).resolve().parent.parent
SWAP = [[0.0, 1.0], [1.0, 0.0]]
K, N = 100, 10_000


def riccati():
    return simple_spec([[0.0]], c=0.5)


def rebirth_swap():
    return make_rebirth(np.zeros((2, 2)), 1.0, SWAP)


def critical_swap():
    return simple_spec(np.zeros((2, 2)), beta=1.0, pis=SWAP)


SCENARIOS = {
    1: (riccati, [1.0], [1.0]),
    2: (riccati, [1.0], [1.0]),
    3: (rebirth_swap, [1.0, 0.0], [1.0, 0.0]),
    4: (critical_swap, [1.0, 0.0], [1.0, 0.0]),
}


class Run:
    def __init__(self, spec, mu, f, seed, k=K, n=N):
        self.spec, self.mu, self.f = spec, np.asarray(mu, float), np.asarray(f, float)
        start = time.perf_counter()
        laws = build_particle_laws(spec, k)
        self.result = run_replicates(laws, spec, mu, k, SimConfig(1.0, (0.0, 1.0)), n, seed, functions={"f": f})
        self.seconds = time.perf_counter() - start

    def laplace(self):
        return summarize(self.result.samples(1.0, "f", "laplace"))

    def mean(self):
        return summarize(self.result.samples(1.0, "f", "mean"))


@pytest.fixture(scope="module")
def runs():
    cache = {}

    def get(number):
        if number not in cache:
            make, mu, f = SCENARIOS[number]
            cache[number] = Run(make(), mu, f, seed=1000 + number)
        return cache[number]

    return get


def within(summary, reference, sigma, bias):
    verdict = compare(summary, reference, sigma, bias)
    return verdict.passed, f"mean={summary.mean:.6f} ref={reference:.6f} z={verdict.z_score:+.2f}"


@pytest.mark.criterion(1, "Riccati analytic check")
def test_riccati_analytic(record_property):
    start = time.perf_counter()
    v = solve_cumulant(riccati(), [1.0], 1.0).final[0]
    seconds = time.perf_counter() - start
    record_property("detail", f"|V-2/3|={abs(v - 2 / 3):.1e}, {seconds:.2f}s")
    assert abs(v - 2 / 3) <= 1e-6
    assert seconds < 1.0


@pytest.mark.criterion(2, "convergence with local branching")
def test_local_branching_convergence(runs, record_property):
    run = runs(2)
    ok, detail = within(run.laplace(), math.exp(-2 / 3), 3.0, 0.01)
    record_property("detail", f"{detail}, {run.seconds:.1f}s")
    assert ok
    assert run.seconds < 300


@pytest.mark.criterion(3, "convergence with non-local rebirth branching")
def test_rebirth_convergence(runs, record_property):
    run = runs(3)
    ok, detail = within(run.laplace(), math.exp(-math.cosh(1.0)), 3.0, 0.01)
    record_property("detail", f"{detail}, {run.seconds:.1f}s")
    assert ok
    assert run.seconds < 120


@pytest.mark.criterion(4, "critical swap conservation")
def test_critical_swap_conservation(runs, record_property):
    run = runs(4)
    totals = run.result.totals
    assert np.array_equal(totals[:, 0], totals[:, 1])
    field = solve_cumulant(critical_swap(), [1.0, 0.0], 1.0)
    drift = np.max(np.abs(field.values.sum(axis=1) - 1.0))
    error = np.max(np.abs(field.values[:, 0] - (1 + np.exp(-2 * field.times)) / 2))
    record_property("detail", f"sum drift={drift:.1e}, closed-form gap={error:.1e}")
    assert drift <= 1e-9
    assert error <= 1e-6


@pytest.mark.criterion(5, "moment identity")
@pytest.mark.parametrize("number", [2, 3, 4])
def test_moment_identity(runs, number, record_property):
    run = runs(number)
    reference = float(run.mu @ solve_T(run.spec, run.f, 1.0).final)
    ok, detail = within(run.mean(), reference, 4.0, 0.0)
    record_property("detail", f"scenario {number}: {detail}")
    assert ok


@pytest.mark.criterion(6, "excessive bound on random specs")
def test_excessive_bound(record_property):
    times = np.round(np.arange(0, 21) * 0.1, 12)
    rng = np.random.default_rng(2024)
    worst = -math.inf
    for spec in random_specs(100, seed=2024):
        f = rng.uniform(0.0, 2.0, spec.n_sites)
        worst = max(worst, excessive_gap(spec, f, times))
    record_property("detail", f"worst gap={worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.criterion(7, "solver cross-validation")
def test_solver_cross_validation(record_property):
    gaps = [solver_gap(make(), f, 1.0, step=1e-3, picard_tol=1e-10) for make, _, f in SCENARIOS.values()]
    residual = semigroup_residual(riccati(), [1.0], 0.5, 0.5, SolverConfig(step=1e-3))
    record_property("detail", f"max method gap={max(gaps):.1e}, semigroup residual={residual:.1e}")
    assert max(gaps) <= 1e-5
    assert residual <= 1e-6


@pytest.mark.criterion(8, "controlled immigration")
def test_controlled_immigration(record_property):
    local1, local2 = LocalMechanism.uniform(1, 0.0, 0.5), LocalMechanism.uniform(1, 0.0, 0.5)
    bundle = make_controlled_immigration([[0.0]], [[0.0]], local1, local2)
    v1, v2 = solve_controlled_immigration(bundle.spec1, bundle.spec2, [0.8], [0.0], 1.0)
    standalone = solve_cumulant(bundle.spec1, [0.8], 1.0)
    assert not v2.values.any()
    assert np.max(np.abs(v1.values - standalone.values)) <= 1e-12

    f1, f2, mu = [0.5], [1.0], np.array([1.0, 0.5])
    v1, v2 = bundle.solve(f1, f2, 1.0)
    reference = math.exp(-(mu[0] * v1.final[0] + mu[1] * v2.final[0]))
    laws = build_particle_laws(bundle.flat, K)
    res = run_replicates(laws, bundle.flat, mu, K, SimConfig(1.0), N, 808,
                         functions={"f": bundle.flat_function(f1, f2)})
    ok, detail = within(summarize(res.samples(1.0, "f")), reference, 3.0, 0.02)
    record_property("detail", detail)
    assert ok


@pytest.mark.criterion(9, "mass-structured representation and aggregation")
def test_mass_structured(record_property):
    local = LocalMechanism.uniform(2, 0.0, 1.0)
    spec = make_mass_structured([[-1.0, 1.0], [1.0, -1.0]], 1.0, math.log(2), local,
                                NonlocalMechanism.single(np.full(2, 0.5), SWAP, d=0.5))
    flow = spec.mass_config
    gap = mass_representation_gap(spec, flow, None, 1.0, 0.5, 1.0, [1.0, 0.5])
    record_property("detail", f"representation gap={gap:.1e}")
    assert gap <= 1e-8
    laws = build_particle_laws(spec, 20)
    a = 1.5
    for r in range(50):
        gen = RngStream(909, r).generator()
        init = sample_poisson_initial([1.0, 1.0], 20, gen, mass=a)
        for pop in simulate(laws, spec, init, SimConfig(1.0, (0.25, 0.5, 1.0)), gen):
            expected = flow.g(pop.time, a) * (pop.weight * pop.counts(2).astype(float))
            assert np.array_equal(aggregate_mass(pop, 2), expected)


def _audited_branch_events(spec, initial, target, seed):
    records, r = [], 0
    while len(records) < target:
        trace = simulate_multilevel(spec, initial, 1.0, (), RngStream(seed, r), audit=target - len(records))
        records.extend(trace.audit)
        r += 1
    return records


@pytest.mark.criterion(10, "multilevel branching mechanisms")
def test_multilevel_mechanisms(record_property):
    q = [[-1.0, 1.0], [1.0, -1.0]]
    sub = [[-1.0, 0.5, 0.5], [0.5, -1.0, 0.5], [0.5, 0.5, -1.0]]
    initial = [Level2Particle(i % 2, [4, 3, 2]) for i in range(20)]

    empirical = make_multilevel(q, sub, 20.0, EMPIRICAL, sample_pmf=[0.0, 0.4, 0.3, 0.3])
    records = _audited_branch_events(empirical, initial, 10_000, 10)
    for parent, children in records:
        assert all(int(c.sum()) == int(parent.sum()) for c in children)

    subset = np.array([True, False, True])
    restriction = make_multilevel(q, sub, 20.0, RESTRICTION, subset=subset)
    restricted = _audited_branch_events(restriction, initial, 10_000, 11)
    suppressed = 0
    for parent, children in restricted:
        if not children:
            suppressed += 1
            assert not parent[subset].any()
        for c in children:
            assert np.array_equal(c, np.where(subset, parent, 0))
    record_property("detail", f"{len(records)} empirical + {len(restricted)} restriction events, {suppressed} suppressed")


@pytest.mark.criterion(11, "age-structured reproduction")
def test_age_reproduction(record_property):
    model = make_age_reproduction(0.5)
    moment = model.moment(1.0, 1.0, step=1e-3).newborn[-1]
    assert abs(moment - math.exp(0.5)) <= 1e-4
    start = time.perf_counter()
    laws = build_particle_laws(model.spec, 50)
    res = run_replicates(laws, model.spec, [1.0], 50, SimConfig(1.0), 5000, 1111)
    seconds = time.perf_counter() - start
    ok, detail = within(summarize(res.samples(1.0, "one", "mean")), math.exp(0.5), 4.0, 0.0)
    record_property("detail", f"{detail}, {seconds:.1f}s")
    assert ok
    assert seconds < 120


@pytest.mark.criterion(12, "particle-law convergence")
def test_particle_law_convergence(record_property):
    rng = np.random.default_rng(12)
    ratios = []
    for spec in random_specs(20, seed=12):
        coarse, fine = build_particle_laws(spec, 128), build_particle_laws(spec, 256)
        for x in range(spec.n_sites):
            for z in rng.uniform(0.0, 3.0, 3):
                g1 = abs(eval_phi_k(coarse, x, z) - eval_phi(spec.local, x, z))
                g2 = abs(eval_phi_k(fine, x, z) - eval_phi(spec.local, x, z))
                if g1 > 1e-12:
                    ratios.append(g1 / g2)
            f = rng.uniform(0.0, 2.0, spec.n_sites)
            h1 = abs(eval_zeta_k(coarse, x, f) - eval_zeta(spec.nonlocal_, x, f))
            h2 = abs(eval_zeta_k(fine, x, f) - eval_zeta(spec.nonlocal_, x, f))
            if h1 > 1e-12:
                ratios.append(h1 / h2)
    assert ratios
    assert all(1.5 <= r <= 2.5 for r in ratios)
    binary = simple_spec([[0.0]], c=0.5)
    for k in (1, 2, 10, 128, 256, 1000):
        laws = build_particle_laws(binary, k)
        for z in np.linspace(0.0, min(k, 3.0), 7):
            assert eval_phi_k(laws, 0, z) == eval_phi(binary.local, 0, z)
    record_property("detail", f"{len(ratios)} resolved gaps, ratios in [{min(ratios):.3f}, {max(ratios):.3f}]")


@pytest.mark.criterion(13, "byte-identical compare output")
def test_reproducible_compare(tmp_path, record_property):
    outputs = []
    for threads in ("1", "4", "4"):
        out = tmp_path / f"out{len(outputs)}"
        env = dict(os.environ, SUPERBRANCH_THREADS=threads)
        cmd = [sys.executable, "-m", "superbranch.cli", "compare", "--config", str(ROOT / "configs" / "riccati.json"),
               "--replicates", "2000", "--out", str(out)]
        proc = subprocess.run(cmd, env=env, capture_output=True)
        assert proc.returncode in (0, 1), proc.stderr
        outputs.append(((out / "compare.csv").read_bytes(), (out / "summary.json").read_bytes()))
    assert outputs[0] == outputs[1] == outputs[2]
    record_property("detail", f"{len(outputs[0][0])} bytes identical across thread caps 1 and 4")
