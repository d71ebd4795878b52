"""Random valid specs for property tests.

Each draw has 1 to ``max_sites`` sites and

* q-matrix off-diagonal rates uniform on [0, 1];
* drift b uniform on [-1, 1] and diffusion c uniform on [0, 1];
* 0 to 2 local atoms with u uniform on [0.1, 2] and m uniform on [0.01, 1];
* beta uniform on [0, 1] with 1 or 2 mixture components per site,
  Dirichlet(1) weights and Dirichlet(1) displacement laws;
* per component d uniform on [0, 0.9] and 0 to 2 count atoms with u uniform
  on [0.1, 2], scaled so that d + sum u n <= 1.

Every draw has k_min <= 10, so densities from 10 upwards are always valid.
"""

from __future__ import annotations

import numpy as np

from .mechanisms import (
    LimitSystemSpec,
    LocalMechanism,
    MixtureComponent,
    MotionGenerator,
    NonlocalMechanism,
    SiteSpace,
)


def _atoms(rng, weight_hi):
    count = int(rng.integers(0, 3))
    return tuple((float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.01, weight_hi))) for _ in range(count))


def _component(rng, n, weight):
    d = float(rng.uniform(0.0, 0.9))
    count = int(rng.integers(0, 3))
    atoms = ()
    if count:
        us = rng.uniform(0.1, 2.0, size=count)
        raw = rng.uniform(0.05, 1.0, size=count)
        scale = (1.0 - d) * rng.uniform(0.1, 1.0) / float(np.dot(us, raw))
        atoms = tuple((float(u), float(r * scale)) for u, r in zip(us, raw))
    return MixtureComponent(weight, rng.dirichlet(np.ones(n)), d, atoms)


def random_spec(rng, max_sites=4) -> LimitSystemSpec:
    """Draw one spec from ``rng`` (a ``numpy.random.Generator``)."""
    n = int(rng.integers(1, max_sites + 1))
    q = rng.uniform(0.0, 1.0, size=(n, n))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    local = LocalMechanism(
        rng.uniform(-1.0, 1.0, size=n),
        rng.uniform(0.0, 1.0, size=n),
        tuple(_atoms(rng, 1.0) for _ in range(n)),
    )
    mixtures = []
    for _ in range(n):
        n_comp = int(rng.integers(1, 3))
        weights = rng.dirichlet(np.ones(n_comp))
        weights[-1] = 1.0 - weights[:-1].sum()
        mixtures.append(tuple(_component(rng, n, float(w)) for w in weights))
    nonlocal_ = NonlocalMechanism(rng.uniform(0.0, 1.0, size=n), tuple(mixtures))
    return LimitSystemSpec(SiteSpace.range(n), MotionGenerator(q), local, nonlocal_)


def random_specs(count, seed=0, max_sites=4):
    rng = np.random.default_rng(seed)
    return [random_spec(rng, max_sites) for _ in range(count)]


def random_test_function(rng, n, high=2.0):
    return rng.uniform(0.0, high, size=n)
