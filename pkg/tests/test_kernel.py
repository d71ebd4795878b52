import os
import subprocess
import sys

import numpy as np
import pytest

from superbranch import kernel
from superbranch.mechanisms import build_particle_laws, simple_spec
from superbranch.particles import SimConfig, run_replicates, sample_poisson_initial, simulate_trace
from superbranch.rng import RngStream
from superbranch.sampling import random_specs

needs_compiled = pytest.mark.skipif("compiled" not in kernel.BACKENDS, reason="extension not built")


def _trace(spec, k, seed, backend, horizon=0.5, log=0):
    laws = build_particle_laws(spec, k)
    gen = RngStream(seed).generator()
    init = sample_poisson_initial(np.ones(spec.n_sites), k, gen)
    cfg = SimConfig(horizon, (0.25, horizon), max_events=200_000, event_log=log)
    return simulate_trace(laws, spec, init, cfg, gen, backend=backend)


def test_python_backend_always_available():
    assert kernel.get_backend("python") is not None
    with pytest.raises(ValueError):
        kernel.get_backend("fortran")


@needs_compiled
@pytest.mark.parametrize("index", range(12))
def test_backends_bitwise_identical(index):
    spec = random_specs(12, seed=11)[index]
    a = _trace(spec, 20, index, "python", log=50)
    b = _trace(spec, 20, index, "compiled", log=50)
    assert a.status == b.status and a.events == b.events and a.t_final == b.t_final
    assert np.array_equal(a.occupation, b.occupation)
    assert np.array_equal(a.births, b.births)
    assert np.array_equal(a.log_t, b.log_t) and np.array_equal(a.log_i, b.log_i)
    for pa, pb in zip(a.snapshots, b.snapshots):
        assert np.array_equal(np.sort(pa.site), np.sort(pb.site))


@needs_compiled
def test_backends_agree_on_guard_truncation():
    spec = simple_spec([[0.0]], b=-3.0)  # supercritical
    a = _trace(spec, 10, 1, "python", horizon=5.0)
    b = _trace(spec, 10, 1, "compiled", horizon=5.0)
    assert a.truncated and b.truncated
    assert (a.status, a.events, a.t_final) == (b.status, b.events, b.t_final)


@needs_compiled
def test_replicates_identical_across_backends():
    spec = simple_spec([[-1.0, 1.0], [1.0, -1.0]], c=0.5)
    laws = build_particle_laws(spec, 30)
    cfg = SimConfig(1.0)
    res = [run_replicates(laws, spec, [1.0, 0.5], 30, cfg, 20, 5, backend=b) for b in ("python", "compiled")]
    assert np.array_equal(res[0].values, res[1].values)


def test_environment_selects_fallback():
    env = dict(os.environ, SUPERBRANCH_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "import superbranch; print(superbranch.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_environment_rejects_unknown_backend():
    env = dict(os.environ, SUPERBRANCH_BACKEND="gpu")
    out = subprocess.run([sys.executable, "-c", "import superbranch"], env=env, capture_output=True, text=True)
    assert out.returncode != 0 and "SUPERBRANCH_BACKEND" in out.stderr
