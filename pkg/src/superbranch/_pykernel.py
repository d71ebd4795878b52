"""Pure-Python event loop for count-based branching systems.

This mirrors ``_kernel.pyx`` operation for operation, including the order
of floating-point accumulations and random draws, so both backends produce
identical trajectories from identical generator states.
"""

import math

from .rng import Xoshiro256

STATUS_OK = 0
STATUS_EVENTS = 1
STATUS_POPULATION = 2

LOG_JUMP = 0
LOG_BRANCH = 1


def _categorical(gen, cdf, start, n):
    u = gen.uniform() * cdf[start + n - 1]
    for i in range(n - 1):
        if u < cdf[start + i]:
            return i
    return n - 1


def run_counts(
    state,
    counts,
    site_rate,
    jump_rate,
    jump_cdf,
    jump_len,
    out_ptr,
    out_cdf,
    out_kind,
    out_param,
    out_place,
    pi_cdf,
    pi_len,
    snap_times,
    horizon,
    max_events,
    max_population,
    rebirth,
    snap_out,
    occupation,
    births,
    log_t,
    log_i,
):
    """Advance ``counts`` to ``horizon``; see ``_kernel.run_counts`` for the contract."""
    gen = Xoshiro256([int(v) for v in state])
    n = len(counts)
    cnt = [int(v) for v in counts]
    srate = [float(v) for v in site_rate]
    jrate = [float(v) for v in jump_rate]
    jcdf = [float(v) for v in jump_cdf.ravel()]
    jlen = [int(v) for v in jump_len]
    optr = [int(v) for v in out_ptr]
    ocdf = [float(v) for v in out_cdf]
    okind = [int(v) for v in out_kind]
    oparam = [float(v) for v in out_param]
    oplace = [int(v) for v in out_place]
    pcdf = [float(v) for v in pi_cdf.ravel()]
    plen = [int(v) for v in pi_len]
    snaps = [float(v) for v in snap_times]
    n_snap = len(snaps)
    occ = [0.0] * n
    born = [0] * n
    log_cap = len(log_t)
    n_logged = 0

    total = sum(cnt)
    t = 0.0
    si = 0
    events = 0
    status = STATUS_OK
    while True:
        rate_sum = 0.0
        for x in range(n):
            rate_sum += cnt[x] * srate[x]
        if rate_sum > 0.0:
            t_next = t + -math.log1p(-gen.uniform()) / rate_sum
        else:
            t_next = math.inf
        while si < n_snap and snaps[si] < t_next:
            for x in range(n):
                snap_out[si, x] = cnt[x]
            si += 1
        if t_next > horizon:
            for x in range(n):
                occ[x] += cnt[x] * (horizon - t)
            t = horizon
            break
        if events >= max_events:
            status = STATUS_EVENTS
            break
        for x in range(n):
            occ[x] += cnt[x] * (t_next - t)
        t = t_next

        u = gen.uniform() * rate_sum
        acc = 0.0
        site = -1
        for x in range(n):
            w = cnt[x] * srate[x]
            if w > 0.0:
                site = x
                acc += w
                if u < acc:
                    break
        x = site
        events += 1
        if gen.uniform() * srate[x] < jrate[x] or optr[x + 1] == optr[x]:
            y = _categorical(gen, jcdf, x * n, jlen[x])
            cnt[x] -= 1
            cnt[y] += 1
            if n_logged < log_cap:
                log_t[n_logged] = t
                log_i[n_logged, 0] = LOG_JUMP
                log_i[n_logged, 1] = x
                log_i[n_logged, 2] = y
                log_i[n_logged, 3] = 1
                n_logged += 1
            continue

        start = optr[x]
        o = start + _categorical(gen, ocdf, start, optr[x + 1] - start)
        if okind[o] == 0:
            k = int(oparam[o])
        else:
            k = gen.poisson(oparam[o])
        if not rebirth:
            cnt[x] -= 1
            total -= 1
        place = oplace[o]
        if place < 0:
            cnt[x] += k
        else:
            for _ in range(k):
                y = _categorical(gen, pcdf, place * n, plen[place])
                cnt[y] += 1
                born[y] += 1
        total += k
        if n_logged < log_cap:
            log_t[n_logged] = t
            log_i[n_logged, 0] = LOG_BRANCH
            log_i[n_logged, 1] = x
            log_i[n_logged, 2] = o - start
            log_i[n_logged, 3] = k
            n_logged += 1
        if total > max_population:
            status = STATUS_POPULATION
            break

    for x in range(n):
        counts[x] = cnt[x]
        occupation[x] = occ[x]
        births[x] = born[x]
    new_state = gen.state
    for i in range(4):
        state[i] = new_state[i]
    return status, events, t, n_logged, si
