# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event loop for count-based branching systems.

Same algorithm, draw order and floating-point accumulation order as
``_pykernel.run_counts``.  The loop runs without the GIL so replicates can
be executed from a thread pool.
"""

from libc.math cimport exp, log1p, INFINITY
from libc.stdint cimport uint64_t, int64_t

cdef enum:
    STATUS_OK = 0
    STATUS_EVENTS = 1
    STATUS_POPULATION = 2

cdef double POISSON_CHUNK = 30.0


cdef struct Rng:
    uint64_t s0
    uint64_t s1
    uint64_t s2
    uint64_t s3


cdef inline uint64_t rotl(uint64_t x, int k) noexcept nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t next64(Rng* r) noexcept nogil:
    cdef uint64_t result = rotl(r.s1 * 5, 7) * 9
    cdef uint64_t t = r.s1 << 17
    r.s2 ^= r.s0
    r.s3 ^= r.s1
    r.s1 ^= r.s2
    r.s0 ^= r.s3
    r.s2 ^= t
    r.s3 = rotl(r.s3, 45)
    return result


cdef inline double uniform(Rng* r) noexcept nogil:
    return <double>(next64(r) >> 11) * (1.0 / 9007199254740992.0)


cdef inline int64_t poisson_inversion(Rng* r, double lam) noexcept nogil:
    cdef double u = uniform(r)
    cdef double p = exp(-lam)
    cdef double cdf = p
    cdef int64_t i = 0
    while u > cdf and i < 1000:
        i += 1
        p *= lam / <double>i
        cdf += p
    return i


cdef inline int64_t poisson(Rng* r, double lam) noexcept nogil:
    cdef int64_t total = 0
    while lam > POISSON_CHUNK:
        total += poisson_inversion(r, POISSON_CHUNK)
        lam -= POISSON_CHUNK
    if lam > 0:
        total += poisson_inversion(r, lam)
    return total


cdef inline Py_ssize_t categorical(Rng* r, const double* cdf, Py_ssize_t n) noexcept nogil:
    cdef double u = uniform(r) * cdf[n - 1]
    cdef Py_ssize_t i
    for i in range(n - 1):
        if u < cdf[i]:
            return i
    return n - 1


def run_counts(
    uint64_t[::1] state,
    int64_t[::1] counts,
    const double[::1] site_rate,
    const double[::1] jump_rate,
    const double[:, ::1] jump_cdf,
    const int64_t[::1] jump_len,
    const int64_t[::1] out_ptr,
    const double[::1] out_cdf,
    const int64_t[::1] out_kind,
    const double[::1] out_param,
    const int64_t[::1] out_place,
    const double[:, ::1] pi_cdf,
    const int64_t[::1] pi_len,
    const double[::1] snap_times,
    double horizon,
    int64_t max_events,
    int64_t max_population,
    bint rebirth,
    int64_t[:, ::1] snap_out,
    double[::1] occupation,
    int64_t[::1] births,
    double[::1] log_t,
    int64_t[:, ::1] log_i,
):
    """Advance ``counts`` (in place) from time 0 to ``horizon``.

    Returns ``(status, events, t_final, n_logged, n_snapshots)``; ``state``
    holds the generator state on exit.
    """
    cdef Rng r
    cdef Py_ssize_t n = counts.shape[0]
    cdef Py_ssize_t n_snap = snap_times.shape[0]
    cdef Py_ssize_t log_cap = log_t.shape[0]
    cdef Py_ssize_t n_logged = 0
    cdef Py_ssize_t si = 0, x, y, site, o, start, j
    cdef int64_t events = 0, total = 0, k
    cdef int status = STATUS_OK
    cdef double t = 0.0, t_next, rate_sum, u, acc, w
    cdef int64_t place

    r.s0, r.s1, r.s2, r.s3 = state[0], state[1], state[2], state[3]
    for x in range(n):
        occupation[x] = 0.0
        births[x] = 0
        total += counts[x]

    with nogil:
        while True:
            rate_sum = 0.0
            for x in range(n):
                rate_sum += <double>counts[x] * site_rate[x]
            if rate_sum > 0.0:
                t_next = t + -log1p(-uniform(&r)) / rate_sum
            else:
                t_next = INFINITY
            while si < n_snap and snap_times[si] < t_next:
                for x in range(n):
                    snap_out[si, x] = counts[x]
                si += 1
            if t_next > horizon:
                for x in range(n):
                    occupation[x] += <double>counts[x] * (horizon - t)
                t = horizon
                break
            if events >= max_events:
                status = STATUS_EVENTS
                break
            for x in range(n):
                occupation[x] += <double>counts[x] * (t_next - t)
            t = t_next

            u = uniform(&r) * rate_sum
            acc = 0.0
            site = -1
            for x in range(n):
                w = <double>counts[x] * site_rate[x]
                if w > 0.0:
                    site = x
                    acc += w
                    if u < acc:
                        break
            x = site
            events += 1
            if uniform(&r) * site_rate[x] < jump_rate[x] or out_ptr[x + 1] == out_ptr[x]:
                y = categorical(&r, &jump_cdf[x, 0], jump_len[x])
                counts[x] -= 1
                counts[y] += 1
                if n_logged < log_cap:
                    log_t[n_logged] = t
                    log_i[n_logged, 0] = 0
                    log_i[n_logged, 1] = x
                    log_i[n_logged, 2] = y
                    log_i[n_logged, 3] = 1
                    n_logged += 1
                continue

            start = out_ptr[x]
            o = start + categorical(&r, &out_cdf[start], out_ptr[x + 1] - start)
            if out_kind[o] == 0:
                k = <int64_t>out_param[o]
            else:
                k = poisson(&r, out_param[o])
            if not rebirth:
                counts[x] -= 1
                total -= 1
            place = out_place[o]
            if place < 0:
                counts[x] += k
            else:
                for j in range(k):
                    y = categorical(&r, &pi_cdf[place, 0], pi_len[place])
                    counts[y] += 1
                    births[y] += 1
            total += k
            if n_logged < log_cap:
                log_t[n_logged] = t
                log_i[n_logged, 0] = 1
                log_i[n_logged, 1] = x
                log_i[n_logged, 2] = o - start
                log_i[n_logged, 3] = k
                n_logged += 1
            if total > max_population:
                status = STATUS_POPULATION
                break

    state[0], state[1], state[2], state[3] = r.s0, r.s1, r.s2, r.s3
    return status, events, t, n_logged, si
