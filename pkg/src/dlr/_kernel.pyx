# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled delay-loop recurrence.

Mirrors ``dlr._fallback.run_loop_batch`` exactly; the two are checked
against each other in the test suite.
"""
from cython.parallel cimport prange
from libc.math cimport sin, sinf, tanh, tanhf, log, cos, sqrt
from libc.stdint cimport uint64_t
from libc.stdlib cimport malloc, free

ctypedef fused real_t:
    float
    double

cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t x) noexcept nogil:
    x = x + <uint64_t>0x9E3779B97F4A7C15
    x = (x ^ (x >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    x = (x ^ (x >> 27)) * <uint64_t>0x94D049BB133111EB
    return x ^ (x >> 31)


cdef inline double _normal(uint64_t seed, uint64_t chip) noexcept nogil:
    cdef uint64_t key = seed * <uint64_t>0x9E3779B97F4A7C15 + chip
    cdef uint64_t r1 = _mix(key * 2)
    cdef uint64_t r2 = _mix(key * 2 + 1)
    cdef double u1 = (<double>(r1 >> 11) + 1.0) * INV_2_53
    cdef double u2 = <double>(r2 >> 11) * INV_2_53
    return sqrt(-2.0 * log(u1)) * cos(TWO_PI * u2)


cdef inline real_t _f(real_t v, int nl) noexcept nogil:
    if real_t is float:
        if nl == 0:
            return sinf(v)
        return tanhf(v)
    else:
        if nl == 0:
            return sin(v)
        return tanh(v)


cdef void _run_one(const real_t* s, Py_ssize_t length, const real_t* mask, Py_ssize_t n_nodes,
                   real_t eta, real_t nu, real_t h0, real_t h1, int nl,
                   real_t sigma, uint64_t seed, real_t* out,
                   real_t* old, real_t* new, real_t* jbuf) noexcept nogil:
    cdef Py_ssize_t n, j, last = n_nodes - 1
    cdef real_t sample, a0, a1, jlast = 0
    cdef real_t* tmp
    cdef uint64_t chip
    for j in range(n_nodes):
        old[j] = 0
    for n in range(length):
        sample = s[n]
        # jbuf[j] = J(t-1), jbuf[j+1] = J(t) for chip j of this sample
        jbuf[0] = jlast
        for j in range(n_nodes):
            jbuf[j + 1] = sample * mask[j]
        jlast = jbuf[n_nodes]
        if h1 == 0:
            for j in range(n_nodes):
                new[j] = h0 * _f(eta * old[j] + nu * jbuf[j + 1], nl)
        else:
            for j in range(last):
                a0 = _f(eta * old[j] + nu * jbuf[j + 1], nl)
                a1 = _f(eta * old[j + 1] + nu * jbuf[j], nl)
                new[j] = h0 * a0 + h1 * a1
        if sigma != 0:
            chip = <uint64_t>n * <uint64_t>n_nodes
            for j in range(last):
                new[j] = new[j] + sigma * <real_t>_normal(seed, chip + <uint64_t>j)
        if h1 != 0:
            # X[t-N+1] for the final chip is this sample's first chip
            a0 = _f(eta * old[last] + nu * jbuf[n_nodes], nl)
            a1 = _f(eta * new[0] + nu * jbuf[last], nl)
            new[last] = h0 * a0 + h1 * a1
        if sigma != 0:
            new[last] = new[last] + sigma * <real_t>_normal(seed, chip + <uint64_t>last)
        tmp = old
        old = new
        new = tmp
    for j in range(n_nodes):
        out[j] = old[j]


def run_loop_batch(const real_t[:, ::1] S, const real_t[::1] mask, double eta, double nu,
                   double h0, double h1, int nl, real_t[:, ::1] out,
                   double sigma, uint64_t[::1] seeds, int threads=1):
    """Run the loop for every row of ``S`` and write final states to ``out``."""
    cdef Py_ssize_t batch = S.shape[0], length = S.shape[1], n_nodes = mask.shape[0]
    cdef Py_ssize_t b
    cdef real_t* work
    cdef real_t c_eta = <real_t>eta, c_nu = <real_t>nu
    cdef real_t c_h0 = <real_t>h0, c_h1 = <real_t>h1, c_sigma = <real_t>sigma
    if out.shape[0] != batch or out.shape[1] != n_nodes:
        raise ValueError("out has wrong shape")
    if seeds.shape[0] != batch:
        raise ValueError("need one noise seed per row")
    if batch == 0:
        return
    with nogil:
        for b in prange(batch, num_threads=max(threads, 1), schedule="dynamic"):
            work = <real_t*>malloc(sizeof(real_t) * (3 * n_nodes + 1))
            _run_one(&S[b, 0], length, &mask[0], n_nodes, c_eta, c_nu, c_h0, c_h1,
                     nl, c_sigma, seeds[b], &out[b, 0],
                     work, work + n_nodes, work + 2 * n_nodes)
            free(work)
