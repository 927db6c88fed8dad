# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loss/shaping kernels. Mirrors ``_purekernels`` bit for bit."""

from libc.stdint cimport uint64_t

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double TO_UNIT = 1.0 / 9007199254740992.0


cdef inline uint64_t _next(uint64_t* s) nogil:
    cdef uint64_t z
    s[0] = s[0] + GOLDEN
    z = s[0]
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix64(uint64_t state):
    cdef uint64_t out = _next(&state)
    return state, out


def drop_mask(uint64_t state, Py_ssize_t n, double p):
    cdef Py_ssize_t i
    cdef bytearray out
    cdef unsigned char* buf
    if p <= 0.0:
        return bytes(n), state
    if p >= 1.0:
        return b"\x01" * n, state
    out = bytearray(n)
    buf = out
    with nogil:
        for i in range(n):
            if <double>(_next(&state) >> 11) * TO_UNIT < p:
                buf[i] = 1
    return bytes(out), state


def stream_segments(long long n_bytes, long long segment_size, double p,
                    uint64_t state, double rate, double burst, double tokens,
                    double last, double now, double rto_initial, double backoff,
                    double rto_cap):
    cdef double t = now if now > last else last
    cdef long long retx = 0
    cdef long long wire = 0
    cdef long long remaining = n_bytes
    cdef long long seg
    cdef double rto
    cdef bint shaped = rate > 0.0
    cdef bint lossy = p > 0.0
    with nogil:
        while remaining > 0:
            seg = segment_size if remaining > segment_size else remaining
            remaining -= seg
            rto = rto_initial
            while True:
                if shaped:
                    if t > last:
                        tokens = tokens + (t - last) * rate
                        if tokens > burst:
                            tokens = burst
                        last = t
                    if tokens >= seg:
                        tokens = tokens - seg
                    else:
                        t = t + (seg - tokens) / rate
                        tokens = 0.0
                        last = t
                wire += seg
                if lossy:
                    if <double>(_next(&state) >> 11) * TO_UNIT < p:
                        retx += 1
                        t = t + rto
                        rto = rto * backoff
                        if rto > rto_cap:
                            rto = rto_cap
                        continue
                break
    return t, retx, wire, tokens, last, state
