"""Pure-Python loss/shaping kernels.

Reference implementation of the routines in ``_speedups.pyx``. Both modules
must produce bit-identical results for identical inputs; the test suite
checks this whenever the compiled module is importable.
"""

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_TO_UNIT = 1.0 / 9007199254740992.0  # 2**-53


def splitmix64(state):
    """Advance a splitmix64 state; return ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def drop_mask(state, n, p):
    """Draw ``n`` independent Bernoulli(p) drop decisions.

    Returns ``(mask, state)`` where ``mask[i] == 1`` means datagram ``i`` is
    dropped. No draws are consumed when ``p <= 0`` or ``p >= 1``.
    """
    if p <= 0.0:
        return bytes(n), state
    if p >= 1.0:
        return b"\x01" * n, state
    out = bytearray(n)
    for i in range(n):
        state = (state + GOLDEN) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        z ^= z >> 31
        if (z >> 11) * _TO_UNIT < p:
            out[i] = 1
    return bytes(out), state


def stream_segments(n_bytes, segment_size, p, state, rate, burst, tokens, last,
                    now, rto_initial, backoff, rto_cap):
    """Walk one reliable stream transfer segment by segment.

    Every transmission attempt acquires credit from the token bucket
    ``(rate, burst, tokens, last)``; ``rate <= 0`` means unshaped. A lost
    attempt waits the current RTO, which then backs off up to ``rto_cap``.
    The RTO restarts at ``rto_initial`` for each new segment.

    Returns ``(end, retransmissions, wire_bytes, tokens, last, state)``.
    """
    t = now if now > last else last
    retx = 0
    wire = 0
    remaining = n_bytes
    shaped = rate > 0.0
    lossy = p > 0.0
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
                state = (state + GOLDEN) & MASK64
                z = state
                z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
                z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
                z ^= z >> 31
                if (z >> 11) * _TO_UNIT < p:
                    retx += 1
                    t = t + rto
                    rto = rto * backoff
                    if rto > rto_cap:
                        rto = rto_cap
                    continue
            break
    return t, retx, wire, tokens, last, state
