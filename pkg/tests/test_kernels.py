import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flcommbench import _purekernels, kernels

try:
    from flcommbench import _speedups
except ImportError:  # pure-Python install
    _speedups = None

needs_compiled = pytest.mark.skipif(_speedups is None, reason="compiled kernels not built")


def test_splitmix64_reference_vector():
    # first outputs of splitmix64 seeded with 0 (published reference sequence)
    s, a = _purekernels.splitmix64(0)
    s, b = _purekernels.splitmix64(s)
    assert a == 0xE220A8397B1DCDAF
    assert b == 0x6E789E6AA1B965F4


def test_drop_mask_edge_probabilities():
    assert _purekernels.drop_mask(5, 10, 0.0) == (bytes(10), 5)
    assert _purekernels.drop_mask(5, 10, 1.0) == (b"\x01" * 10, 5)


def test_stream_key_is_stable():
    assert kernels.stream_key("link", 0) == kernels.stream_key("link", 0)
    assert kernels.stream_key("link", 0) != kernels.stream_key("link", 1)
    assert kernels.derive_state(1, 2) != kernels.derive_state(2, 2)


def test_backend_selection():
    assert kernels.backend("python") is _purekernels
    with pytest.raises(ValueError, match="python"):
        kernels.backend("fortran")
    assert kernels.BACKEND in ("python", "cython")


@needs_compiled
@settings(max_examples=300)
@given(st.integers(0, 2**64 - 1), st.integers(0, 3000), st.floats(0, 1))
def test_drop_mask_backends_identical(state, n, p):
    assert _speedups.drop_mask(state, n, p) == _purekernels.drop_mask(state, n, p)


@needs_compiled
@settings(max_examples=300)
@given(st.integers(0, 2**64 - 1), st.integers(0, 200_000), st.integers(1, 3000),
       st.floats(0, 0.6), st.sampled_from([0.0, 625_000.0, 7_500_000.0]),
       st.floats(0, 65536), st.floats(0, 5))
def test_stream_segments_backends_identical(state, n, seg, p, rate, tokens, now):
    args = (n, seg, p, state, rate, 65536.0, tokens, 0.0, now, 0.2, 2.0, 3.0)
    assert _speedups.stream_segments(*args) == _purekernels.stream_segments(*args)


@needs_compiled
@given(st.integers(0, 2**64 - 1))
def test_splitmix_backends_identical(state):
    assert _speedups.splitmix64(state) == _purekernels.splitmix64(state)
