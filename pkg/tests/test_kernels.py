import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satgnn import _pure, kernels

compiled = pytest.importorskip("satgnn._kernels")


def random_csr(rng, n_rows, n_cols, density):
    mask = rng.random((n_rows, n_cols)) < density
    counts = mask.sum(axis=1)
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.nonzero(mask)[1].astype(np.int64)
    data = rng.standard_normal(len(indices))
    return indptr, indices, data, mask


def test_backend_is_compiled_by_default():
    if os.environ.get("SATGNN_PURE"):
        pytest.skip("pure backend forced")
    assert kernels.BACKEND == "compiled"


@pytest.mark.parametrize("seed", range(3))
def test_csr_matmul_matches_dense(seed):
    rng = np.random.default_rng(seed)
    indptr, indices, data, mask = random_csr(rng, 30, 25, 0.2)
    dense = rng.standard_normal((25, 4))
    A = np.zeros((30, 25))
    A[mask] = data
    for impl in (_pure, compiled):
        got = impl.csr_matmul(indptr, indices, data, dense, 30)
        assert np.abs(got - A @ dense).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 40), m=st.integers(1, 40), d=st.integers(1, 6),
       density=st.floats(0.0, 1.0), seed=st.integers(0, 10**6))
def test_csr_matmul_backends_bit_identical(n, m, d, density, seed):
    rng = np.random.default_rng(seed)
    indptr, indices, data, _ = random_csr(rng, n, m, density)
    dense = rng.standard_normal((m, d))
    a = _pure.csr_matmul(indptr, indices, data, dense, n)
    b = compiled.csr_matmul(indptr, indices, data, dense, n)
    assert np.array_equal(a, b)


@settings(max_examples=80, deadline=None)
@given(rows=st.integers(0, 12), d=st.integers(1, 6), p=st.integers(1, 7),
       scale=st.floats(1e-3, 100.0), seed=st.integers(0, 10**6))
def test_polyline_backends_bit_identical(rows, d, p, scale, seed):
    vals = np.random.default_rng(seed).uniform(-scale, scale, size=(rows, d))
    buf_a, off_a = _pure.polyline_encode_rows(vals, p)
    buf_b, off_b = compiled.polyline_encode_rows(vals, p)
    assert buf_a == bytes(buf_b)
    assert np.array_equal(off_a, off_b)
    raw = np.frombuffer(buf_a, dtype=np.uint8)
    da = _pure.polyline_decode_rows(raw, off_a, d, p)
    db = compiled.polyline_decode_rows(raw, off_a, d, p)
    assert np.array_equal(da, db)


def test_exact_halves_round_the_same_way():
    vals = np.array([[0.5, -0.5, 2.5, -2.5, 0.25, -0.25]])
    for p in (1, 2):
        assert _pure.polyline_encode_rows(vals, p)[0] == bytes(compiled.polyline_encode_rows(vals, p)[0])


@pytest.mark.parametrize("payload", [b"_", b"\x20?", b"????", b"\x7f"])
def test_malformed_payload_rejected_by_both(payload):
    raw = np.frombuffer(payload, dtype=np.uint8)
    offsets = np.array([0, len(raw)], dtype=np.int64)
    for impl in (_pure, compiled):
        with pytest.raises(ValueError):
            impl.polyline_decode_rows(raw, offsets, 2, 4)


def test_overflow_rejected_by_both():
    for impl in (_pure, compiled):
        with pytest.raises(OverflowError):
            impl.polyline_encode_rows(np.array([[1e9]]), 4)


def test_environment_variable_selects_pure_backend():
    env = dict(os.environ, SATGNN_PURE="1")
    out = subprocess.run([sys.executable, "-c", "import satgnn; print(satgnn.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "pure"
