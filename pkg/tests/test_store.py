import io
import math
import threading
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import polyline_decode, polyline_round, polyline_value
from satgnn.codec import PolylineCodec, decode_polyline, encode_polyline, quantize
from satgnn.store import EmbeddingStore, StoreContractError, staleness
from satgnn.tensor import ShapeError


# -- codec ------------------------------------------------------------------

@pytest.mark.parametrize("value,precision,text", [
    (0.0, 5, "?"),
    (38.5, 5, "_p~iF"),
    (-120.2, 5, "~ps|U"),
])
def test_reference_vectors(value, precision, text):
    assert encode_polyline([value], precision) == text.encode("ascii")
    assert polyline_value(value, precision) == text


def test_vector_is_concatenation_of_coordinates():
    v = [38.5, -120.2, 0.0, 1e-5]
    assert encode_polyline(v, 5).decode() == "".join(polyline_value(x, 5) for x in v)


def test_round_trip_10k_samples_against_decimal_oracle():
    rng = np.random.default_rng(2024)
    v = rng.uniform(-10, 10, size=10_000)
    for p in (1, 4, 6):
        enc = encode_polyline(v, p)
        dec = decode_polyline(enc, p)
        assert dec.tolist() == [polyline_round(x, p) for x in v]
        assert dec.tolist() == polyline_decode(enc.decode(), p)
        half = Fraction(1, 2 * 10 ** p)
        assert all(abs(Fraction(a) - Fraction(b)) <= half for a, b in zip(dec.tolist(), v.tolist()))


def test_half_away_from_zero():
    assert quantize([0.5, -0.5, 1.5, -2.5], 0).tolist() == [1.0, -1.0, 2.0, -3.0]
    assert decode_polyline(encode_polyline([2.5, -2.5], 1), 1).tolist() == [2.5, -2.5]


def test_overflow_is_a_range_error():
    with pytest.raises(OverflowError):
        encode_polyline([3e5], 4)


def test_precision_range():
    with pytest.raises(ValueError):
        PolylineCodec(0)
    with pytest.raises(ValueError):
        PolylineCodec(10)


def test_row_subset_decoding():
    codec = PolylineCodec(3)
    rows = np.random.default_rng(0).uniform(-5, 5, size=(6, 4))
    enc = codec.encode_rows(rows)
    assert np.array_equal(codec.decode_rows(enc, [4, 1]), quantize(rows[[4, 1]], 3))
    assert np.array_equal(codec.decode_rows(enc), quantize(rows, 3))
    assert enc.row(2) == codec.encode(rows[2])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1000, 1000, allow_nan=False), min_size=1, max_size=20), st.integers(1, 6))
def test_codec_properties(values, p):
    enc = encode_polyline(values, p)
    assert all(63 <= b <= 126 for b in enc)
    dec = decode_polyline(enc, p)
    assert np.array_equal(dec, quantize(values, p))
    # idempotent: re-encoding the decoded values changes nothing
    assert encode_polyline(dec, p) == enc
    assert np.all(np.abs(dec - np.asarray(values)) <= 0.5 * 10.0 ** -p * (1 + 1e-9))


# -- staleness --------------------------------------------------------------

def test_staleness_examples():
    H = np.random.default_rng(0).standard_normal((5, 3))
    assert staleness(H, H) == 0.0
    k = 7
    ones = np.zeros((k, 4))
    ones[:, 0] = 1.0
    assert staleness(ones, np.zeros((k, 4))) == pytest.approx(np.sqrt(k), abs=1e-15)
    with pytest.raises(ShapeError):
        staleness(np.zeros((2, 2)), np.zeros((3, 2)))


def test_staleness_matches_sum_of_squares():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((30, 8)), rng.standard_normal((30, 8))
    want = math.sqrt(math.fsum(float(x) ** 2 for x in (b - a).ravel()))
    assert staleness(a, b) == pytest.approx(want, abs=1e-12)


# -- store ------------------------------------------------------------------

def _store(window=2, n=6, d=3, codec=None):
    return EmbeddingStore(n, window=window, features=np.arange(n * 2, dtype=float).reshape(n, 2), codec=codec)


def test_push_pull_round_trip():
    s = _store()
    rows = np.random.default_rng(0).standard_normal((2, 3))
    s.push(1, 1, [2, 4], rows)
    s.commit(1)
    assert np.array_equal(s.pull_out(2, 1, [2, 4]), rows)


def test_last_write_wins_within_epoch():
    s = _store()
    s.push(1, 1, [0], np.ones((1, 3)))
    s.push(1, 1, [0], 2 * np.ones((1, 3)))
    s.commit(1)
    assert s.pull_out(2, 1, [0]).tolist() == [[2.0, 2.0, 2.0]]


def test_compressed_pull_within_bound():
    s = _store(codec=PolylineCodec(4))
    rows = np.random.default_rng(0).uniform(-3, 3, size=(6, 3))
    s.push(1, 1, np.arange(6), rows)
    s.commit(1)
    assert np.abs(s.pull_out(2, 1, np.arange(6)) - rows).max() <= 0.5e-4 * (1 + 1e-9)


def test_cold_start_bootstrap():
    s = _store()
    assert np.array_equal(s.pull_out(1, 0, [1, 3]), s.features[[1, 3]])
    assert np.array_equal(s.pull_out(1, 1, [1, 3], dim=3), np.zeros((2, 3)))


def test_latest_epoch_wins():
    s = _store(window=10)
    for t in (3, 5):
        s.push(t, 1, [0], np.full((1, 3), float(t)))
        s.commit(t)
    assert s.pull_out(6, 1, [0]).tolist() == [[5.0, 5.0, 5.0]]
    assert s.pull_out(5, 1, [0]).tolist() == [[3.0, 3.0, 3.0]]


def test_uncommitted_epoch_is_invisible():
    s = _store()
    s.push(1, 1, [0], np.ones((1, 3)))
    assert s.pull_out(2, 1, [0], dim=3).tolist() == [[0.0, 0.0, 0.0]]
    s.commit(1)
    assert s.pull_out(2, 1, [0]).tolist() == [[1.0, 1.0, 1.0]]


def test_contract_errors():
    s = _store()
    with pytest.raises(StoreContractError):
        s.push(1, 1, [0, 1], np.ones((1, 3)))
    s.push(1, 1, [0], np.ones((1, 3)))
    with pytest.raises(StoreContractError):
        s.push(1, 1, [1], np.ones((1, 4)))
    s.commit(1)
    with pytest.raises(StoreContractError):
        s.push(1, 1, [1], np.ones((1, 3)))


def _fill(s, epochs, nodes=range(6)):
    for t in epochs:
        s.push(t, 1, list(nodes), np.full((len(nodes), 3), float(t)))
        s.commit(t)


def test_evict_window_two():
    s = _store(window=2)
    _fill(s, range(1, 6))
    s.evict(5)
    assert s.epochs(1) == [4, 5]


def test_evict_window_one_keeps_only_latest():
    s = _store(window=1)
    _fill(s, range(1, 4))
    s.push(4, 1, [0], np.full((1, 3), 4.0))
    s.commit(4)
    s.evict(4)
    got = {(t, node) for t, _, node, _ in s.entries()}
    assert got == {(4, 0)} | {(3, v) for v in range(1, 6)}


def test_evict_large_window_removes_nothing():
    s = _store(window=10)
    _fill(s, range(1, 6))
    s.evict(5)
    assert s.epochs(1) == [1, 2, 3, 4, 5]


def test_pull_after_evict_serves_only_recent_epochs():
    s = _store(window=2)
    _fill(s, range(1, 11))
    s.evict(10)
    assert min(t for t, *_ in s.entries()) >= 9
    assert s.pull_out(11, 1, [0]).tolist() == [[10.0] * 3]


def test_evict_matches_enumeration_oracle():
    rng = np.random.default_rng(5)
    tau, T = 3, 12
    s = _store(window=tau)
    written = {}
    for t in range(1, T + 1):
        nodes = sorted(rng.choice(6, size=rng.integers(1, 4), replace=False).tolist())
        s.push(t, 1, nodes, np.full((len(nodes), 3), float(t)))
        s.commit(t)
        for v in nodes:
            written.setdefault(v, []).append(t)
        s.evict(t)
        latest = {v: max(ts) for v, ts in written.items()}
        want = {(e, v) for v, ts in written.items() for e in ts if e > t - tau or e == latest[v]}
        assert {(e, v) for e, _, v, _ in s.entries()} == want


def test_dump_format():
    s = _store()
    s.push(1, 1, [2], np.array([[38.5, -120.2, 0.0]]))
    s.commit(1)
    buf = io.StringIO()
    s.dump(buf, precision=5)
    assert buf.getvalue() == "1,1,2,_p~iF~ps|U?\n"


def test_traffic_counts_elements_and_bytes():
    s = _store()
    s.push(1, 1, [0, 1], np.ones((2, 3)))
    s.commit(1)
    s.pull_out(2, 1, [0, 1, 2])
    s.pull_out(2, 0, [0])  # features are local, not counted
    tr = s.reset_traffic()
    assert (tr["push"].elements, tr["push"].bytes_sent) == (6, 48)
    assert (tr["pull"].elements, tr["pull"].bytes_sent) == (9, 72)


def test_concurrent_pushes_from_disjoint_workers():
    s = EmbeddingStore(400, window=2)
    def worker(m):
        ids = np.arange(m * 100, (m + 1) * 100)
        s.push(1, 1, ids, np.full((100, 2), float(m)))
    threads = [threading.Thread(target=worker, args=(m,)) for m in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    s.commit(1)
    got = s.pull_out(2, 1, np.arange(400))
    assert np.array_equal(got[:, 0], np.repeat(np.arange(4.0), 100))
