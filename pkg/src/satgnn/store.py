"""Epoch-versioned historical embedding store.

Workers push per-layer embeddings for the current epoch; the trainer
commits the epoch at a barrier, after which pulls can see it. Only the last
``window`` epochs are retained, except that the newest entry for any
(layer, node) is never dropped.
"""
from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .codec import EncodedRows, PolylineCodec
from .tensor import ShapeError


class StoreContractError(ValueError):
    pass


def staleness(H_approx, H_exact) -> float:
    """Frobenius distance between an approximation and the exact embeddings."""
    a = np.asarray(H_approx, dtype=np.float64)
    b = np.asarray(H_exact, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"staleness: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((b - a) ** 2)))


@dataclass
class _Slab:
    values: np.ndarray | None      # n x d raw values (compression off)
    encoded: EncodedRows | None    # compressed payload (compression on)
    written: np.ndarray            # bool per node


@dataclass
class Traffic:
    elements: int = 0
    bytes_raw: int = 0
    bytes_sent: int = 0

    def add(self, elements: int, sent: int):
        self.elements += elements
        self.bytes_raw += 8 * elements
        self.bytes_sent += sent


class EmbeddingStore:
    def __init__(self, n: int, window: int = 2, features: np.ndarray | None = None,
                 codec: PolylineCodec | None = None):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.n = n
        self.window = window
        self.features = features
        self.codec = codec
        self._dims: dict[int, int] = {}
        self._committed: dict[int, dict[int, _Slab]] = defaultdict(dict)
        self._pending: dict[int, dict[int, tuple]] = {}
        self._latest: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        self.committed_through = 0
        self.traffic: dict[str, Traffic] = defaultdict(Traffic)

    # -- writes -------------------------------------------------------------
    def push(self, t: int, layer: int, node_ids, rows, channel: str = "push"):
        node_ids = np.asarray(node_ids, dtype=np.int64)
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != len(node_ids):
            raise StoreContractError(f"{len(node_ids)} ids but rows of shape {rows.shape}")
        if t <= self.committed_through:
            raise StoreContractError(f"epoch {t} is already committed")
        with self._lock:
            d = self._dims.setdefault(layer, rows.shape[1])
            if d != rows.shape[1]:
                raise StoreContractError(f"layer {layer} width changed from {d} to {rows.shape[1]}")
            slot = self._pending.setdefault(t, {})
            if layer not in slot:
                slot[layer] = (np.zeros((self.n, d)), np.zeros(self.n, dtype=bool))
            values, written = slot[layer]
            values[node_ids] = rows
            written[node_ids] = True
        sent = self._payload_bytes(rows)
        with self._lock:
            self.traffic[channel].add(rows.size, sent)

    def commit(self, t: int):
        """Barrier: make every push for epoch ``t`` visible to pulls."""
        with self._lock:
            for layer, (values, written) in self._pending.pop(t, {}).items():
                if self.codec is not None:
                    slab = _Slab(None, self.codec.encode_rows(values), written)
                else:
                    slab = _Slab(values, None, written)
                self._committed[layer][t] = slab
                latest = self._latest.setdefault(layer, np.full(self.n, -1, dtype=np.int64))
                latest[written] = np.maximum(latest[written], t)
            self.committed_through = max(self.committed_through, t)

    def evict(self, t: int):
        """Drop entries older than the window, keeping each key's newest entry."""
        cutoff = t - self.window
        with self._lock:
            for layer, slabs in self._committed.items():
                latest = self._latest[layer]
                for epoch in [e for e in slabs if e <= cutoff]:
                    slab = slabs[epoch]
                    keep = slab.written & (latest == epoch)
                    if keep.any():
                        slab.written = keep
                    else:
                        del slabs[epoch]

    # -- reads --------------------------------------------------------------
    def _payload_bytes(self, rows: np.ndarray) -> int:
        if self.codec is None:
            return 8 * rows.size
        return self.codec.encode_rows(rows).nbytes

    def _slab_rows(self, slab: _Slab, idx: np.ndarray) -> np.ndarray:
        if slab.values is not None:
            return slab.values[idx]
        return self.codec.decode_rows(slab.encoded, idx)

    def _resolve(self, upto: int, layer: int, node_ids: np.ndarray):
        """Rows of the newest committed epoch <= ``upto`` per node, plus a found mask."""
        d = self._dims.get(layer)
        out = np.zeros((len(node_ids), d if d is not None else 0))
        found = np.zeros(len(node_ids), dtype=bool)
        nbytes = 0
        for epoch in sorted((e for e in self._committed.get(layer, {}) if e <= upto), reverse=True):
            slab = self._committed[layer][epoch]
            hit = ~found & slab.written[node_ids]
            if hit.any():
                idx = node_ids[hit]
                out[hit] = self._slab_rows(slab, idx)
                if slab.encoded is not None:
                    nbytes += int((slab.encoded.offsets[idx + 1] - slab.encoded.offsets[idx]).sum())
                found |= hit
                if found.all():
                    break
        return out, found, nbytes

    def pull_out(self, t: int, layer: int, node_ids, dim: int | None = None, channel: str = "pull") -> np.ndarray:
        """Historical embeddings visible to epoch ``t`` (newest epoch <= t-1).

        Layer 0 is the static feature matrix. Nodes never pushed bootstrap to
        zeros, which needs ``dim`` if nothing was pushed for the layer yet.
        """
        node_ids = np.asarray(node_ids, dtype=np.int64)
        if layer == 0:
            if self.features is None:
                raise StoreContractError("store has no feature matrix for layer 0")
            return self.features[node_ids].copy()
        with self._lock:
            if layer not in self._dims:
                if dim is None:
                    raise StoreContractError(f"layer {layer} width unknown; pass dim")
                self._dims[layer] = dim
            out, found, nbytes = self._resolve(t - 1, layer, node_ids)
        n_elem = out.size
        if self.codec is None:
            nbytes = 8 * n_elem
        else:
            # cold-start zeros still travel, one byte per coordinate
            nbytes += int((~found).sum()) * out.shape[1]
        with self._lock:
            self.traffic[channel].add(n_elem, nbytes)
        return out

    def get(self, epoch: int, layer: int, node_ids, channel: str | None = None) -> np.ndarray:
        """Newest committed rows at or before ``epoch`` (zeros if never pushed)."""
        node_ids = np.asarray(node_ids, dtype=np.int64)
        with self._lock:
            out, found, nbytes = self._resolve(epoch, layer, node_ids)
        if channel is not None:
            if self.codec is None:
                nbytes = 8 * out.size
            with self._lock:
                self.traffic[channel].add(out.size, nbytes)
        return out

    def epochs(self, layer: int) -> list:
        return sorted(self._committed.get(layer, {}))

    def layers(self) -> list:
        return sorted(self._committed)

    def entries(self):
        """Yield (epoch, layer, node, row) for every retained committed entry."""
        for layer in self.layers():
            for epoch in self.epochs(layer):
                slab = self._committed[layer][epoch]
                ids = np.flatnonzero(slab.written)
                rows = self._slab_rows(slab, ids)
                for node, row in zip(ids, rows):
                    yield epoch, layer, int(node), row

    def stored_bytes(self) -> tuple[int, int]:
        """(raw float64 bytes, bytes actually held) over retained entries."""
        raw = held = 0
        for layer in self.layers():
            for slab in self._committed[layer].values():
                ids = np.flatnonzero(slab.written)
                raw += 8 * len(ids) * self._dims[layer]
                if slab.encoded is not None:
                    held += int((slab.encoded.offsets[ids + 1] - slab.encoded.offsets[ids]).sum())
                else:
                    held += 8 * len(ids) * self._dims[layer]
        return raw, held

    def dump(self, fh, precision: int | None = None):
        """Write ``t,layer,node,payload`` lines with polyline payloads."""
        codec = self.codec or PolylineCodec(precision or 4)
        for epoch, layer, node, row in self.entries():
            fh.write(f"{epoch},{layer},{node},{codec.encode(row).decode('ascii')}\n")

    def reset_traffic(self) -> dict:
        snap = dict(self.traffic)
        self.traffic = defaultdict(Traffic)
        return snap
