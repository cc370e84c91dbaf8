"""Graph ingestion, GCN normalization, partitioning and halo bookkeeping."""
from __future__ import annotations

import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class IngestionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CSR:
    """Row-compressed sparse matrix with float64 values."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "CSR":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(indptr, np.ascontiguousarray(cols), np.ascontiguousarray(vals), tuple(shape))

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0], dtype=np.int64), np.diff(self.indptr))

    def __matmul__(self, dense: np.ndarray) -> np.ndarray:
        dense = np.ascontiguousarray(dense, dtype=np.float64)
        if dense.shape[0] != self.shape[1]:
            raise ValueError(f"spmm: {self.shape} x {dense.shape}")
        return kernels.csr_matmul(self.indptr, self.indices, self.data, dense, self.shape[0])

    @property
    def T(self) -> "CSR":
        t = self.__dict__.get("_T")
        if t is None:
            t = CSR.from_coo(self.indices, self.row_ids(), self.data, self.shape[::-1])
            object.__setattr__(self, "_T", t)
        return t

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.row_ids(), self.indices), self.data)
        return out

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_ids(), weights=self.data, minlength=self.shape[0])


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    adj: CSR  # symmetric, 0/1 entries, no self-loops
    X: np.ndarray
    y: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if self.n else 0

    @property
    def num_edges(self) -> int:
        return self.adj.nnz // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.adj.indices[self.adj.indptr[v]:self.adj.indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adj.indptr)

    def edge_list(self) -> np.ndarray:
        """Undirected edges as (u, v) rows with u < v."""
        rows = self.adj.row_ids()
        keep = rows < self.adj.indices
        return np.stack([rows[keep], self.adj.indices[keep]], axis=1)


def adjacency_from_edges(edges, n: int) -> CSR:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= n):
        raise IngestionError(f"edge endpoint outside [0, {n})")
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]])
    both = np.unique(both, axis=0) if len(both) else both
    return CSR.from_coo(both[:, 0], both[:, 1], np.ones(len(both)), (n, n))


def parse_split(spec: str) -> dict:
    out = {"train": 0.6, "val": 0.2, "test": 0.2, "seed": 0}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in out:
            raise ConfigError(f"unknown split key {key!r}")
        out[key] = int(val) if key == "seed" else float(val)
    total = out["train"] + out["val"] + out["test"]
    if min(out["train"], out["val"], out["test"]) < 0 or total > 1 + 1e-9:
        raise ConfigError(f"invalid split ratios in {spec!r}")
    return out


def make_masks(n: int, split: dict):
    rng = np.random.default_rng(split["seed"])
    perm = rng.permutation(n)
    n_train = int(round(split["train"] * n))
    n_val = int(round(split["val"] * n))
    n_test = min(int(round(split["test"] * n)), n - n_train - n_val)
    masks = []
    for lo, hi in ((0, n_train), (n_train, n_train + n_val),
                   (n_train + n_val, n_train + n_val + n_test)):
        m = np.zeros(n, dtype=bool)
        m[perm[lo:hi]] = True
        masks.append(m)
    return masks


def build_graph(edges, X, y, split="train=0.6,val=0.2,test=0.2,seed=0") -> Graph:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if X.shape[0] != n:
        raise IngestionError(f"{X.shape[0]} feature rows for {n} labels")
    split = parse_split(split) if isinstance(split, str) else split
    train, val, test = make_masks(n, split)
    return Graph(n, adjacency_from_edges(edges, n), X, y, train, val, test)


def _read_edges(path):
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise IngestionError(f"{path}:{lineno}: expected 'src<TAB>dst'")
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: non-integer node id") from exc
    return edges


def _read_features(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([float(x) for x in line.split(",")])
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: non-numeric feature") from exc
    if rows and len({len(r) for r in rows}) != 1:
        raise IngestionError(f"{path}: ragged feature rows")
    return np.array(rows, dtype=np.float64)


def _read_labels(path, n):
    y = np.full(n, -1, dtype=np.int64)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("node"):
                continue
            try:
                node, label = (int(x) for x in line.split(","))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: bad label row") from exc
            if not 0 <= node < n:
                raise IngestionError(f"{path}:{lineno}: node {node} outside [0, {n})")
            y[node] = label
    if (y < 0).any():
        raise IngestionError(f"{path}: {int((y < 0).sum())} nodes without a label")
    return y


def load_graph(edge_path, feature_path, label_path, split_spec="train=0.6,val=0.2,test=0.2,seed=0") -> Graph:
    X = _read_features(feature_path)
    n = X.shape[0]
    y = _read_labels(label_path, n)
    return build_graph(_read_edges(edge_path), X, y, split_spec)


def write_graph(g: Graph, out_dir, prefix="graph"):
    """Write edges.tsv / features.csv / labels.csv; returns the three paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = tuple(os.path.join(out_dir, f"{prefix}.{ext}")
                  for ext in ("edges.tsv", "features.csv", "labels.csv"))
    with open(paths[0], "w", encoding="utf-8") as fh:
        fh.write("# src\tdst\n")
        for u, v in g.edge_list():
            fh.write(f"{u}\t{v}\n")
    with open(paths[1], "w", encoding="utf-8") as fh:
        for row in g.X:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(paths[2], "w", encoding="utf-8") as fh:
        fh.write("node,label\n")
        for v, label in enumerate(g.y):
            fh.write(f"{v},{label}\n")
    return paths


def normalize(g: Graph) -> CSR:
    """Symmetric GCN propagation matrix D^-1/2 (A + I) D^-1/2."""
    deg = g.degrees().astype(np.float64) + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    rows = np.concatenate([g.adj.row_ids(), np.arange(g.n)])
    cols = np.concatenate([g.adj.indices, np.arange(g.n)])
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    return CSR.from_coo(rows, cols, vals, (g.n, g.n))


@dataclass(frozen=True, eq=False)
class Partitioning:
    M: int
    assign: np.ndarray
    parts: list          # node ids per partition, ascending
    halos: list          # out-of-subgraph 1-hop neighbours per partition, ascending
    P_in: list           # |V_m| x |V_m| (local column ids)
    P_out: list          # |V_m| x |halo_m| (halo-local column ids)
    local_index: np.ndarray = field(repr=False)  # node -> position inside its own part

    def sizes(self) -> np.ndarray:
        return np.array([len(p) for p in self.parts])

    def cut_edges(self, g: Graph) -> int:
        e = g.edge_list()
        return int((self.assign[e[:, 0]] != self.assign[e[:, 1]]).sum())


def _bfs_dist(g: Graph, sources) -> np.ndarray:
    dist = np.full(g.n, -1, dtype=np.int64)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    indptr, indices = g.adj.indptr, g.adj.indices
    while q:
        u = q.popleft()
        for v in indices[indptr[u]:indptr[u + 1]]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def _pick_seeds(g: Graph, M: int, rng) -> list:
    """Farthest-first seeds; unreachable nodes count as infinitely far."""
    seeds = [int(rng.integers(g.n))]
    if M >= g.n:
        return list(range(g.n))
    for _ in range(M - 1):
        dist = _bfs_dist(g, seeds).astype(np.float64)
        dist[dist < 0] = np.inf
        dist[seeds] = -1
        best = np.flatnonzero(dist == dist.max())
        seeds.append(int(best[rng.integers(len(best))]))
    return seeds


def _grow(g: Graph, seeds, cap: int, rng) -> np.ndarray:
    M = len(seeds)
    assign = np.full(g.n, -1, dtype=np.int64)
    size = np.zeros(M, dtype=np.int64)
    frontiers = [deque([s]) for s in seeds]
    for m, s in enumerate(seeds):
        assign[s] = m
        size[m] = 1
    indptr, indices = g.adj.indptr, g.adj.indices
    active = True
    while active:
        active = False
        for m in range(M):
            q = frontiers[m]
            while q and size[m] < cap:
                u = q[0]
                claimed = False
                for v in indices[indptr[u]:indptr[u + 1]]:
                    if assign[v] < 0:
                        assign[v] = m
                        size[m] += 1
                        q.append(v)
                        claimed = True
                        break
                if not claimed:
                    q.popleft()
                else:
                    active = True
                    break
    # leftovers (other components, or blocked by caps) go to the smallest part,
    # preferring one that already holds a neighbour
    for u in rng.permutation(np.flatnonzero(assign < 0)):
        nbr_parts = {int(assign[v]) for v in g.neighbors(u) if assign[v] >= 0}
        choices = [m for m in nbr_parts if size[m] < cap] or list(range(M))
        m = min(choices, key=lambda k: (size[k], k))
        assign[u] = m
        size[m] += 1
    return assign


def _rebalance(g: Graph, assign: np.ndarray, M: int, floor: int) -> np.ndarray:
    """Top up parts below ``floor`` from the largest part.

    Growth caps parts from above only, so a part boxed in early can end up
    short. Moved nodes prefer ones already touching the short part, then the
    ones with fewest neighbours left behind.
    """
    size = np.bincount(assign, minlength=M)
    indptr, indices = g.adj.indptr, g.adj.indices
    while size.min() < floor:
        small = int(np.argmin(size))
        big = int(np.argmax(size))
        cand = np.flatnonzero(assign == big)
        best, best_key = -1, None
        for u in cand:
            nb = assign[indices[indptr[u]:indptr[u + 1]]]
            key = (-int((nb == small).sum()), int((nb == big).sum()), int(u))
            if best_key is None or key < best_key:
                best, best_key = int(u), key
        assign[best] = small
        size[big] -= 1
        size[small] += 1
    return assign


def _refine(g: Graph, assign: np.ndarray, M: int, lo: int, hi: int, passes: int = 4):
    size = np.bincount(assign, minlength=M)
    indptr, indices = g.adj.indptr, g.adj.indices
    for _ in range(passes):
        moved = 0
        for u in range(g.n):
            nbrs = indices[indptr[u]:indptr[u + 1]]
            if len(nbrs) == 0:
                continue
            counts = np.bincount(assign[nbrs], minlength=M)
            own = assign[u]
            target = int(np.argmax(counts))
            gain = counts[target] - counts[own]
            if target != own and gain > 0 and size[own] - 1 >= lo and size[target] + 1 <= hi:
                assign[u] = target
                size[own] -= 1
                size[target] += 1
                moved += 1
        if not moved:
            break
    return assign


def partition(g: Graph, M: int, seed: int = 0, slack: float | None = None, P: CSR | None = None) -> Partitioning:
    """Balanced BFS-growing partition with greedy cut refinement.

    Part sizes stay within ``[floor(n/M) - s//2, ceil(n/M) + s//2]`` where
    ``s`` defaults to ``0.05 * n / M``.
    """
    if not 1 <= M <= g.n:
        raise ConfigError(f"need 1 <= M <= n, got M={M}, n={g.n}")
    rng = np.random.default_rng(seed)
    s = 0.05 * g.n / M if slack is None else slack
    half = int(math.floor(s / 2))
    lo, hi = g.n // M - half, -(-g.n // M) + half
    if M == 1:
        assign = np.zeros(g.n, dtype=np.int64)
    elif M == g.n:
        assign = rng.permutation(g.n).astype(np.int64)
    else:
        seeds = _pick_seeds(g, M, rng)
        assign = _grow(g, seeds, -(-g.n // M), rng)
        assign = _rebalance(g, assign, M, g.n // M)
        assign = _refine(g, assign, M, lo, hi)
    return build_partitioning(g, assign, M, P)


def build_partitioning(g: Graph, assign, M: int, P: CSR | None = None) -> Partitioning:
    assign = np.asarray(assign, dtype=np.int64)
    P = normalize(g) if P is None else P
    parts = [np.flatnonzero(assign == m) for m in range(M)]
    local_index = np.empty(g.n, dtype=np.int64)
    for nodes in parts:
        local_index[nodes] = np.arange(len(nodes))
    halos, P_in, P_out = [], [], []
    for m, nodes in enumerate(parts):
        lo_ptr, hi_ptr = P.indptr[nodes], P.indptr[nodes + 1]
        counts = hi_ptr - lo_ptr
        sel = np.concatenate([np.arange(a, b) for a, b in zip(lo_ptr, hi_ptr)]) if len(nodes) else np.zeros(0, np.int64)
        rows = np.repeat(np.arange(len(nodes)), counts)
        cols = P.indices[sel]
        vals = P.data[sel]
        inside = assign[cols] == m
        halo = np.unique(cols[~inside])
        halo_pos = np.searchsorted(halo, cols[~inside])
        halos.append(halo)
        P_in.append(CSR.from_coo(rows[inside], local_index[cols[inside]], vals[inside], (len(nodes), len(nodes))))
        P_out.append(CSR.from_coo(rows[~inside], halo_pos, vals[~inside], (len(nodes), len(halo))))
    return Partitioning(M, assign, parts, halos, P_in, P_out, local_index)


@dataclass(frozen=True, eq=False)
class HaloSubgraph:
    """Subgraph induced by a partition plus its 1-hop halo.

    ``nodes`` lists the partition's own nodes first, then the halo, so the
    last ``n_halo`` rows of any per-node matrix belong to halo nodes.
    """

    m: int
    nodes: np.ndarray
    n_inner: int
    adj: CSR         # local ids, no self-loops
    prop: CSR        # symmetric-normalized adjacency with self-loops

    @property
    def n_halo(self) -> int:
        return len(self.nodes) - self.n_inner

    def edges(self) -> set:
        rows = self.adj.row_ids()
        return {(int(self.nodes[a]), int(self.nodes[b]))
                for a, b in zip(rows, self.adj.indices) if self.nodes[a] < self.nodes[b]}


def halo_subgraph(g: Graph, p: Partitioning, m: int) -> HaloSubgraph:
    if not 0 <= m < p.M:
        raise ConfigError(f"partition index {m} out of range")
    nodes = np.concatenate([p.parts[m], p.halos[m]]).astype(np.int64)
    pos = np.full(g.n, -1, dtype=np.int64)
    pos[nodes] = np.arange(len(nodes))
    rows_g = g.adj.row_ids()
    keep = (pos[rows_g] >= 0) & (pos[g.adj.indices] >= 0)
    r, c = pos[rows_g[keep]], pos[g.adj.indices[keep]]
    k = len(nodes)
    adj = CSR.from_coo(r, c, np.ones(len(r)), (k, k))
    deg = np.diff(adj.indptr).astype(np.float64) + 1.0
    inv = 1.0 / np.sqrt(deg)
    rr = np.concatenate([r, np.arange(k)])
    cc = np.concatenate([c, np.arange(k)])
    prop = CSR.from_coo(rr, cc, inv[rr] * inv[cc], (k, k))
    return HaloSubgraph(m, nodes, len(p.parts[m]), adj, prop)
