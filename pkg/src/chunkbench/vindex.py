"""HNSW approximate nearest-neighbour index over unit vectors.

Vectors are stored as float32 (the on-disk precision). Scores are computed
in float64 as ``dot(q, v) * inv_norm(v)`` where ``inv_norm`` is derived from
the stored float32 values, so an index loaded from disk scores exactly like
the one that was saved.

Graph construction and search run in numba kernels; the Python layer handles
ids, tie-breaking and the binary file format.
"""

from __future__ import annotations

import math
import struct
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

MAGIC = b"CBIX"
FORMAT_VERSION = 1
MAX_LEVEL = 16
_HEADER = struct.Struct("<IIIIQIIiI")


class VectorIndexError(ValueError):
    """Invalid index input, query or file."""


@dataclass(frozen=True)
class HnswParams:
    m: int = 24
    ef_construction: int = 200
    ef_search: int = 100
    level_seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise VectorIndexError("m must be >= 2")
        if self.ef_construction < self.m:
            raise VectorIndexError("ef_construction must be >= m")
        if self.ef_search < 1:
            raise VectorIndexError("ef_search must be >= 1")


SearchResult = list[tuple[str, float]]


# --------------------------------------------------------------------------
# numba kernels

@numba.njit(cache=True)
def _score(vecs, inv, i, q):
    s = 0.0
    for k in range(q.shape[0]):
        s += vecs[i, k] * q[k]
    return s * inv[i]


@numba.njit(cache=True)
def _score_all(vecs, inv, q):
    out = np.empty(vecs.shape[0], dtype=np.float64)
    for i in range(vecs.shape[0]):
        out[i] = _score(vecs, inv, i, q)
    return out


@numba.njit(cache=True)
def _less(ka, va, kb, vb):
    return ka < kb or (ka == kb and va < vb)


@numba.njit(cache=True)
def _heap_push(keys, vals, size, key, val):
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        parent = (i - 1) >> 1
        if _less(keys[i], vals[i], keys[parent], vals[parent]):
            keys[i], keys[parent] = keys[parent], keys[i]
            vals[i], vals[parent] = vals[parent], vals[i]
            i = parent
        else:
            break
    return size + 1


@numba.njit(cache=True)
def _heap_pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        best = i
        if left < size and _less(keys[left], vals[left], keys[best], vals[best]):
            best = left
        if right < size and _less(keys[right], vals[right], keys[best], vals[best]):
            best = right
        if best == i:
            break
        keys[i], keys[best] = keys[best], keys[i]
        vals[i], vals[best] = vals[best], vals[i]
        i = best
    return key, val, size


@numba.njit(cache=True)
def _neighbors(nb0, c0, nbu, cu, node, layer):
    if layer == 0:
        return nb0[node, :c0[node]]
    return nbu[node, layer - 1, :cu[node, layer - 1]]


@numba.njit(cache=True)
def _search_layer(vecs, inv, nb0, c0, nbu, cu, q, eps, ef, layer, visited, tag):
    """Beam search on one layer; returns (sims, ids) sorted by descending sim."""
    n = vecs.shape[0]
    cand_k = np.empty(n + 1, dtype=np.float64)
    cand_v = np.empty(n + 1, dtype=np.int64)
    res_k = np.empty(ef + 2, dtype=np.float64)
    res_v = np.empty(ef + 2, dtype=np.int64)
    nc = 0
    nr = 0
    for ep in eps:
        if visited[ep] == tag:
            continue
        visited[ep] = tag
        s = _score(vecs, inv, ep, q)
        nc = _heap_push(cand_k, cand_v, nc, -s, ep)
        nr = _heap_push(res_k, res_v, nr, s, ep)
        if nr > ef:
            _, _, nr = _heap_pop(res_k, res_v, nr)
    while nc > 0:
        negs, c, nc = _heap_pop(cand_k, cand_v, nc)
        if nr >= ef and -negs < res_k[0]:
            break
        for e in _neighbors(nb0, c0, nbu, cu, c, layer):
            if visited[e] == tag:
                continue
            visited[e] = tag
            s = _score(vecs, inv, e, q)
            if nr < ef or s > res_k[0]:
                nc = _heap_push(cand_k, cand_v, nc, -s, e)
                nr = _heap_push(res_k, res_v, nr, s, e)
                if nr > ef:
                    _, _, nr = _heap_pop(res_k, res_v, nr)
    sims = np.empty(nr, dtype=np.float64)
    ids = np.empty(nr, dtype=np.int64)
    for j in range(nr - 1, -1, -1):
        s, v, nr = _heap_pop(res_k, res_v, nr)
        sims[j] = s
        ids[j] = v
    return sims, ids


@numba.njit(cache=True)
def _node_query(vecs, inv, i):
    q = np.empty(vecs.shape[1], dtype=np.float64)
    for k in range(vecs.shape[1]):
        q[k] = vecs[i, k] * inv[i]
    return q


@numba.njit(cache=True)
def _connect(vecs, inv, nb0, c0, nbu, cu, e, new, layer, cap):
    """Add ``new`` to e's neighbour list, keeping the ``cap`` closest."""
    if layer == 0:
        nbrs = nb0[e]
        cnt = c0[e]
    else:
        nbrs = nbu[e, layer - 1]
        cnt = cu[e, layer - 1]
    if cnt < cap:
        nbrs[cnt] = new
        cnt += 1
    else:
        q = _node_query(vecs, inv, e)
        pool = np.empty(cnt + 1, dtype=np.int64)
        sims = np.empty(cnt + 1, dtype=np.float64)
        for j in range(cnt):
            pool[j] = nbrs[j]
            sims[j] = _score(vecs, inv, nbrs[j], q)
        pool[cnt] = new
        sims[cnt] = _score(vecs, inv, new, q)
        order = np.argsort(-sims, kind="mergesort")
        for j in range(cap):
            nbrs[j] = pool[order[j]]
    if layer == 0:
        c0[e] = cnt
    else:
        cu[e, layer - 1] = cnt


@numba.njit(cache=True)
def _build(vecs, inv, levels, m, ef_c, nb0, c0, nbu, cu):
    n = vecs.shape[0]
    visited = np.zeros(n, dtype=np.int64)
    tag = 0
    entry = -1
    top = -1
    for i in range(n):
        lvl = levels[i]
        if entry < 0:
            entry = i
            top = lvl
            continue
        q = _node_query(vecs, inv, i)
        eps = np.empty(1, dtype=np.int64)
        eps[0] = entry
        layer = top
        while layer > lvl:
            tag += 1
            _, ids = _search_layer(vecs, inv, nb0, c0, nbu, cu, q, eps, 1, layer, visited, tag)
            eps = ids[:1].copy()
            layer -= 1
        layer = min(lvl, top)
        while layer >= 0:
            tag += 1
            sims, ids = _search_layer(vecs, inv, nb0, c0, nbu, cu, q, eps, ef_c, layer, visited, tag)
            cap = 2 * m if layer == 0 else m
            k = min(cap, ids.shape[0])
            for j in range(k):
                if layer == 0:
                    nb0[i, j] = ids[j]
                else:
                    nbu[i, layer - 1, j] = ids[j]
            if layer == 0:
                c0[i] = k
            else:
                cu[i, layer - 1] = k
            for j in range(k):
                _connect(vecs, inv, nb0, c0, nbu, cu, ids[j], i, layer, cap)
            eps = ids
            layer -= 1
        if lvl > top:
            entry = i
            top = lvl
    return entry, top


@numba.njit(cache=True)
def _knn(vecs, inv, nb0, c0, nbu, cu, entry, top, q, ef):
    n = vecs.shape[0]
    visited = np.zeros(n, dtype=np.int64)
    eps = np.empty(1, dtype=np.int64)
    eps[0] = entry
    tag = 0
    layer = top
    while layer > 0:
        tag += 1
        _, ids = _search_layer(vecs, inv, nb0, c0, nbu, cu, q, eps, 1, layer, visited, tag)
        eps = ids[:1].copy()
        layer -= 1
    tag += 1
    return _search_layer(vecs, inv, nb0, c0, nbu, cu, q, eps, ef, 0, visited, tag)


# --------------------------------------------------------------------------
# index object

def _inv_norms(vecs32: np.ndarray) -> np.ndarray:
    v = vecs32.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    return 1.0 / norms


class VectorIndex:
    """Immutable once built; safe to share between threads for searching."""

    def __init__(self, ids, vecs, levels, nb0, c0, nbu, cu, entry, top, params: HnswParams, dim: int):
        self.ids: list[str] = list(ids)
        self.vecs = vecs
        self.inv = _inv_norms(vecs) if len(self.ids) else np.zeros(0)
        self.levels = levels
        self.nb0, self.c0, self.nbu, self.cu = nb0, c0, nbu, cu
        self.entry = int(entry)
        self.top = int(top)
        self.params = params
        self.dim = int(dim)
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))

    def __len__(self):
        return len(self.ids)

    def neighbors(self, node: int, layer: int) -> list[int]:
        if layer == 0:
            return self.nb0[node, :self.c0[node]].tolist()
        return self.nbu[node, layer - 1, :self.cu[node, layer - 1]].tolist()

    def _check_query(self, query) -> np.ndarray:
        q = np.ascontiguousarray(query, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise VectorIndexError(f"query dimension {q.shape[-1]} does not match index dimension {self.dim}")
        return q

    def _rank(self, nodes: np.ndarray, sims: np.ndarray, k: int) -> SearchResult:
        order = np.lexsort((self._id_rank[nodes], -sims))[:k]
        return [(self.ids[nodes[j]], float(sims[j])) for j in order]

    def search_knn(self, query, k: int = 10, ef_search: Optional[int] = None) -> SearchResult:
        if k < 1:
            raise VectorIndexError("k must be >= 1")
        if not self.ids:
            return []
        q = self._check_query(query)
        ef = max(ef_search or self.params.ef_search, k)
        sims, nodes = _knn(self.vecs, self.inv, self.nb0, self.c0, self.nbu, self.cu,
                           self.entry, self.top, q, ef)
        return self._rank(nodes, sims, k)

    def search_exact(self, query, k: int = 10) -> SearchResult:
        if k < 1:
            raise VectorIndexError("k must be >= 1")
        if not self.ids:
            return []
        q = self._check_query(query)
        sims = _score_all(self.vecs, self.inv, q)
        return self._rank(np.arange(len(self.ids)), sims, k)

    def degree_ok(self) -> bool:
        m = self.params.m
        if len(self.ids) and (self.c0.max() > 2 * m or (self.cu.size and self.cu.max() > m)):
            return False
        return True

    def layer0_connected(self) -> bool:
        """Whether layer 0, viewed as an undirected graph, is a single component."""
        n = len(self.ids)
        if n <= 1:
            return True
        adj = [set() for _ in range(n)]
        for i in range(n):
            for j in self.neighbors(i, 0):
                adj[i].add(j)
                adj[j].add(i)
        seen = {0}
        todo = deque([0])
        while todo:
            for j in adj[todo.popleft()]:
                if j not in seen:
                    seen.add(j)
                    todo.append(j)
        return len(seen) == n


def _empty_arrays(n: int, dim: int, top: int, m: int):
    layers = max(top, 0)
    return (
        np.zeros((n, dim), dtype=np.float32),
        np.full((n, 2 * m), -1, dtype=np.int64),
        np.zeros(n, dtype=np.int64),
        np.full((n, layers, m), -1, dtype=np.int64),
        np.zeros((n, layers), dtype=np.int64),
    )


def draw_levels(n: int, m: int, level_seed: int) -> np.ndarray:
    """Geometric node levels with multiplier 1/ln(m), drawn in insertion order."""
    rng = np.random.default_rng(level_seed & 0xFFFF_FFFF_FFFF_FFFF)
    u = rng.random(n)
    levels = np.floor(-np.log1p(-u) / math.log(m)).astype(np.int64)
    return np.minimum(levels, MAX_LEVEL)


def build_index(items: Sequence[tuple[str, np.ndarray]], params: HnswParams = HnswParams(),
                dim: Optional[int] = None) -> VectorIndex:
    ids = [cid for cid, _ in items]
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(c for c in ids if c in seen or seen.add(c))
        raise VectorIndexError(f"duplicate chunk_id {dup!r}")
    n = len(ids)
    if n == 0:
        d = dim or 0
        _, nb0, c0, nbu, cu = _empty_arrays(0, d, 0, params.m)
        return VectorIndex([], np.zeros((0, d), np.float32), np.zeros(0, np.int64), nb0, c0, nbu, cu, -1, -1, params, d)
    d = len(items[0][1])
    if dim is not None and d != dim:
        raise VectorIndexError(f"dimension mismatch: expected {dim}, got {d}")
    for cid, v in items:
        if len(v) != d:
            raise VectorIndexError(f"dimension mismatch for {cid!r}: expected {d}, got {len(v)}")
    vecs = np.ascontiguousarray(np.array([v for _, v in items], dtype=np.float32))
    norms = np.linalg.norm(vecs.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-5)
    if bad.size:
        raise VectorIndexError(f"vector for {ids[bad[0]]!r} is not unit norm ({norms[bad[0]]:.6f})")
    levels = draw_levels(n, params.m, params.level_seed)
    top = int(levels.max())
    _, nb0, c0, nbu, cu = _empty_arrays(n, d, top, params.m)
    inv = _inv_norms(vecs)
    entry, top = _build(vecs, inv, levels, params.m, params.ef_construction, nb0, c0, nbu, cu)
    return VectorIndex(ids, vecs, levels, nb0, c0, nbu, cu, entry, top, params, d)


def search_knn(index: VectorIndex, query, k: int = 10, ef_search: Optional[int] = None) -> SearchResult:
    return index.search_knn(query, k, ef_search)


def search_exact(index: VectorIndex, query, k: int = 10) -> SearchResult:
    return index.search_exact(query, k)


# --------------------------------------------------------------------------
# file format

def serialize_index(index: VectorIndex) -> bytes:
    p = index.params
    n = len(index.ids)
    parts = [
        MAGIC,
        _HEADER.pack(FORMAT_VERSION, p.m, p.ef_construction, p.ef_search,
                     p.level_seed & 0xFFFF_FFFF_FFFF_FFFF, index.dim, n, index.entry, max(index.top, 0)),
    ]
    for i, cid in enumerate(index.ids):
        raw = cid.encode("utf-8")
        parts.append(struct.pack("<HB", len(raw), int(index.levels[i])))
        parts.append(raw)
        parts.append(index.vecs[i].astype("<f4").tobytes())
    for i in range(n):
        for layer in range(int(index.levels[i]) + 1):
            nbrs = index.neighbors(i, layer)
            parts.append(struct.pack("<H", len(nbrs)))
            parts.append(np.asarray(nbrs, dtype="<u4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_index(data: bytes) -> VectorIndex:
    if len(data) < len(MAGIC) + _HEADER.size + 4:
        raise VectorIndexError("index file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise VectorIndexError("index checksum mismatch (file corrupt or truncated)")
    if body[:4] != MAGIC:
        raise VectorIndexError("not a CBIX index file")
    version, m, ef_c, ef_s, seed, dim, n, entry, top = _HEADER.unpack_from(body, 4)
    if version != FORMAT_VERSION:
        raise VectorIndexError(f"unsupported index format version {version}")
    params = HnswParams(m, ef_c, ef_s, seed)
    pos = 4 + _HEADER.size
    ids = []
    levels = np.zeros(n, dtype=np.int64)
    vecs = np.zeros((n, dim), dtype=np.float32)
    for i in range(n):
        length, lvl = struct.unpack_from("<HB", body, pos)
        pos += 3
        ids.append(body[pos:pos + length].decode("utf-8"))
        pos += length
        vecs[i] = np.frombuffer(body, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
        levels[i] = lvl
    if n == 0:
        top = -1
    _, nb0, c0, nbu, cu = _empty_arrays(n, dim, max(top, 0), m)
    for i in range(n):
        for layer in range(int(levels[i]) + 1):
            (cnt,) = struct.unpack_from("<H", body, pos)
            pos += 2
            nbrs = np.frombuffer(body, dtype="<u4", count=cnt, offset=pos).astype(np.int64)
            pos += 4 * cnt
            if layer == 0:
                nb0[i, :cnt] = nbrs
                c0[i] = cnt
            else:
                nbu[i, layer - 1, :cnt] = nbrs
                cu[i, layer - 1] = cnt
    if pos != len(body):
        raise VectorIndexError("trailing bytes in index file")
    return VectorIndex(ids, vecs, levels, nb0, c0, nbu, cu, entry, top, params, dim)
