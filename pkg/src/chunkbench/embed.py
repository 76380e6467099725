"""Embeddings: a deterministic signed feature-hashing embedder, an HTTP client
for remote embedding services, an on-disk cache, and cosine similarity."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[^\W_]+")

ENV_URL = "CHUNKBENCH_EMBED_URL"
ENV_KEY = "CHUNKBENCH_EMBED_KEY"
ENV_MODEL = "CHUNKBENCH_EMBED_MODEL"


class EmbeddingError(ValueError):
    pass


class RemoteEmbeddingError(RuntimeError):
    """Transport, status or protocol failure talking to a remote embedder."""


@dataclass(frozen=True)
class LocalSpec:
    dim: int = 256
    hash_seed: int = 0

    def __post_init__(self):
        if self.dim < 8:
            raise EmbeddingError("local embedder dim must be >= 8")

    @property
    def model_id(self) -> str:
        return f"local-hash:dim={self.dim}:seed={self.hash_seed}"


@dataclass(frozen=True)
class RemoteSpec:
    endpoint: str
    model: str = "text-embedding"
    api_key: Optional[str] = None
    timeout: float = 30.0
    batch_size: int = 64
    max_attempts: int = 3
    backoff: float = 0.5
    concurrency: int = 4

    def __post_init__(self):
        if not self.endpoint:
            raise EmbeddingError("remote embedder endpoint must be non-empty")

    @property
    def model_id(self) -> str:
        return f"remote:{self.endpoint}:{self.model}"

    @classmethod
    def from_env(cls, **overrides) -> "RemoteSpec":
        kw = {
            "endpoint": os.environ.get(ENV_URL, ""),
            "model": os.environ.get(ENV_MODEL, "text-embedding"),
            "api_key": os.environ.get(ENV_KEY),
        }
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


# --------------------------------------------------------------------------
# vector math

def normalize(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    norm = float(np.sqrt(np.dot(v, v)))
    if norm == 0.0 or not np.isfinite(norm):
        raise EmbeddingError("cannot normalize a zero or non-finite vector")
    return v / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product of two unit vectors, clipped to [-1, 1]."""
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(min(1.0, max(-1.0, float(np.dot(a, b)))))


# --------------------------------------------------------------------------
# local embedder

def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@lru_cache(maxsize=1 << 18)
def _token_slot(token: str, dim: int, hash_seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=hash_seed.to_bytes(8, "little", signed=False)
    ).digest()
    h = int.from_bytes(digest, "little")
    return h % dim, (1.0 if (h >> 63) & 1 else -1.0)


def embed_local(text: str, spec: LocalSpec = LocalSpec()) -> np.ndarray:
    tokens = tokenize(text)
    if not tokens:
        raise EmbeddingError("unembeddable text: no alphanumeric tokens")
    seed = spec.hash_seed & 0xFFFF_FFFF_FFFF_FFFF
    v = np.zeros(spec.dim, dtype=np.float64)
    for tok in tokens:
        idx, sign = _token_slot(tok, spec.dim, seed)
        v[idx] += sign
    if not v.any():
        # every token cancelled out; fall back to unsigned counts
        for tok in tokens:
            v[_token_slot(tok, spec.dim, seed)[0]] += 1.0
    return normalize(v)


# --------------------------------------------------------------------------
# remote embedder

class RemoteClient:
    """Batched client for ``POST {endpoint}/embed``.

    The first response fixes the embedding dimension for the lifetime of
    the client; later responses with another dimension are an error.
    """

    def __init__(self, spec: RemoteSpec, transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.spec = spec
        self.dim: Optional[int] = None
        self._sleep = sleep
        self._lock = threading.Lock()
        headers = {}
        if spec.api_key:
            headers["Authorization"] = f"Bearer {spec.api_key}"
        self._http = httpx.Client(timeout=spec.timeout, headers=headers, transport=transport)

    def close(self):
        self._http.close()

    def _post(self, texts: list[str]) -> list[list[float]]:
        url = self.spec.endpoint.rstrip("/") + "/embed"
        body = {"model": self.spec.model, "texts": texts}
        last = None
        for attempt in range(self.spec.max_attempts):
            if attempt:
                self._sleep(self.spec.backoff * 2 ** (attempt - 1))
            try:
                resp = self._http.post(url, json=body)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                log.warning("embed request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                log.warning("embed request failed (attempt %d): %s", attempt + 1, last)
                continue
            if not 200 <= resp.status_code < 300:
                raise RemoteEmbeddingError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                vectors = resp.json()["vectors"]
            except (ValueError, KeyError, TypeError) as exc:
                raise RemoteEmbeddingError(f"malformed response: {exc}") from exc
            if len(vectors) != len(texts):
                raise RemoteEmbeddingError(f"expected {len(texts)} vectors, got {len(vectors)}")
            return vectors
        raise RemoteEmbeddingError(f"giving up after {self.spec.max_attempts} attempts; last error: {last}")

    def _check_dim(self, vec: np.ndarray) -> np.ndarray:
        with self._lock:
            if self.dim is None:
                self.dim = vec.shape[0]
            elif vec.shape[0] != self.dim:
                raise RemoteEmbeddingError(
                    f"dimension mismatch: expected {self.dim}, got {vec.shape[0]}"
                )
        return vec

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        for t in texts:
            if not t:
                raise EmbeddingError("cannot embed an empty text")
        size = self.spec.batch_size
        batches = [texts[i:i + size] for i in range(0, len(texts), size)]
        if len(batches) <= 1 or self.spec.concurrency <= 1:
            raw = [self._post(b) for b in batches]
        else:
            with ThreadPoolExecutor(self.spec.concurrency) as pool:
                raw = list(pool.map(self._post, batches))
        out = []
        for batch in raw:
            for values in batch:
                try:
                    vec = normalize(values)
                except EmbeddingError as exc:
                    raise RemoteEmbeddingError(f"bad vector from server: {exc}") from exc
                out.append(self._check_dim(vec))
        return out


def embed_remote(texts: Sequence[str], spec: RemoteSpec,
                 transport: Optional[httpx.BaseTransport] = None) -> list[np.ndarray]:
    client = RemoteClient(spec, transport=transport)
    try:
        return client.embed_batch(texts)
    finally:
        client.close()


# --------------------------------------------------------------------------
# cache

def cache_key(model_id: str, text: str) -> str:
    return hashlib.sha256(model_id.encode("utf-8") + b"\x00" + text.encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Append-only JSON-lines store of ``{digest, dim, values}`` records.

    Corrupt records are dropped on load and the file is rewritten without them.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, np.ndarray] = {}
        self._load()

    def _load(self):
        if not self.path.exists():
            return
        corrupt = 0
        for line in self.path.read_text(encoding="utf-8").splitlines():
            try:
                rec = json.loads(line)
                vec = np.asarray(rec["values"], dtype=np.float64)
                if vec.shape != (rec["dim"],) or abs(float(np.dot(vec, vec)) - 1.0) > 1e-6:
                    raise ValueError("bad vector")
                self._entries[str(rec["digest"])] = vec
            except (ValueError, KeyError, TypeError):
                corrupt += 1
        if corrupt:
            log.warning("dropped %d corrupt cache records from %s", corrupt, self.path)
            self._rewrite()

    def _record(self, digest: str, vec: np.ndarray) -> str:
        return json.dumps({"digest": digest, "dim": int(vec.shape[0]), "values": vec.tolist()})

    def _rewrite(self):
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text("".join(self._record(d, v) + "\n" for d, v in self._entries.items()), encoding="utf-8")
        tmp.replace(self.path)

    def __len__(self):
        return len(self._entries)

    def lookup(self, digest: str) -> Optional[np.ndarray]:
        return self._entries.get(digest)

    def store(self, digest: str, vec: np.ndarray):
        with self._lock:
            self._entries[digest] = vec
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(self._record(digest, vec) + "\n")


# --------------------------------------------------------------------------
# unified embedder

class Embedder:
    """Callable text -> unit vector, backed by the local hasher or a remote
    service, with optional caching and a call counter."""

    def __init__(self, spec, cache_path=None, transport: Optional[httpx.BaseTransport] = None):
        self.spec = spec
        self.calls = 0
        self.cache = EmbeddingCache(cache_path) if cache_path else None
        self._client = RemoteClient(spec, transport=transport) if isinstance(spec, RemoteSpec) else None
        self._count_lock = threading.Lock()

    @property
    def model_id(self) -> str:
        return self.spec.model_id

    def __call__(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        with self._count_lock:
            self.calls += len(texts)
        out: list[Optional[np.ndarray]] = [None] * len(texts)
        missing = []
        for i, t in enumerate(texts):
            if self.cache is not None:
                hit = self.cache.lookup(cache_key(self.model_id, t))
                if hit is not None:
                    out[i] = hit
                    continue
            missing.append(i)
        if missing:
            if self._client is not None:
                fresh = self._client.embed_batch([texts[i] for i in missing])
            else:
                fresh = [embed_local(texts[i], self.spec) for i in missing]
            for i, vec in zip(missing, fresh):
                out[i] = vec
                if self.cache is not None:
                    self.cache.store(cache_key(self.model_id, texts[i]), vec)
        return out  # type: ignore[return-value]

    def close(self):
        if self._client is not None:
            self._client.close()
