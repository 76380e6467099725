"""The four chunking strategies: fixed-size windows, recursive separator
splitting, embedding breakpoint (semantic) chunking and header-based
structure-aware chunking.

Every chunker works on the canonical serialization of a document, so chunk
spans and query spans index the same text.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .docmodel import Heading, StructuredDocument, canonicalize
from .embed import cosine_similarity

STRATEGIES = ("fixed", "recursive", "semantic", "struct")


class ChunkError(ValueError):
    pass


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    strategy: str
    ordinal: int
    text: str
    char_span: tuple[int, int]
    header_path: tuple[str, ...] = ()

    def to_json(self) -> str:
        return json.dumps(
            {
                "chunk_id": self.chunk_id,
                "doc_id": self.doc_id,
                "strategy": self.strategy,
                "ordinal": self.ordinal,
                "text": self.text,
                "char_span": list(self.char_span),
                "header_path": list(self.header_path),
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "Chunk":
        d = json.loads(line)
        return cls(d["chunk_id"], d["doc_id"], d["strategy"], d["ordinal"], d["text"],
                   tuple(d["char_span"]), tuple(d["header_path"]))


def chunk_id(doc_id: str, strategy: str, ordinal: int) -> str:
    return f"{doc_id}:{strategy}:{ordinal:05d}"


def _make_chunks(doc_id: str, strategy: str, pieces: Iterable[tuple[str, tuple[int, int], tuple[str, ...]]]) -> list[Chunk]:
    return [
        Chunk(chunk_id(doc_id, strategy, i), doc_id, strategy, i, text, span, path)
        for i, (text, span, path) in enumerate(pieces)
    ]


def write_chunk_store(chunks: Iterable[Chunk]) -> str:
    return "".join(c.to_json() + "\n" for c in chunks)


def read_chunk_store(text: str) -> list[Chunk]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(Chunk.from_json(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise ChunkError(f"line {lineno}: invalid chunk record: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class FixedConfig:
    chunk_size: int = 512
    overlap: int = 128

    def __post_init__(self):
        if not 0 <= self.overlap < self.chunk_size:
            raise ChunkError("need 0 <= overlap < chunk_size")


@dataclass(frozen=True)
class RecursiveConfig:
    separators: tuple[str, ...] = ("\n\n", "\n", " ", "")
    chunk_size: int = 1024
    overlap: int = 100

    def __post_init__(self):
        object.__setattr__(self, "separators", tuple(self.separators))
        if not self.separators or self.separators[-1] != "":
            raise ChunkError("the last separator must be the empty string")
        if not 0 <= self.overlap < self.chunk_size:
            raise ChunkError("need 0 <= overlap < chunk_size")


@dataclass(frozen=True)
class SemanticConfig:
    percentile: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.percentile < 1.0:
            raise ChunkError("percentile must lie strictly between 0 and 1")


@dataclass(frozen=True)
class StructureConfig:
    max_header_level: int = 3

    def __post_init__(self):
        if not 1 <= self.max_header_level <= 3:
            raise ChunkError("max_header_level must be 1..3")


# --------------------------------------------------------------------------
# fixed-size

def fixed_windows(length: int, size: int, overlap: int) -> list[tuple[int, int]]:
    """Window spans at stride ``size - overlap``; stops once a window reaches the end."""
    stride = size - overlap
    spans = []
    start = 0
    while start < length:
        end = min(start + size, length)
        spans.append((start, end))
        if end == length:
            break
        start += stride
    return spans


def chunk_fixed(doc: StructuredDocument, cfg: FixedConfig = FixedConfig()) -> list[Chunk]:
    text, _ = canonicalize(doc)
    spans = fixed_windows(len(text), cfg.chunk_size, cfg.overlap)
    return _make_chunks(doc.doc_id, "fixed", ((text[s:e], (s, e), ()) for s, e in spans))


# --------------------------------------------------------------------------
# recursive

def _split_keep(text: str, start: int, end: int, sep: str) -> list[tuple[int, int]]:
    """Split text[start:end] on ``sep``, keeping each separator at the end of its piece."""
    if sep == "":
        return [(i, i + 1) for i in range(start, end)]
    pieces = []
    pos = start
    while pos < end:
        hit = text.find(sep, pos, end)
        if hit < 0:
            pieces.append((pos, end))
            break
        pieces.append((pos, hit + len(sep)))
        pos = hit + len(sep)
    return pieces


def _recursive_groups(text: str, start: int, end: int, separators: Sequence[str], size: int) -> list[list[tuple[int, int]]]:
    # first separator that occurs in this span; "" always qualifies
    for k, sep in enumerate(separators):
        if sep == "" or text.find(sep, start, end) >= 0:
            break
    rest = separators[k + 1:]
    groups: list[list[tuple[int, int]]] = []
    current: list[tuple[int, int]] = []
    current_len = 0
    for ps, pe in _split_keep(text, start, end, sep):
        n = pe - ps
        if n > size:
            if current:
                groups.append(current)
                current, current_len = [], 0
            groups.extend(_recursive_groups(text, ps, pe, rest, size))
            continue
        if current and current_len + n > size:
            groups.append(current)
            current, current_len = [], 0
        current.append((ps, pe))
        current_len += n
    if current:
        groups.append(current)
    return groups


def recursive_spans(text: str, cfg: RecursiveConfig = RecursiveConfig()) -> list[tuple[int, int]]:
    if not text:
        return []
    groups = _recursive_groups(text, 0, len(text), cfg.separators, cfg.chunk_size)
    spans = []
    for i, group in enumerate(groups):
        start = group[0][0]
        if i > 0 and cfg.overlap > 0:
            # longest suffix of whole pieces of the previous group within the overlap budget
            budget = cfg.overlap
            for ps, pe in reversed(groups[i - 1]):
                if pe - ps > budget:
                    break
                budget -= pe - ps
                start = ps
        spans.append((start, group[-1][1]))
    return spans


def chunk_recursive(doc: StructuredDocument, cfg: RecursiveConfig = RecursiveConfig()) -> list[Chunk]:
    text, _ = canonicalize(doc)
    return _make_chunks(doc.doc_id, "recursive", ((text[s:e], (s, e), ()) for s, e in recursive_spans(text, cfg)))


# --------------------------------------------------------------------------
# semantic

_PARA_BREAK_RE = re.compile(r"\n[ \t]*\n")
_SENT_END_RE = re.compile(r"[.!?](?=\s+[A-Z0-9])")


def split_sentences(text: str, offset: int = 0) -> list[tuple[str, tuple[int, int]]]:
    """Sentences split after ``.!?`` followed by whitespace and an uppercase
    letter or digit, and at blank lines. Spans exclude surrounding whitespace."""
    bounds = []
    seg_start = 0
    for m in _PARA_BREAK_RE.finditer(text):
        bounds.append((seg_start, m.start()))
        seg_start = m.end()
    bounds.append((seg_start, len(text)))

    out = []
    for s, e in bounds:
        cuts = [s] + [m.end() for m in _SENT_END_RE.finditer(text, s, e)] + [e]
        for a, b in zip(cuts, cuts[1:]):
            piece = text[a:b]
            stripped = piece.strip()
            if not stripped:
                continue
            lead = len(piece) - len(piece.lstrip())
            start = a + lead
            out.append((stripped, (offset + start, offset + start + len(stripped))))
    return out


def percentile(values: Sequence[float], p: float) -> float:
    """Linear interpolation between closest ranks at index ``p * (n - 1)``."""
    if len(values) == 0:
        raise ChunkError("percentile of an empty list")
    if not 0.0 <= p <= 1.0:
        raise ChunkError("p must lie in [0, 1]")
    xs = sorted(values)
    idx = p * (len(xs) - 1)
    lo = math.floor(idx)
    hi = math.ceil(idx)
    return xs[lo] + (idx - lo) * (xs[hi] - xs[lo])


def semantic_breakpoints(distances: Sequence[float], p: float) -> list[int]:
    """Indices i whose distance to the next sentence strictly exceeds the threshold."""
    if not distances:
        return []
    t = percentile(distances, p)
    return [i for i, d in enumerate(distances) if d > t]


def chunk_semantic(doc: StructuredDocument, cfg: SemanticConfig = SemanticConfig(),
                   embed: Callable[[str], np.ndarray] = None) -> list[Chunk]:
    if embed is None:
        raise ChunkError("semantic chunking needs an embedder")
    text, _ = canonicalize(doc)
    sentences = split_sentences(text)
    if not sentences:
        return []
    if hasattr(embed, "embed_batch"):
        vectors = embed.embed_batch([s for s, _ in sentences])
    else:
        vectors = [embed(s) for s, _ in sentences]
    distances = [1.0 - cosine_similarity(vectors[i], vectors[i + 1]) for i in range(len(vectors) - 1)]
    cuts = set(semantic_breakpoints(distances, cfg.percentile))
    groups = []
    first = 0
    for i in range(len(sentences)):
        if i in cuts or i == len(sentences) - 1:
            groups.append((sentences[first][1][0], sentences[i][1][1]))
            first = i + 1
    return _make_chunks(doc.doc_id, "semantic", ((text[s:e], (s, e), ()) for s, e in groups))


# --------------------------------------------------------------------------
# structure-aware

def chunk_structure(doc: StructuredDocument, cfg: StructureConfig = StructureConfig()) -> list[Chunk]:
    text, cdoc = canonicalize(doc)
    sections = []  # (header_path, heading block or None, body blocks)
    stack: list[Heading] = []
    heading = None
    body: list = []
    for block in cdoc.blocks:
        if isinstance(block, Heading) and block.level <= cfg.max_header_level:
            sections.append((tuple(h.text for h in stack), heading, body))
            stack = [h for h in stack if h.level < block.level] + [block]
            heading, body = block, []
        else:
            body.append(block)
    sections.append((tuple(h.text for h in stack), heading, body))

    pieces = []
    for path, head, blocks in sections:
        if not blocks:
            continue
        body_text = text[blocks[0].span[0]:blocks[-1].span[1]]
        if head is None:
            pieces.append((body_text, (blocks[0].span[0], blocks[-1].span[1]), ()))
        else:
            pieces.append((" > ".join(path) + "\n\n" + body_text, (head.span[0], blocks[-1].span[1]), path))
    return _make_chunks(doc.doc_id, "struct", pieces)


# --------------------------------------------------------------------------

def chunk_document(doc: StructuredDocument, strategy: str, config=None, embed=None) -> list[Chunk]:
    if strategy == "fixed":
        return chunk_fixed(doc, config or FixedConfig())
    if strategy == "recursive":
        return chunk_recursive(doc, config or RecursiveConfig())
    if strategy == "semantic":
        return chunk_semantic(doc, config or SemanticConfig(), embed)
    if strategy == "struct":
        return chunk_structure(doc, config or StructureConfig())
    raise ChunkError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")


def chunk_corpus(docs: Iterable[StructuredDocument], strategy: str, config=None, embed=None) -> list[Chunk]:
    out = []
    for doc in docs:
        out.extend(chunk_document(doc, strategy, config, embed))
    return out
