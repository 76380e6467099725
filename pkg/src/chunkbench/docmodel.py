"""Structured documents: a small markdown subset, corpus manifests, and a
seeded synthetic corpus generator covering three document categories."""

from __future__ import annotations

import itertools
import json
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Union

Span = tuple[int, int]


class DocumentError(ValueError):
    """Raised for malformed documents, manifests and corpora."""


class DocumentCategory(str, Enum):
    TEXT_HEAVY = "text_heavy"
    TABLE_HEAVY = "table_heavy"
    DIAGRAM_REF = "diagram_ref"


@dataclass(frozen=True)
class Heading:
    level: int
    text: str
    span: Optional[Span] = None

    def __post_init__(self):
        if self.level not in (1, 2, 3):
            raise DocumentError(f"heading level must be 1..3, got {self.level}")


@dataclass(frozen=True)
class Paragraph:
    text: str
    span: Optional[Span] = None


@dataclass(frozen=True)
class Table:
    rows: tuple[tuple[str, ...], ...]
    span: Optional[Span] = None

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.rows)
        object.__setattr__(self, "rows", rows)
        if not rows:
            raise DocumentError("table must have at least one row")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise DocumentError("table rows must all have the same column count")


@dataclass(frozen=True)
class FigureRef:
    caption: str
    span: Optional[Span] = None


Block = Union[Heading, Paragraph, Table, FigureRef]


@dataclass(frozen=True)
class StructuredDocument:
    doc_id: str
    category: Optional[DocumentCategory]
    blocks: tuple[Block, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.doc_id:
            raise DocumentError("doc_id must be non-empty")
        if any(c.isspace() for c in self.doc_id) or ":" in self.doc_id:
            raise DocumentError(f"doc_id {self.doc_id!r} may not contain whitespace or ':'")
        prev_end = -1
        for b in self.blocks:
            if b.span is None:
                continue
            start, end = b.span
            if start < prev_end or end <= start:
                raise DocumentError(f"block spans must be non-overlapping and increasing: {b.span}")
            prev_end = end

    @property
    def text(self) -> str:
        return serialize_markdown(self)


# --------------------------------------------------------------------------
# markdown subset

_HEADING_RE = re.compile(r"^(#{1,3}) +(\S.*?)\s*$")
_IMAGE_RE = re.compile(r"^!\[([^\]]*)\]\([^)]*\)\s*$")
_DELIM_CELL_RE = re.compile(r"^:?-{3,}:?$")


def _split_row(line: str) -> list[str]:
    s = line.strip()
    if s.startswith("|"):
        s = s[1:]
    if s.endswith("|"):
        s = s[:-1]
    return [c.strip() for c in s.split("|")]


def _is_delimiter(line: str) -> bool:
    if "-" not in line or not line.strip().startswith("|"):
        return False
    return all(_DELIM_CELL_RE.match(c) for c in _split_row(line))


def _is_table_start(lines: list[str], i: int) -> bool:
    return (
        lines[i].lstrip().startswith("|")
        and i + 1 < len(lines)
        and _is_delimiter(lines[i + 1])
    )


def _figure_caption(line: str) -> Optional[str]:
    m = _IMAGE_RE.match(line)
    if m:
        return m.group(1).strip()
    if line.startswith("Figure:"):
        return line[len("Figure:"):].strip()
    return None


def parse_markdown(text: str, doc_id: str = "doc", category: Optional[DocumentCategory] = None) -> StructuredDocument:
    """Parse the markdown subset into blocks whose spans index ``text``.

    Offsets count code points (Python ``str`` indices).
    """
    lines = text.split("\n")
    starts = []
    pos = 0
    for line in lines:
        starts.append(pos)
        pos += len(line) + 1

    def end_of(i: int) -> int:
        return starts[i] + len(lines[i])

    blocks: list[Block] = []
    i = 0
    n = len(lines)
    while i < n:
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        m = _HEADING_RE.match(line)
        if m:
            blocks.append(Heading(len(m.group(1)), m.group(2), (starts[i], end_of(i))))
            i += 1
            continue
        if _is_table_start(lines, i):
            header = _split_row(line)
            if len(_split_row(lines[i + 1])) != len(header):
                raise DocumentError(f"malformed table: ragged row at line {i + 2}")
            rows = [header]
            j = i + 2
            while j < n and lines[j].lstrip().startswith("|"):
                row = _split_row(lines[j])
                if len(row) != len(header):
                    raise DocumentError(f"malformed table: ragged row at line {j + 1}")
                rows.append(row)
                j += 1
            blocks.append(Table(tuple(map(tuple, rows)), (starts[i], end_of(j - 1))))
            i = j
            continue
        caption = _figure_caption(line)
        if caption is not None:
            blocks.append(FigureRef(caption, (starts[i], end_of(i))))
            i += 1
            continue
        j = i + 1
        while j < n:
            nxt = lines[j]
            if (
                not nxt.strip()
                or _HEADING_RE.match(nxt)
                or _figure_caption(nxt) is not None
                or _is_table_start(lines, j)
            ):
                break
            j += 1
        start, end = starts[i], end_of(j - 1)
        blocks.append(Paragraph(text[start:end], (start, end)))
        i = j
    return StructuredDocument(doc_id, category, tuple(blocks))


def _render_block(block: Block) -> str:
    if isinstance(block, Heading):
        return "#" * block.level + " " + block.text
    if isinstance(block, Paragraph):
        return block.text
    if isinstance(block, FigureRef):
        return "Figure: " + block.caption
    if isinstance(block, Table):
        for row in block.rows:
            for cell in row:
                if "|" in cell or "\n" in cell:
                    raise DocumentError(f"table cell {cell!r} cannot be serialized")
        ncols = len(block.rows[0])
        lines = ["| " + " | ".join(block.rows[0]) + " |", "|" + "|".join(["---"] * ncols) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in block.rows[1:]]
        return "\n".join(lines)
    raise TypeError(f"unknown block type {type(block).__name__}")


def serialize_markdown(doc: Union[StructuredDocument, Iterable[Block]]) -> str:
    blocks = doc.blocks if isinstance(doc, StructuredDocument) else doc
    return "\n\n".join(_render_block(b) for b in blocks)


def canonicalize(doc: StructuredDocument) -> tuple[str, StructuredDocument]:
    """Return the canonical serialization and a document whose spans index it."""
    text = serialize_markdown(doc)
    return text, parse_markdown(text, doc.doc_id, doc.category)


# --------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestEntry:
    doc_id: str
    category: DocumentCategory
    path: str


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: Optional[int] = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.doc_id in seen:
                raise DocumentError(f"duplicate doc_id in manifest: {e.doc_id}")
            seen.add(e.doc_id)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "entries": [
                {"doc_id": e.doc_id, "category": e.category.value, "path": e.path}
                for e in self.entries
            ],
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        try:
            payload = json.loads(text)
            entries = [
                ManifestEntry(e["doc_id"], DocumentCategory(e["category"]), e["path"])
                for e in payload["entries"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise DocumentError(f"invalid manifest: {exc}") from exc
        return cls(entries, payload.get("seed"))


def save_corpus(out_dir, manifest: CorpusManifest, docs: list[StructuredDocument]) -> Path:
    """Write documents and ``manifest.json`` under ``out_dir``; return the manifest path."""
    out_dir = Path(out_dir)
    by_id = {d.doc_id: d for d in docs}
    for entry in manifest.entries:
        path = out_dir / entry.path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(serialize_markdown(by_id[entry.doc_id]), encoding="utf-8", newline="")
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(manifest.to_json(), encoding="utf-8")
    return manifest_path


def load_manifest(manifest_path) -> CorpusManifest:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DocumentError(f"manifest not found: {manifest_path}")
    return CorpusManifest.from_json(manifest_path.read_text(encoding="utf-8"))


def load_corpus(manifest_path) -> list[StructuredDocument]:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    docs = []
    for entry in manifest.entries:
        path = Path(entry.path)
        if not path.is_absolute():
            path = manifest_path.parent / path
        if not path.exists():
            raise DocumentError(f"document file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            docs.append(parse_markdown(text, entry.doc_id, entry.category))
        except DocumentError as exc:
            raise DocumentError(f"{path}: {exc}") from exc
    return docs


# --------------------------------------------------------------------------
# synthetic corpus

_FUNCTION_WORDS = (
    "the", "of", "and", "to", "in", "for", "with", "on", "at", "by",
    "is", "are", "shall", "be", "must", "from", "as", "per", "before", "after",
)
_ONSETS = ("b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "cr", "dr", "fl", "gr", "kl", "pr", "st", "tr", "sk", "sp", "th")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ea", "io", "ou")
_CODAS = ("", "", "n", "r", "s", "l", "m", "x", "nd", "rt", "st", "ck")
_TAG_PREFIXES = ("PT", "TT", "FT", "LT", "PV", "FV", "XV", "HV", "PSV", "LIC", "FIC", "TIC", "PCV", "ESD")
_UNITS = ("bar", "barg", "degC", "m3/h", "kPa", "mm", "kg/h", "ppm", "psi", "kW")

N_THEMES = 40
THEME_SIZE = 160
_VOCAB_SEED = 0x5EED_C0DE
FOCUS_FROM = 20
FOCUS_SIZE = 6
FOCUS_RATE = 0.45


def _build_vocabulary() -> list[list[str]]:
    rng = random.Random(_VOCAB_SEED)
    seen = set(_FUNCTION_WORDS)
    themes = []
    for _ in range(N_THEMES):
        words = []
        while len(words) < THEME_SIZE:
            w = "".join(
                rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS)
                for _ in range(rng.randint(1, 2))
            )
            if w not in seen:
                seen.add(w)
                words.append(w)
        themes.append(words)
    return themes


THEMES = _build_vocabulary()
# Zipf-weighted draws: frequent theme words recur within a section, rare ones identify passages
_THEME_CUM = list(itertools.accumulate(1.0 / (r + 1) for r in range(THEME_SIZE)))
_FUNC_CUM = list(itertools.accumulate(1.0 / (r + 1) for r in range(len(_FUNCTION_WORDS))))


class _Writer:
    """Seeded word-list Markov generator; each section writes from one theme."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.focus: list[str] = []

    def section(self, theme: int) -> int:
        """Start a section: pick a few rarer theme words that this section keeps returning to."""
        self.focus = self.rng.sample(THEMES[theme][FOCUS_FROM:], FOCUS_SIZE)
        return theme

    def tag(self) -> str:
        return f"{self.rng.choice(_TAG_PREFIXES)}-{self.rng.randint(1000, 9999)}"

    def word(self, theme: int) -> str:
        if self.focus and self.rng.random() < FOCUS_RATE:
            return self.rng.choice(self.focus)
        return self.rng.choices(THEMES[theme], cum_weights=_THEME_CUM)[0]

    def words(self, theme: int, n: int) -> list[str]:
        return [self.word(theme) for _ in range(n)]

    def sentence(self, theme: int, tags: int = 0) -> str:
        rng = self.rng
        length = rng.randint(7, 16)
        out = []
        content = True
        for _ in range(length):
            if content:
                out.append(self.word(theme))
                content = rng.random() < 0.65
            else:
                out.append(rng.choices(_FUNCTION_WORDS, cum_weights=_FUNC_CUM)[0])
                content = rng.random() < 0.85
        for _ in range(tags):
            out.insert(rng.randint(1, len(out)), self.tag())
        if rng.random() < 0.15:
            out.insert(rng.randint(1, len(out)), f"{rng.randint(1, 400)}.{rng.randint(0, 9)} {rng.choice(_UNITS)}")
        out[0] = out[0].capitalize()
        return " ".join(out) + "."

    def paragraph(self, theme: int, n_sentences: int, tags: int = 0) -> Paragraph:
        return Paragraph(" ".join(self.sentence(theme, tags) for _ in range(n_sentences)))

    def heading(self, level: int, theme: int) -> Heading:
        return Heading(level, " ".join(w.capitalize() for w in self.words(theme, self.rng.randint(2, 4))))

    def table(self, theme: int, n_rows: int, n_cols: int) -> Table:
        rng = self.rng
        header = tuple(w.capitalize() for w in self.words(theme, n_cols))
        kinds = ["tag"] + [rng.choice(("word", "value", "words")) for _ in range(n_cols - 1)]
        rows = [header]
        for _ in range(n_rows):
            row = []
            for kind in kinds:
                if kind == "tag":
                    row.append(self.tag())
                elif kind == "value":
                    row.append(f"{rng.randint(0, 999)}.{rng.randint(0, 99):02d} {rng.choice(_UNITS)}")
                elif kind == "word":
                    row.append(self.word(theme))
                else:
                    row.append(" ".join(self.words(theme, rng.randint(2, 4))))
            rows.append(tuple(row))
        return Table(tuple(rows))


def _next_level(rng: random.Random, prev: int) -> int:
    choices = [lvl for lvl in (1, 2, 3) if lvl <= prev + 1]
    weights = {1: 0.15, 2: 0.45, 3: 0.40}
    return rng.choices(choices, [weights[c] for c in choices])[0]


def _text_heavy(w: _Writer) -> list[Block]:
    rng = w.rng
    n_sections = rng.randint(11, 14)
    total = rng.randint(160, 220)
    per = [4] * n_sections
    for _ in range(total - sum(per)):
        per[rng.randrange(n_sections)] += 1
    blocks: list[Block] = []
    level = 1
    for s in range(n_sections):
        theme = w.section(rng.randrange(N_THEMES))
        level = 1 if s == 0 else _next_level(rng, level)
        blocks.append(w.heading(level, theme))
        remaining = per[s]
        while remaining > 0:
            k = min(remaining, rng.randint(2, 4))
            blocks.append(w.paragraph(theme, k))
            remaining -= k
    return blocks


def _table_heavy(w: _Writer) -> list[Block]:
    rng = w.rng
    theme = w.section(rng.randrange(N_THEMES))
    blocks: list[Block] = [w.heading(1, theme), w.paragraph(theme, rng.randint(2, 3))]
    for _ in range(rng.randint(4, 7)):
        theme = w.section(rng.randrange(N_THEMES))
        blocks.append(w.heading(2, theme))
        blocks.append(w.paragraph(theme, rng.randint(1, 2)))
        for _ in range(rng.randint(1, 2)):
            blocks.append(w.table(theme, rng.randint(6, 14), rng.randint(4, 5)))

    def table_share(bs):
        sizes = [(len(_render_block(b)), isinstance(b, Table)) for b in bs]
        return sum(n for n, t in sizes if t) / sum(n for n, _ in sizes)

    while table_share(blocks) < 0.6:
        blocks.append(w.table(theme, rng.randint(6, 14), rng.randint(4, 5)))
    return blocks


def _diagram_ref(w: _Writer) -> list[Block]:
    rng = w.rng
    theme = w.section(rng.randrange(N_THEMES))
    blocks: list[Block] = [w.heading(1, theme)]
    budget = 30
    for _ in range(rng.randint(2, 4)):
        theme = w.section(rng.randrange(N_THEMES))
        blocks.append(w.heading(2, theme))
        blocks.append(FigureRef(f"Sheet {rng.randint(1, 40)} {' '.join(w.words(theme, 3))} {w.tag()} {w.tag()}"))
        for _ in range(rng.randint(1, 3)):
            k = min(budget, rng.randint(1, 3))
            if k <= 0:
                break
            blocks.append(w.paragraph(theme, k, tags=1))
            budget -= k
        blocks.append(w.table(theme, rng.randint(4, 9), 4))
    return blocks


_GENERATORS = {
    DocumentCategory.TEXT_HEAVY: ("txt", _text_heavy),
    DocumentCategory.TABLE_HEAVY: ("tab", _table_heavy),
    DocumentCategory.DIAGRAM_REF: ("pid", _diagram_ref),
}


def generate_corpus(seed: int, per_category: int = 20) -> tuple[CorpusManifest, list[StructuredDocument]]:
    """Generate ``per_category`` documents for each category, deterministically from ``seed``."""
    if per_category < 1:
        raise DocumentError("per_category must be >= 1")
    rng = random.Random(seed)
    writer = _Writer(rng)
    docs = []
    entries = []
    for category, (prefix, make) in _GENERATORS.items():
        for i in range(per_category):
            doc_id = f"{prefix}{i:03d}"
            text = serialize_markdown(make(writer))
            docs.append(parse_markdown(text, doc_id, category))
            entries.append(ManifestEntry(doc_id, category, f"docs/{doc_id}.md"))
    return CorpusManifest(entries, seed), docs
