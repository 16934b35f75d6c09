"""Parsers for corpora, label hierarchies, label descriptions and embeddings.

All file formats are UTF-8 text:

* corpus: ``3,7<TAB>the cat sat`` (comma-separated label ids, then text)
* hierarchy: ``parent_id<TAB>child_id``; ``#`` starts a comment
* descriptions: ``label_id<TAB>description text``
* embeddings: word2vec text format, optional ``V d`` header line

Text is tokenized by lowercasing and splitting on whitespace. Words not in
the vocabulary map to a reserved unknown token whose embedding is zero;
they still occupy a position and count towards truncation.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ShapeError, ValidationError

UNK = "<unk>"
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    index: Mapping[str, int] = field(repr=False, compare=False)
    unk_id: int

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        """Build a vocabulary over ``words`` with the unknown token appended last."""
        words = list(words)
        index: dict[str, int] = {}
        for i, w in enumerate(words):
            if w in index:
                raise ValidationError(f"duplicate vocabulary word {w!r}")
            index[w] = i
        if UNK in index:
            raise ValidationError(f"vocabulary already defines the reserved token {UNK!r}")
        index[UNK] = len(words)
        words.append(UNK)
        return cls(tuple(words), index, len(words) - 1)

    def __len__(self):
        return len(self.words)

    def lookup(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    def tokenize(self, text: str, max_tokens: int | None = None) -> list[int]:
        ids = [self.lookup(w) for w in text.lower().split()]
        return ids if max_tokens is None else ids[:max_tokens]


@dataclass(frozen=True)
class EmbeddingTable:
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise ShapeError(f"embedding table must be V x d, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValidationError("embedding table has non-finite entries")
        self.matrix.setflags(write=False)

    @property
    def d_model(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class Example:
    id: int
    tokens: tuple[int, ...]
    labels: tuple[int, ...]


@dataclass(frozen=True)
class Corpus:
    examples: tuple[Example, ...]
    num_labels: int
    split: str = "train"

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def label_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_labels, dtype=np.int64)
        for ex in self.examples:
            counts[list(ex.labels)] += 1
        return counts

    def mean_labels(self) -> float:
        if not self.examples:
            return 0.0
        return sum(len(ex.labels) for ex in self.examples) / len(self.examples)


@dataclass(frozen=True)
class LabelTree:
    """Parent links plus per-label description token ids."""

    num_labels: int
    parent: Mapping[int, int]
    descriptions: Mapping[int, tuple[int, ...]] = field(default_factory=dict)

    def par(self, label: int) -> int | None:
        return self.parent.get(label)

    def description(self, label: int) -> tuple[int, ...]:
        return self.descriptions.get(label, ())


def _read_lines(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            yield path, lineno, raw.rstrip("\n").rstrip("\r")


def _parse_label_list(field_: str, path, lineno) -> list[int]:
    if not field_.strip():
        return []
    try:
        return [int(tok) for tok in field_.split(",")]
    except ValueError:
        raise ParseError(f"non-integer label in {field_!r}", path, lineno) from None


def _check_id(label: int, num_labels: int, path, lineno, what="label id"):
    if label < 0 or label >= num_labels:
        raise ValidationError(f"{what} {label} outside [0, {num_labels})", path, lineno)


def load_text_corpus(path, vocab: Vocabulary, max_tokens: int, num_labels: int, split: str = "train") -> Corpus:
    if max_tokens <= 0:
        raise ValueError("max_tokens must be positive")
    examples = []
    for path_, lineno, line in _read_lines(path):
        if "\t" not in line:
            raise ParseError("missing TAB between labels and text", path_, lineno)
        label_field, text = line.split("\t", 1)
        labels = _parse_label_list(label_field, path_, lineno)
        for lab in labels:
            _check_id(lab, num_labels, path_, lineno)
        tokens = vocab.tokenize(text, max_tokens)
        example_id = len(examples)
        if not tokens:
            raise ValidationError(f"example {example_id} has no tokens", path_, lineno)
        examples.append(Example(example_id, tuple(tokens), tuple(sorted(set(labels)))))
    return Corpus(tuple(examples), num_labels, split)


def load_id_corpus(path, vocab_size: int, num_labels: int, split: str = "train") -> Corpus:
    """Read the normalized ``labels<TAB>token ids`` form written by :func:`write_id_corpus`."""
    examples = []
    for path_, lineno, line in _read_lines(path):
        if "\t" not in line:
            raise ParseError("missing TAB between labels and token ids", path_, lineno)
        label_field, ids = line.split("\t", 1)
        labels = _parse_label_list(label_field, path_, lineno)
        for lab in labels:
            _check_id(lab, num_labels, path_, lineno)
        try:
            tokens = tuple(int(t) for t in ids.split())
        except ValueError:
            raise ParseError("non-integer token id", path_, lineno) from None
        if not tokens:
            raise ValidationError(f"example {len(examples)} has no tokens", path_, lineno)
        if min(tokens) < 0 or max(tokens) >= vocab_size:
            raise ValidationError("token id outside vocabulary", path_, lineno)
        examples.append(Example(len(examples), tokens, tuple(sorted(set(labels)))))
    return Corpus(tuple(examples), num_labels, split)


def write_id_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in corpus:
            fh.write(",".join(map(str, ex.labels)) + "\t" + " ".join(map(str, ex.tokens)) + "\n")


def serialize_corpus(corpus: Corpus, vocab: Vocabulary) -> str:
    """Render ``corpus`` in the canonical text format that the loader reads."""
    buf = io.StringIO()
    for ex in corpus:
        buf.write(",".join(map(str, ex.labels)))
        buf.write("\t")
        buf.write(" ".join(vocab.words[t] for t in ex.tokens))
        buf.write("\n")
    return buf.getvalue()


def load_label_hierarchy(path, num_labels: int) -> dict[int, int]:
    parent: dict[int, int] = {}
    for path_, lineno, line in _read_lines(path):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        fields = body.split()
        if len(fields) != 2:
            raise ParseError("expected 'parent<TAB>child'", path_, lineno)
        try:
            p, c = int(fields[0]), int(fields[1])
        except ValueError:
            raise ParseError("non-integer label id", path_, lineno) from None
        _check_id(p, num_labels, path_, lineno)
        _check_id(c, num_labels, path_, lineno)
        if c in parent and parent[c] != p:
            raise ValidationError(f"label {c} has conflicting parents {parent[c]} and {p}", path_, lineno)
        parent[c] = p
    cycle = find_cycle(parent)
    if cycle:
        raise ValidationError("hierarchy contains a cycle: " + " -> ".join(map(str, cycle)), Path(path))
    return parent


def find_cycle(parent: Mapping[int, int]) -> list[int] | None:
    """Return one cycle in the parent map as a closed walk, or None."""
    state: dict[int, int] = {}  # 1 = on current walk, 2 = known acyclic
    for start in sorted(parent):
        walk = []
        node = start
        while node is not None and state.get(node) is None:
            state[node] = 1
            walk.append(node)
            node = parent.get(node)
        if node is not None and state.get(node) == 1:
            i = walk.index(node)
            return walk[i:] + [node]
        for n in walk:
            state[n] = 2
    return None


def load_label_descriptions(path, vocab: Vocabulary, max_tokens: int, num_labels: int) -> dict[int, tuple[int, ...]]:
    out: dict[int, tuple[int, ...]] = {}
    for path_, lineno, line in _read_lines(path):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ParseError("expected 'label_id<TAB>text'", path_, lineno)
        label_field, text = line.split("\t", 1)
        try:
            label = int(label_field)
        except ValueError:
            raise ParseError(f"non-integer label id {label_field!r}", path_, lineno) from None
        _check_id(label, num_labels, path_, lineno)
        if label in out:
            raise ValidationError(f"duplicate description for label {label}", path_, lineno)
        out[label] = tuple(vocab.tokenize(text, max_tokens))
    return out


def load_label_tree(hierarchy_path, descriptions_path, vocab: Vocabulary, desc_tokens: int, num_labels: int) -> LabelTree:
    return LabelTree(
        num_labels,
        load_label_hierarchy(hierarchy_path, num_labels),
        load_label_descriptions(descriptions_path, vocab, desc_tokens, num_labels),
    )


def load_embeddings(path) -> tuple[Vocabulary, EmbeddingTable]:
    words: list[str] = []
    rows: list[list[float]] = []
    declared = None
    dim = None
    for path_, lineno, line in _read_lines(path):
        fields = line.split()
        if not fields:
            continue
        if lineno == 1 and len(fields) == 2 and all(f.isdigit() for f in fields):
            declared = int(fields[0])
            dim = int(fields[1])
            continue
        word, values = fields[0], fields[1:]
        if dim is None:
            dim = len(values)
            if dim == 0:
                raise ParseError(f"word {word!r} has no vector", path_, lineno)
        if len(values) != dim:
            raise ParseError(f"expected {dim} values for {word!r}, found {len(values)}", path_, lineno)
        try:
            vec = [float(v) for v in values]
        except ValueError:
            raise ParseError(f"non-numeric vector entry for {word!r}", path_, lineno) from None
        if not all(math.isfinite(v) for v in vec):
            raise ValidationError(f"non-finite vector entry for {word!r}", path_, lineno)
        words.append(word)
        rows.append(vec)
    if dim is None:
        raise ParseError("embedding file is empty", Path(path))
    if declared is not None and declared != len(words):
        raise ParseError(f"header declares {declared} words, file has {len(words)}", Path(path), 1)
    try:
        vocab = Vocabulary.from_words(words)
    except ValidationError as exc:
        raise ValidationError(str(exc), Path(path)) from None
    matrix = np.zeros((len(words) + 1, dim), dtype=np.float64)
    if rows:
        matrix[:-1] = np.asarray(rows, dtype=np.float64)
    return vocab, EmbeddingTable(matrix)


def write_embeddings(path, vocab: Vocabulary, table: EmbeddingTable) -> None:
    """Write word2vec text format (without the reserved unknown row)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        n = len(vocab) - 1
        fh.write(f"{n} {table.d_model}\n")
        for i in range(n):
            fh.write(vocab.words[i] + " " + " ".join(repr(float(v)) for v in table.matrix[i]) + "\n")


def encode_tokens(tokens: Sequence[int], table: EmbeddingTable) -> np.ndarray:
    """Stack the embedding rows of ``tokens`` into a ``len x d_model`` matrix."""
    if len(tokens) == 0:
        raise ShapeError("cannot encode an empty token sequence")
    idx = np.asarray(tokens, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= len(table):
        raise IndexError(f"token id out of range for table of {len(table)} rows")
    return table.matrix[idx]
