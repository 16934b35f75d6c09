"""Teacher knowledge: neighbour retrieval and hierarchy-augmented label sets.

For each text, the labels of its ``k`` most similar texts (cosine over mean
token embeddings) are collected; every such label that has a parent is
added together with its parent. The resulting label set is encoded as one
row per label description (mean of the description's token embeddings).
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, EmbeddingTable, Example, LabelTree, encode_tokens
from .errors import DegenerateInputError, EmptyTeacher, ParseError
from .tensor import dump_matrix, load_matrix

log = logging.getLogger(__name__)


class ZeroVectorWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class NeighborResult:
    query_id: int
    ids: tuple[int, ...]
    scores: tuple[float, ...]


@dataclass(frozen=True)
class TeacherKnowledge:
    example_id: int
    label_set: tuple[int, ...]
    encoding: np.ndarray
    empty: bool = False

    def __eq__(self, other):
        if not isinstance(other, TeacherKnowledge):
            return NotImplemented
        return (
            self.example_id == other.example_id
            and self.label_set == other.label_set
            and self.empty == other.empty
            and self.encoding.shape == other.encoding.shape
            and self.encoding.tobytes() == other.encoding.tobytes()
        )

    __hash__ = None


def vectorize_text(example: Example, table: EmbeddingTable) -> np.ndarray:
    """Mean token embedding of ``example``."""
    if not example.tokens:
        raise DegenerateInputError(f"example {example.id} has no tokens")
    return encode_tokens(example.tokens, table).mean(axis=0)


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine score of a zero vector defined as 0", ZeroVectorWarning, stacklevel=2)
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def _top_k(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    # descending score, ascending id on ties
    order = np.lexsort((ids, -scores))
    return order[:k]


def nearest_neighbors(query: np.ndarray, query_id: int, pool: Sequence[tuple[int, np.ndarray]], k: int,
                      exclude_self: bool = True) -> NeighborResult:
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    entries = [(i, v) for i, v in pool if not (exclude_self and i == query_id)]
    if k > len(entries):
        raise ValueError(f"k={k} exceeds effective pool size {len(entries)}")
    ids = np.array([i for i, _ in entries], dtype=np.int64)
    scores = np.array([cosine_score(query, v) for _, v in entries], dtype=np.float64)
    top = _top_k(scores, ids, k)
    return NeighborResult(query_id, tuple(int(i) for i in ids[top]), tuple(float(s) for s in scores[top]))


def build_teacher_label_set(neighbor_labels: np.ndarray, tree: LabelTree, include_roots: bool = False) -> tuple[int, ...]:
    """Labels present in ``neighbor_labels`` (multi-hot, length L) plus their parents.

    Labels without a parent are skipped unless ``include_roots`` is set.
    """
    neighbor_labels = np.asarray(neighbor_labels)
    if neighbor_labels.shape != (tree.num_labels,):
        raise ValueError(f"expected a multi-hot vector of length {tree.num_labels}")
    chosen: set[int] = set()
    for j in np.flatnonzero(neighbor_labels):
        j = int(j)
        p = tree.par(j)
        if p is not None:
            chosen.add(j)
            chosen.add(p)
        elif include_roots:
            chosen.add(j)
    return tuple(sorted(chosen))


def description_vector(label: int, tree: LabelTree, table: EmbeddingTable) -> np.ndarray | None:
    desc = tree.description(label)
    if not desc:
        return None
    return encode_tokens(desc, table).mean(axis=0)


def encode_teacher_knowledge(label_set: Sequence[int], tree: LabelTree, table: EmbeddingTable,
                             pool: str = "rows") -> np.ndarray:
    """Encode a label set as a ``K x d_model`` matrix, one row per described label.

    ``pool="global"`` averages those rows into a single ``1 x d_model`` row.
    Raises :class:`EmptyTeacher` when no label has a description.
    """
    if pool not in ("rows", "global"):
        raise ValueError(f"unknown teacher pooling {pool!r}")
    rows = [v for v in (description_vector(lab, tree, table) for lab in label_set) if v is not None]
    if not rows:
        raise EmptyTeacher(f"none of {len(label_set)} teacher labels has a description")
    enc = np.vstack(rows)
    if pool == "global":
        enc = enc.mean(axis=0, keepdims=True)
    return enc


def text_vectors(corpus: Corpus, table: EmbeddingTable) -> np.ndarray:
    if len(corpus) == 0:
        return np.zeros((0, table.d_model))
    return np.vstack([vectorize_text(ex, table) for ex in corpus])


class NeighborIndex:
    """Exhaustive cosine search over the concatenation of several corpora.

    Pool entries are addressed by their position in the concatenation.
    """

    def __init__(self, pool: Sequence[Corpus], table: EmbeddingTable):
        self.corpora = list(pool)
        self.offsets = np.cumsum([0] + [len(c) for c in self.corpora])
        vecs = [text_vectors(c, table) for c in self.corpora]
        self.vectors = np.vstack(vecs) if vecs else np.zeros((0, table.d_model))
        self.norms = np.linalg.norm(self.vectors, axis=1)
        self.labels = [ex.labels for c in self.corpora for ex in c]
        if np.any(self.norms == 0.0):
            warnings.warn(f"{int(np.sum(self.norms == 0.0))} pool texts have a zero mean vector",
                          ZeroVectorWarning, stacklevel=2)

    def __len__(self):
        return self.vectors.shape[0]

    def self_index(self, corpus: Corpus, example_id: int) -> int | None:
        for c, off in zip(self.corpora, self.offsets):
            if c is corpus or (c.split == corpus.split and len(c) == len(corpus)):
                return int(off) + example_id
        return None

    def query(self, vector: np.ndarray, k: int, exclude: int | None = None) -> NeighborResult:
        n = len(self)
        effective = n - (1 if exclude is not None and 0 <= exclude < n else 0)
        if k <= 0:
            raise ValueError(f"k must be positive, got {k}")
        if k > effective:
            raise ValueError(f"k={k} exceeds effective pool size {effective}")
        qn = float(np.linalg.norm(vector))
        denom = self.norms * qn
        dots = self.vectors @ vector
        scores = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
        ids = np.arange(n)
        if exclude is not None and 0 <= exclude < n:
            keep = ids != exclude
            ids, scores = ids[keep], scores[keep]
        top = _top_k(scores, ids, k)
        return NeighborResult(-1 if exclude is None else exclude, tuple(int(i) for i in ids[top]),
                              tuple(float(s) for s in scores[top]))


def teacher_for_example(example: Example, vector: np.ndarray, index: NeighborIndex, tree: LabelTree,
                        table: EmbeddingTable, k: int, exclude: int | None, include_roots: bool = False,
                        pool: str = "rows") -> TeacherKnowledge:
    nn = index.query(vector, k, exclude)
    multi_hot = np.zeros(tree.num_labels, dtype=np.int8)
    for i in nn.ids:
        multi_hot[list(index.labels[i])] = 1
    label_set = build_teacher_label_set(multi_hot, tree, include_roots)
    try:
        enc = encode_teacher_knowledge(label_set, tree, table, pool)
        empty = False
    except EmptyTeacher:
        enc = np.zeros((1, table.d_model))
        empty = True
    return TeacherKnowledge(example.id, label_set, enc, empty)


def build_all_teacher_knowledge(corpus: Corpus, pool: Sequence[Corpus], tree: LabelTree, table: EmbeddingTable,
                                k: int = 5, exclude_self: bool = True, include_roots: bool = False,
                                teacher_pool: str = "rows", threads: int = 1) -> list[TeacherKnowledge]:
    """Teacher knowledge for every example of ``corpus``.

    With ``exclude_self``, an example never retrieves itself when its own
    corpus is part of ``pool`` (matched by identity, or by split tag and size).
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    index = NeighborIndex(pool, table)
    vectors = text_vectors(corpus, table)

    def one(i):
        ex = corpus[i]
        exclude = index.self_index(corpus, ex.id) if exclude_self else None
        return teacher_for_example(ex, vectors[i], index, tree, table, k, exclude, include_roots, teacher_pool)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(one, range(len(corpus))))
    return [one(i) for i in range(len(corpus))]


# --------------------------------------------------------------------------
# Cache files
# --------------------------------------------------------------------------


def save_teacher_cache(teachers: Sequence[TeacherKnowledge], stem) -> tuple[Path, Path]:
    """Write ``<stem>.tsv`` (``id<TAB>labels<TAB>empty flag``) and ``<stem>.bin``.

    The binary file is the concatenation of one matrix dump per record, in
    the same order as the TSV lines.
    """
    stem = Path(stem)
    tsv, binf = stem.with_suffix(".tsv"), stem.with_suffix(".bin")
    with open(tsv, "w", encoding="utf-8", newline="\n") as fh:
        for t in teachers:
            fh.write(f"{t.example_id}\t{','.join(map(str, t.label_set))}\t{int(t.empty)}\n")
    with open(binf, "wb") as fh:
        for t in teachers:
            fh.write(dump_matrix(t.encoding))
    return tsv, binf


def load_teacher_cache(stem) -> list[TeacherKnowledge]:
    stem = Path(stem)
    tsv, binf = stem.with_suffix(".tsv"), stem.with_suffix(".bin")
    blob = binf.read_bytes()
    offset = 0
    out = []
    with open(tsv, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 3:
                raise ParseError("expected 'id<TAB>labels<TAB>empty'", tsv, lineno)
            try:
                ex_id = int(fields[0])
                labels = tuple(int(x) for x in fields[1].split(",")) if fields[1] else ()
                empty = bool(int(fields[2]))
            except ValueError:
                raise ParseError("malformed teacher record", tsv, lineno) from None
            try:
                enc, offset = load_matrix(blob, offset)
            except ValueError as exc:
                raise ParseError(str(exc), binf) from None
            out.append(TeacherKnowledge(ex_id, labels, enc, empty))
    if offset != len(blob):
        raise ParseError("trailing bytes after last teacher matrix", binf)
    return out


def summarize(teachers: Sequence[TeacherKnowledge]) -> dict:
    n = len(teachers)
    return {
        "examples": n,
        "mean_label_set_size": (sum(len(t.label_set) for t in teachers) / n) if n else 0.0,
        "mean_rows": (sum(t.encoding.shape[0] for t in teachers) / n) if n else 0.0,
        "empty_teachers": sum(t.empty for t in teachers),
    }
