"""Small synthetic XMTC dataset written in the on-disk input formats.

Labels ``0..P-1`` are parents; every other label is a child of one parent.
Each child owns a few signature words whose embeddings point along an axis
reserved for that child; documents mix the signature words of their labels
with background noise, and descriptions are drawn from the same words.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 100
    n_test: int = 30
    vocab_size: int = 50
    d_model: int = 16
    num_labels: int = 20
    num_parents: int = 5
    min_labels: int = 1
    max_labels: int = 3
    desc_tokens: int = 4
    doc_len: tuple[int, int] = (8, 16)
    noise: float = 0.25
    signal: float = 3.0
    jitter: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class SyntheticPaths:
    root: Path
    train: Path
    test: Path
    hierarchy: Path
    descriptions: Path
    embeddings: Path


def _words(n):
    return [f"w{i:03d}" for i in range(n)]


def write_synthetic(root, spec: SyntheticSpec = SyntheticSpec()) -> SyntheticPaths:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    words = _words(spec.vocab_size)
    children = list(range(spec.num_parents, spec.num_labels))
    parent_of = {c: i % spec.num_parents for i, c in enumerate(children)}

    # signature words: split the first part of the vocabulary among children
    per_child = max(1, (spec.vocab_size - 5) // len(children))
    signature = {c: words[i * per_child:(i + 1) * per_child] for i, c in enumerate(children)}
    background = words[per_child * len(children):] or words

    def document(labels):
        n = int(rng.integers(spec.doc_len[0], spec.doc_len[1] + 1))
        toks = []
        for _ in range(n):
            if rng.random() < spec.noise:
                toks.append(background[int(rng.integers(len(background)))])
            else:
                lab = labels[int(rng.integers(len(labels)))]
                sig = signature[lab]
                toks.append(sig[int(rng.integers(len(sig)))])
        return " ".join(toks)

    def corpus(n):
        lines = []
        for _ in range(n):
            m = int(rng.integers(spec.min_labels, spec.max_labels + 1))
            labels = sorted(int(x) for x in rng.choice(children, size=m, replace=False))
            lines.append(",".join(map(str, labels)) + "\t" + document(labels))
        return "\n".join(lines) + "\n"

    paths = SyntheticPaths(root, root / "train.txt", root / "test.txt", root / "hierarchy.tsv",
                           root / "descriptions.tsv", root / "embeddings.txt")
    paths.train.write_text(corpus(spec.n_train), encoding="utf-8")
    paths.test.write_text(corpus(spec.n_test), encoding="utf-8")

    with open(paths.hierarchy, "w", encoding="utf-8") as fh:
        fh.write("# parent\tchild\n")
        for c in children:
            fh.write(f"{parent_of[c]}\t{c}\n")

    with open(paths.descriptions, "w", encoding="utf-8") as fh:
        for p in range(spec.num_parents):
            kids = [c for c in children if parent_of[c] == p]
            desc = [signature[c][0] for c in kids][: spec.desc_tokens]
            fh.write(f"{p}\t{' '.join(desc)}\n")
        for c in children:
            sig = signature[c]
            desc = [sig[i % len(sig)] for i in range(spec.desc_tokens)]
            fh.write(f"{c}\t{' '.join(desc)}\n")

    # signature words of a child point along that child's own axis
    emb = rng.normal(scale=spec.jitter, size=(spec.vocab_size, spec.d_model))
    for i, c in enumerate(children):
        for w in signature[c]:
            emb[words.index(w), i % spec.d_model] += spec.signal
    with open(paths.embeddings, "w", encoding="utf-8") as fh:
        fh.write(f"{spec.vocab_size} {spec.d_model}\n")
        for w, row in zip(words, emb):
            fh.write(w + " " + " ".join(repr(float(x)) for x in row) + "\n")
    return paths
