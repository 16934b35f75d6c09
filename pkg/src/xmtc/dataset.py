"""Ingested dataset directories.

``ingest`` parses raw inputs once and writes a normalized directory::

    dataset.json        settings and statistics
    vocab.txt           one word per line, id = line number (last is <unk>)
    embeddings.bin      V x d matrix dump
    <split>.ids         labels<TAB>token ids, one example per line
    hierarchy.tsv       parent<TAB>child
    descriptions.ids    label<TAB>token ids

``load_dataset`` reads it back without re-tokenizing anything.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import (SPLITS, Corpus, EmbeddingTable, LabelTree, Vocabulary, load_embeddings, load_id_corpus,
                     load_label_tree, load_text_corpus, write_id_corpus)
from .errors import ParseError, ValidationError
from .tensor import dump_matrix, load_matrix

# input truncation limits per benchmark: (text tokens, description tokens)
PRESETS = {
    "amazoncat13k": (300, 4),
    "eurlex": (500, 4),
    "rcv1": (250, 16),
}


@dataclass
class Dataset:
    name: str
    vocab: Vocabulary
    table: EmbeddingTable
    tree: LabelTree
    splits: dict[str, Corpus] = field(default_factory=dict)
    max_tokens: int = 500
    desc_tokens: int = 4

    @property
    def num_labels(self) -> int:
        return self.tree.num_labels

    def stats(self) -> dict:
        train = self.splits.get("train")
        return {
            "dataset": self.name,
            "train_points": len(train) if train else 0,
            "test_points": len(self.splits["test"]) if "test" in self.splits else 0,
            "validation_points": len(self.splits["validation"]) if "validation" in self.splits else 0,
            "label_dimensionality": self.num_labels,
            "avg_labels_per_point": round(train.mean_labels(), 6) if train else 0.0,
            "vocabulary": len(self.vocab),
            "d_model": self.table.d_model,
        }


def stats_table(stats: dict) -> str:
    header = ["Dataset", "Number of Train Points", "Number of Test Points", "Label Dimensionality",
              "Avg. Labels per Point"]
    row = [stats["dataset"], str(stats["train_points"]), str(stats["test_points"]),
           str(stats["label_dimensionality"]), f"{stats['avg_labels_per_point']:.2f}"]
    widths = [max(len(h), len(r)) for h, r in zip(header, row)]
    fmt = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    return "\n".join([fmt(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|", fmt(row)])


def ingest(paths: dict, embeddings, hierarchy, descriptions, num_labels: int, max_tokens: int = 500,
           desc_tokens: int = 4, name: str = "dataset") -> Dataset:
    """Parse raw inputs; ``paths`` maps split name to a corpus file."""
    vocab, table = load_embeddings(embeddings)
    tree = load_label_tree(hierarchy, descriptions, vocab, desc_tokens, num_labels)
    splits = {}
    for split, p in paths.items():
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        splits[split] = load_text_corpus(p, vocab, max_tokens, num_labels, split)
    return Dataset(name, vocab, table, tree, splits, max_tokens, desc_tokens)


def save_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.txt").write_text("".join(w + "\n" for w in ds.vocab.words), encoding="utf-8")
    (out / "embeddings.bin").write_bytes(dump_matrix(ds.table.matrix))
    for split, corpus in ds.splits.items():
        write_id_corpus(corpus, out / f"{split}.ids")
    with open(out / "hierarchy.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for child in sorted(ds.tree.parent):
            fh.write(f"{ds.tree.parent[child]}\t{child}\n")
    with open(out / "descriptions.ids", "w", encoding="utf-8", newline="\n") as fh:
        for label in sorted(ds.tree.descriptions):
            fh.write(f"{label}\t{' '.join(map(str, ds.tree.descriptions[label]))}\n")
    meta = {
        "name": ds.name,
        "num_labels": ds.num_labels,
        "max_tokens": ds.max_tokens,
        "desc_tokens": ds.desc_tokens,
        "splits": sorted(ds.splits),
        "stats": ds.stats(),
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{root} is not an ingested dataset (no dataset.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    words = (root / "vocab.txt").read_text(encoding="utf-8").splitlines()
    if not words or words[-1] != "<unk>":
        raise ValidationError("vocab.txt must end with the reserved <unk> token", root / "vocab.txt")
    vocab = Vocabulary.from_words(words[:-1])
    try:
        matrix, _ = load_matrix((root / "embeddings.bin").read_bytes())
    except ValueError as exc:
        raise ParseError(str(exc), root / "embeddings.bin") from None
    table = EmbeddingTable(matrix)
    if len(table) != len(vocab):
        raise ValidationError(f"embedding rows {len(table)} != vocabulary size {len(vocab)}", root)
    num_labels = int(meta["num_labels"])
    parent = {}
    for line in (root / "hierarchy.tsv").read_text(encoding="utf-8").splitlines():
        p, c = line.split("\t")
        parent[int(c)] = int(p)
    descriptions = {}
    for line in (root / "descriptions.ids").read_text(encoding="utf-8").splitlines():
        lab, ids = line.split("\t")
        descriptions[int(lab)] = tuple(int(t) for t in ids.split())
    tree = LabelTree(num_labels, parent, descriptions)
    splits = {s: load_id_corpus(root / f"{s}.ids", len(vocab), num_labels, s) for s in meta["splits"]}
    return Dataset(meta["name"], vocab, table, tree, splits, meta["max_tokens"], meta["desc_tokens"])
