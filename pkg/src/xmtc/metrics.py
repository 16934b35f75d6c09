"""Ranking metrics for extreme multi-label classification.

P@k, nDCG@k and propensity-scored precision PSP@k, plus helpers for
ranking score vectors and scoring whole prediction sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus
from .errors import EmptyTruth, ParseError

DEFAULT_KS = (1, 3, 5)
DEFAULT_A = 0.55
DEFAULT_B = 1.5


def rank_labels(scores, m: int | None = None) -> tuple[int, ...]:
    """Label ids by descending score, ascending id on ties."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-s, kind="stable")
    if m is not None:
        order = order[:m]
    return tuple(int(i) for i in order)


def _check_k(k: int, pred: Sequence[int]):
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(pred):
        raise ValueError(f"k={k} exceeds prediction length {len(pred)}")


def hits_at_k(pred: Sequence[int], truth, k: int) -> int:
    truth = set(truth)
    return sum(1 for lab in pred[:k] if lab in truth)


def precision_at_k(pred: Sequence[int], truth, k: int) -> float:
    _check_k(k, pred)
    return hits_at_k(pred, truth, k) / k


def dcg_at_k(pred: Sequence[int], truth, k: int) -> float:
    truth = set(truth)
    return sum(1.0 / math.log2(r + 2) for r, lab in enumerate(pred[:k]) if lab in truth)


def ndcg_at_k(pred: Sequence[int], truth, k: int) -> float:
    _check_k(k, pred)
    truth = set(truth)
    if not truth:
        raise EmptyTruth("nDCG is undefined for an empty truth set")
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(truth))))
    return dcg_at_k(pred, truth, k) / ideal


@dataclass(frozen=True)
class PropensityModel:
    propensities: np.ndarray
    a: float
    b: float
    n: int

    def __getitem__(self, label: int) -> float:
        return float(self.propensities[label])

    def inverse(self) -> np.ndarray:
        return 1.0 / self.propensities


def propensity_from_counts(counts, n: int, a: float = DEFAULT_A, b: float = DEFAULT_B) -> np.ndarray:
    """``1 / (1 + C * (N_l + B)^-A)`` with ``C = (ln N - 1)(B + 1)^A``, capped at 1."""
    counts = np.asarray(counts, dtype=np.float64)
    c = (math.log(n) - 1.0) * (b + 1.0) ** a
    denom = 1.0 + c * np.exp(-a * np.log(counts + b))
    with np.errstate(divide="ignore"):
        p = np.where(denom > 1.0, 1.0 / denom, 1.0)
    return p


def fit_propensities(train: Corpus, a: float = DEFAULT_A, b: float = DEFAULT_B) -> PropensityModel:
    if a <= 0 or b < 0:
        raise ValueError("propensity parameters need A > 0 and B >= 0")
    n = len(train)
    if n < 2:
        raise ValueError(f"need at least 2 training examples to fit propensities, got {n}")
    return PropensityModel(propensity_from_counts(train.label_counts(), n, a, b), a, b, n)


def psp_at_k(pred: Sequence[int], truth, model: PropensityModel, k: int, normalize: bool = True) -> float:
    """Propensity-scored precision; normalized by the best ranking of ``truth`` when asked."""
    _check_k(k, pred)
    truth = set(truth)
    inv = model.inverse()
    score = sum(inv[lab] for lab in pred[:k] if lab in truth) / k
    if not normalize:
        return score
    if not truth:
        raise EmptyTruth("normalized PSP is undefined for an empty truth set")
    best = sorted((inv[lab] for lab in truth), reverse=True)[:k]
    return score / (sum(best) / k)


def metric_columns(ks: Sequence[int] = DEFAULT_KS) -> list[str]:
    cols = [f"P@{k}" for k in ks]
    cols += [f"nDCG@{k}" for k in ks if k > 1]
    cols += [f"PSP@{k}" for k in ks]
    return cols


@dataclass
class Report:
    metrics: dict[str, float]
    n_examples: int
    n_empty_truth: int
    propensity: dict
    ks: tuple[int, ...]

    def as_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "examples": self.n_examples,
            "empty_truth_examples": self.n_empty_truth,
            "propensity": self.propensity,
            "ks": list(self.ks),
        }

    def to_table(self, title: str | None = None) -> str:
        cols = list(self.metrics)
        width = max(8, *(len(c) for c in cols))
        lines = []
        if title:
            lines.append(title)
        lines.append(
            f"# propensity A={self.propensity['A']} B={self.propensity['B']} "
            f"(library defaults, normalized={self.propensity['normalized']}); "
            f"examples={self.n_examples}, empty truth={self.n_empty_truth}"
        )
        lines.append(" ".join(c.rjust(width) for c in cols))
        lines.append(" ".join(f"{100 * self.metrics[c]:.2f}%".rjust(width) for c in cols))
        return "\n".join(lines)


def score_rankings(rankings: Sequence[Sequence[int]], truths: Sequence[Iterable[int]], model: PropensityModel,
                   ks: Sequence[int] = DEFAULT_KS, normalize_psp: bool = True) -> Report:
    """Macro-average every metric over examples.

    Examples with an empty truth set count towards P@k but are left out of
    the nDCG and PSP means.
    """
    ks = tuple(ks)
    cols = metric_columns(ks)
    sums = dict.fromkeys(cols, 0.0)
    n = len(rankings)
    empty = 0
    for pred, truth in zip(rankings, truths):
        truth = set(truth)
        for k in ks:
            sums[f"P@{k}"] += precision_at_k(pred, truth, k)
        if not truth:
            empty += 1
            continue
        for k in ks:
            if k > 1:
                sums[f"nDCG@{k}"] += ndcg_at_k(pred, truth, k)
            sums[f"PSP@{k}"] += psp_at_k(pred, truth, model, k, normalize_psp)
    scored = n - empty
    metrics = {}
    for c in cols:
        denom = n if c.startswith("P@") else scored
        metrics[c] = sums[c] / denom if denom else 0.0
    prop = {"A": model.a, "B": model.b, "N": model.n, "normalized": normalize_psp}
    return Report(metrics, n, empty, prop, ks)


def read_prediction_file(path, num_labels: int | None = None) -> dict[int, list[tuple[int, float]]]:
    """Parse ``example_id<TAB>label:score,label:score,...`` lines."""
    out: dict[int, list[tuple[int, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError("expected 'example_id<TAB>label:score,...'", path, lineno)
            id_field, body = line.split("\t", 1)
            try:
                ex_id = int(id_field)
                pairs = []
                for item in filter(None, body.split(",")):
                    lab, score = item.split(":")
                    pairs.append((int(lab), float(score)))
            except ValueError:
                raise ParseError("malformed prediction entry", path, lineno) from None
            if num_labels is not None and any(not 0 <= lab < num_labels for lab, _ in pairs):
                raise ParseError("label id outside label space", path, lineno)
            if ex_id in out:
                raise ParseError(f"duplicate example id {ex_id}", path, lineno)
            out[ex_id] = pairs
    return out


def write_prediction_file(path, predictions: Mapping[int, Sequence[tuple[int, float]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex_id in sorted(predictions):
            body = ",".join(f"{int(lab)}:{float(score)!r}" for lab, score in predictions[ex_id])
            fh.write(f"{ex_id}\t{body}\n")


def rank_prediction_pairs(pairs: Sequence[tuple[int, float]], num_labels: int, m: int) -> tuple[int, ...]:
    """Rank listed labels by score; unlisted labels follow in ascending id order."""
    listed = sorted(pairs, key=lambda p: (-p[1], p[0]))
    seen = {lab for lab, _ in listed}
    order = [lab for lab, _ in listed]
    order += [lab for lab in range(num_labels) if lab not in seen]
    return tuple(order[:m])
