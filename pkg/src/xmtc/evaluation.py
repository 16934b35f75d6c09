"""Score a trained model or an external prediction file."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import Corpus, EmbeddingTable
from .errors import ConfigError, ParseError
from .metrics import (DEFAULT_KS, PropensityModel, Report, rank_labels, rank_prediction_pairs,
                      read_prediction_file, score_rankings)
from .model import ModelConfig, predict_logits
from .teacher import TeacherKnowledge


def predict_rankings(corpus: Corpus, teachers: Sequence[TeacherKnowledge] | None, params, config: ModelConfig,
                     table: EmbeddingTable, m: int) -> list[tuple[int, ...]]:
    if corpus.num_labels != config.num_labels:
        raise ConfigError(f"corpus has L={corpus.num_labels}, checkpoint expects {config.num_labels}")
    use_teacher = config.ablation_config.use_teacher
    if use_teacher and (teachers is None or len(teachers) != len(corpus)):
        raise ConfigError("teacher knowledge must cover every evaluated example")
    out = []
    for i, ex in enumerate(corpus):
        teacher = teachers[i] if use_teacher else None
        out.append(rank_labels(predict_logits(ex.tokens, teacher, params, config, table), m))
    return out


def evaluate(params, config: ModelConfig, corpus: Corpus, teachers, table: EmbeddingTable,
             propensity: PropensityModel, ks: Sequence[int] = DEFAULT_KS, normalize_psp: bool = True) -> Report:
    rankings = predict_rankings(corpus, teachers, params, config, table, max(ks))
    return score_rankings(rankings, [ex.labels for ex in corpus], propensity, ks, normalize_psp)


def score_prediction_file(path, corpus: Corpus, propensity: PropensityModel, ks: Sequence[int] = DEFAULT_KS,
                          normalize_psp: bool = True) -> Report:
    """Score ``example_id<TAB>label:score,...`` predictions against ``corpus``.

    Every example of ``corpus`` must have a line; labels a line leaves out
    rank after the listed ones.
    """
    preds = read_prediction_file(path, corpus.num_labels)
    missing = [ex.id for ex in corpus if ex.id not in preds]
    if missing:
        raise ParseError(f"no predictions for {len(missing)} examples (first: {missing[0]})", path)
    m = max(ks)
    rankings = [rank_prediction_pairs(preds[ex.id], corpus.num_labels, m) for ex in corpus]
    return score_rankings(rankings, [ex.labels for ex in corpus], propensity, ks, normalize_psp)


def train_precision_at_1(params, config, corpus, teachers, table) -> float:
    rankings = predict_rankings(corpus, teachers, params, config, table, 1)
    return float(np.mean([r[0] in set(ex.labels) for r, ex in zip(rankings, corpus)]))
