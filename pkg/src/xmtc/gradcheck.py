"""Finite-difference verification of the full model's analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import EmbeddingTable
from .model import ModelConfig, init_params
from .teacher import TeacherKnowledge
from .tensor import finite_difference_grad, relative_error
from .train import example_loss, example_loss_and_grads


@dataclass
class GradcheckReport:
    tol: float
    trials: list[int]
    block_errors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def failing(self) -> list[str]:
        return [b for b, e in self.block_errors.items() if not e < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failing

    def lines(self) -> list[str]:
        out = [f"{'block':<20} {'max rel err':>12}  status"]
        for b, e in self.block_errors.items():
            out.append(f"{b:<20} {e:12.3e}  {'ok' if e < self.tol else 'FAIL'}")
        out.append(f"seeds: {self.trials}  tolerance: {self.tol:g}  time: {self.seconds:.1f}s")
        return out


def tiny_problem(seed: int, d_model=8, h=2, text_len=5, teacher_rows=3, num_labels=7, ablation=6, vocab=12):
    """Random embeddings, tokens, teacher rows and labels for one check."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(d_model=d_model, h=h, num_labels=num_labels, ablation=ablation,
                         max_text_len=text_len, max_teacher_rows=teacher_rows, seed=seed)
    table = EmbeddingTable(rng.normal(size=(vocab, d_model)))
    tokens = [int(t) for t in rng.integers(0, vocab, size=text_len)]
    n_pos = int(rng.integers(1, min(3, num_labels) + 1))
    labels = tuple(sorted(int(x) for x in rng.choice(num_labels, size=n_pos, replace=False)))
    teacher = TeacherKnowledge(0, tuple(range(teacher_rows)), rng.normal(size=(teacher_rows, d_model)))
    return config, table, tokens, labels, teacher


def check_model_gradients(trials: int = 10, tol: float = 1e-4, eps: float = 1e-5, **problem) -> GradcheckReport:
    """Max relative error per parameter block over ``trials`` random seeds."""
    t0 = time.perf_counter()
    report = GradcheckReport(tol, list(range(trials)))
    for seed in range(trials):
        config, table, tokens, labels, teacher = tiny_problem(seed, **problem)
        params = init_params(config, seed)
        _, grads = example_loss_and_grads(tokens, labels, teacher, params, config, table)
        for name in params:
            def f(x, name=name):
                trial = dict(params)
                trial[name] = x
                return example_loss(tokens, labels, teacher, trial, config, table)

            numeric = finite_difference_grad(f, params[name], eps)
            err = relative_error(grads[name], numeric)
            report.block_errors[name] = max(report.block_errors.get(name, 0.0), err)
    report.seconds = time.perf_counter() - t0
    return report
