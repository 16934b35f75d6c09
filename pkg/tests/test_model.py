import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmtc.corpus import EmbeddingTable
from xmtc.errors import ConfigError, ShapeError
from xmtc.metrics import rank_labels
from xmtc.model import (MHSA, MMHSA, PRESETS, RESIDUAL, ModelConfig, attention_block, init_params,
                        interaction_forward, model_forward, param_shapes, predict_logits, predict_scores,
                        reading_forward, softmax_view, stack_label)
from xmtc.teacher import TeacherKnowledge
from xmtc.tensor import GradTape
from xmtc.train import example_loss_and_grads

# Reading layers per Config ID, written out independently of the module table
EXPECTED_LAYERS = {
    0: (None, "-"),
    1: ("teacher", "-"),
    2: ("teacher", "MMHSA+R"),
    3: ("teacher", "MHSA+R"),
    4: ("teacher", "MHSA+R+MMHSA"),
    5: ("teacher", "MMHSA+MHSA"),
    6: ("teacher", "MMHSA+R+MHSA"),
}


def np_attention(x, wq, wk, wv, wmh, h, masked):
    """Direct numpy evaluation of one attention block."""
    n, d = x.shape
    dk = d // h
    heads = []
    for i in range(h):
        sl = slice(i * dk, (i + 1) * dk)
        q, k, v = (x @ wq)[:, sl], (x @ wk)[:, sl], (x @ wv)[:, sl]
        s = q @ k.T / math.sqrt(dk)
        if masked:
            s = np.where(np.triu(np.ones((n, n)), 1) > 0, -np.inf, s)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((e / e.sum(axis=1, keepdims=True)) @ v)
    return np.tanh(np.hstack(heads) @ wmh)


def run_block(x, weights, h, masked):
    tape = GradTape()
    block = {k: tape.param(k, v) for k, v in weights.items()}
    return attention_block(tape, tape.constant(x), block, h, masked).value


def rand_weights(rng, d):
    return {k: rng.normal(size=(d, d)) / math.sqrt(d) for k in ("wq", "wk", "wv", "wmh")}


def test_config_guards():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=8, num_labels=3, h=3)
    assert ModelConfig(d_model=400, num_labels=3, h=4).d_k == 100
    with pytest.raises(ConfigError):
        ModelConfig(d_model=8, num_labels=3, ablation=7)


def test_init_is_deterministic_and_bounded():
    cfg = ModelConfig(d_model=8, num_labels=5, h=2)
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    bound = 1 / math.sqrt(8)
    assert all(np.abs(v).max() <= bound for v in a.values())
    assert list(a) == list(param_shapes(cfg))
    assert init_params(cfg, 4)["w_out"].tobytes() != a["w_out"].tobytes()


def test_single_position_mask_is_noop(rng):
    x, w = rng.normal(size=(1, 4)), rand_weights(rng, 4)
    assert np.array_equal(run_block(x, w, 2, True), run_block(x, w, 2, False))


def test_attention_hand_case():
    # 2x4 input, one head, weights chosen so each step is easy to follow
    x = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    eye = np.eye(4)
    w = {"wq": eye, "wk": eye, "wv": eye, "wmh": 2 * eye}
    # scores = x x^T / 2 = [[.5, 0], [0, .5]]; unmasked row weights are softmax([.5, 0])
    a = 1 / (1 + math.exp(-0.5))
    expected = np.tanh(2 * np.array([[a, 1 - a, 0, 0], [1 - a, a, 0, 0]]))
    assert np.allclose(run_block(x, w, 1, False), expected, atol=1e-15)
    # masked: first row sees only itself
    expected_m = np.tanh(2 * np.array([[1.0, 0, 0, 0], [1 - a, a, 0, 0]]))
    assert np.allclose(run_block(x, w, 1, True), expected_m, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 2, 4]), st.booleans())
def test_block_matches_numpy(seed, h, masked):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(int(rng.integers(1, 6)), 8)), rand_weights(rng, 8)
    assert np.allclose(run_block(x, w, h, masked), np_attention(x, *w.values(), h, masked), atol=1e-12)


def test_causality(rng):
    for _ in range(20):
        n = int(rng.integers(2, 7))
        x, w = rng.normal(size=(n, 8)), rand_weights(rng, 8)
        t = int(rng.integers(0, n - 1))
        y = x.copy()
        y[t + 1:] += rng.normal(size=(n - t - 1, 8))
        a, b = run_block(x, w, 2, True), run_block(y, w, 2, True)
        assert np.abs(a[: t + 1] - b[: t + 1]).max() < 1e-12


def test_residual_with_zero_output_weights_is_identity(rng):
    x = rng.normal(size=(3, 4))
    w = rand_weights(rng, 4)
    w["wmh"] = np.zeros((4, 4))
    tape = GradTape()
    branch = {"mmhsa": {k: tape.param(k, v) for k, v in w.items()}}
    out = reading_forward(tape, tape.constant(x), branch, (MMHSA, RESIDUAL), 2)
    assert np.array_equal(out.value, x)
    tape = GradTape()
    assert np.array_equal(reading_forward(tape, tape.constant(x), {}, (), 2).value, x)


def test_stack_order_matters(rng):
    x = rng.normal(size=(3, 4))
    blocks = {"mmhsa": rand_weights(rng, 4), "mhsa": rand_weights(rng, 4)}

    def run(stack):
        tape = GradTape()
        branch = {n: {k: tape.param(f"{n}.{k}", v) for k, v in b.items()} for n, b in blocks.items()}
        return reading_forward(tape, tape.constant(x), branch, stack, 2).value

    assert not np.allclose(run(PRESETS[4][1]), run(PRESETS[6][1]))


def test_residual_without_block_is_rejected():
    with pytest.raises(ConfigError):
        from xmtc.model import AblationConfig
        AblationConfig(True, (RESIDUAL, MHSA))


def test_interaction_hand_case():
    # one teacher row, one text row, identity weights, one head
    t, x = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    eye = np.eye(2)
    tape = GradTape()
    fusion = {k: tape.param(k, eye) for k in ("wq", "wk", "wv", "wmh")}
    w_hb = tape.param("w_hb", np.array([[1.0], [1.0]]))
    out = interaction_forward(tape, tape.constant(t), tape.constant(x), fusion, w_hb, 1).value
    # row 0 attends only to itself; row 1 weights (1, e^{1/sqrt2}) / sum over (teacher, text)
    a = 1 / (1 + math.exp(1 / math.sqrt(2)))
    rows = np.tanh(np.array([[1.0, 0.0], [a, 1 - a]]))
    assert np.allclose(out, [[rows.mean(axis=0).sum()]], atol=1e-15)


def test_interaction_without_teacher_is_text_attention(rng):
    x = rng.normal(size=(3, 4))
    w = rand_weights(rng, 4)
    w_hb = rng.normal(size=(4, 2))
    tape = GradTape()
    fusion = {k: tape.param(k, v) for k, v in w.items()}
    out = interaction_forward(tape, None, tape.constant(x), fusion, tape.param("w_hb", w_hb), 2).value
    expected = np_attention(x, *w.values(), 2, True).mean(axis=0, keepdims=True) @ w_hb
    assert np.allclose(out, expected, atol=1e-12)


def test_interaction_width_mismatch():
    tape = GradTape()
    with pytest.raises(ShapeError):
        interaction_forward(tape, tape.constant(np.zeros((1, 3))), tape.constant(np.zeros((1, 4))), None,
                            tape.param("w_hb", np.zeros((4, 2))), 1)


def test_predict_scores():
    tape = GradTape()
    fused = tape.constant(np.array([[1.0, 2.0]]))
    w = tape.param("w_out", np.array([[1.0, 0.0, -1.0], [2.0, 1.0, 3.0]]))
    assert predict_scores(tape, fused, w).value.tolist() == [[5.0, 2.0, 5.0]]
    zero = predict_scores(tape, tape.constant(np.zeros((1, 2))), w).value
    assert rank_labels(zero) == (0, 1, 2)


@given(st.integers(0, 2**31), st.floats(1.01, 10.0))
def test_scaling_own_column_never_lowers_rank(seed, alpha):
    rng = np.random.default_rng(seed)
    fused = np.abs(rng.normal(size=(1, 3))) + 0.1
    w = rng.normal(size=(3, 6))
    j = int(rng.integers(6))
    w[:, j] = np.abs(w[:, j])
    w2 = w.copy()
    w2[:, j] *= alpha
    assert rank_labels((fused @ w2).ravel()).index(j) <= rank_labels((fused @ w).ravel()).index(j)


def test_softmax_view_sums_to_one(rng):
    p = softmax_view(rng.normal(size=7))
    assert abs(p.sum() - 1.0) < 1e-12


def tiny(ablation, seed=0):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d_model=8, num_labels=7, h=2, ablation=ablation, seed=seed)
    table = EmbeddingTable(rng.normal(size=(12, 8)))
    teacher = TeacherKnowledge(0, (0, 1, 2), rng.normal(size=(3, 8)))
    return cfg, table, [1, 5, 3, 7, 2], teacher


def test_forward_is_deterministic():
    cfg, table, tokens, teacher = tiny(6)
    p = init_params(cfg)
    a = predict_logits(tokens, teacher, p, cfg, table)
    b = predict_logits(tokens, teacher, init_params(cfg), cfg, table)
    assert a.tobytes() == b.tobytes() and a.shape == (7,)


@pytest.mark.parametrize("config_id", sorted(PRESETS))
def test_gradient_receiving_blocks_match_layer_list(config_id):
    branch, layers = EXPECTED_LAYERS[config_id]
    assert stack_label(PRESETS[config_id][1]) == layers
    expected = {"fusion", "w_hb", "w_out"}
    kinds = [] if layers == "-" else [x.lower() for x in layers.split("+") if x != "R"]
    for b in ["text"] + ([branch] if branch else []):
        expected |= {f"{b}.{k}" for k in kinds}
    cfg, table, tokens, teacher = tiny(config_id)
    _, grads = example_loss_and_grads(tokens, (1, 4), teacher, init_params(cfg), cfg, table)
    got = {name.rsplit(".", 1)[0] if name.count(".") else name for name, g in grads.items() if np.any(g != 0)}
    assert got == expected


def test_fusion_off_drops_fusion_block():
    cfg, table, tokens, teacher = tiny(6)
    cfg = ModelConfig(**{**cfg.to_dict(), "fusion_attention": False})
    _, grads = example_loss_and_grads(tokens, (0,), teacher, init_params(cfg), cfg, table)
    assert not any(np.any(grads[f"fusion.{w}"]) for w in ("wq", "wk", "wv", "wmh"))


def test_teacher_truncated_to_max_rows():
    cfg, table, tokens, _ = tiny(6)
    cfg = ModelConfig(**{**cfg.to_dict(), "max_teacher_rows": 2})
    rng = np.random.default_rng(5)
    long = TeacherKnowledge(0, tuple(range(4)), rng.normal(size=(4, 8)))
    short = TeacherKnowledge(0, (0, 1), long.encoding[:2])
    p = init_params(cfg)
    assert np.array_equal(predict_logits(tokens, long, p, cfg, table), predict_logits(tokens, short, p, cfg, table))


def test_embedding_width_must_match():
    cfg, _, tokens, teacher = tiny(6)
    with pytest.raises(ConfigError):
        model_forward(tokens, teacher, init_params(cfg), cfg, EmbeddingTable(np.zeros((12, 4))))
