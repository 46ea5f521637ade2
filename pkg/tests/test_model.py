import numpy as np
import pytest

from helpers import checkable_model, random_tokens, tiny_config
from longred.model import DecoderModel, PositionPlan, forward_trace, param_shapes


def reference_logits(model, tokens, positions):
    """Loop-per-head forward written directly in numpy, used as an oracle."""
    cfg, p = model.config, {k: v.data for k, v in model.params.items()}
    D, N = cfg.d_model, cfg.n_heads
    d = D // N
    T = len(tokens)

    def norm(x, g):
        return x / np.sqrt(np.mean(x * x, -1, keepdims=True) + cfg.norm_eps) * g

    def rot(x, pos):
        out = np.empty_like(x)
        for t in range(T):
            for i in range(d // 2):
                a = (pos[t] / cfg.pi_scale) * cfg.rope_base ** (-2.0 * i / d)
                c, s = np.cos(a), np.sin(a)
                x0, x1 = x[t, 2 * i], x[t, 2 * i + 1]
                out[t, 2 * i], out[t, 2 * i + 1] = x0 * c - x1 * s, x0 * s + x1 * c
        return out

    h = p["embed"][tokens]
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        x = norm(h, p[pre + "attn_norm"])
        q, k, v = x @ p[pre + "wq"], x @ p[pre + "wk"], x @ p[pre + "wv"]
        ctx = np.zeros((T, D))
        for n in range(N):
            sl = slice(n * d, (n + 1) * d)
            qn, kn = rot(q[:, sl], positions), rot(k[:, sl], positions)
            for t in range(T):
                s = qn[t] @ kn[: t + 1].T / np.sqrt(d)
                w = np.exp(s - s.max())
                w /= w.sum()
                ctx[t, sl] = w @ v[: t + 1, sl]
        h = h + ctx @ p[pre + "wo"]
        x = norm(h, p[pre + "ffn_norm"])
        g = x @ p[pre + "w_gate"]
        h = h + (g / (1 + np.exp(-g)) * (x @ p[pre + "w_up"])) @ p[pre + "w_down"]
    return norm(h, p["final_norm"]) @ p["head"]


@pytest.fixture
def model():
    return checkable_model(seed=3, L=2, N=2, d=8, V=16, T=12)


def test_forward_matches_reference(model):
    toks = random_tokens(np.random.default_rng(0), 1, 10, 16)[0]
    got, _ = forward_trace(model, toks)
    assert np.allclose(got.data, reference_logits(model, toks, np.arange(10)), atol=1e-10)


def test_forward_matches_reference_on_skipped_positions(model):
    toks = random_tokens(np.random.default_rng(1), 1, 6, 16)[0]
    pos = np.array([0, 1, 5, 6, 9, 11])
    got, _ = forward_trace(model, toks, PositionPlan(pos, 11))
    assert np.allclose(got.data, reference_logits(model, toks, pos), atol=1e-10)


def test_causality(model):
    rng = np.random.default_rng(2)
    a = random_tokens(rng, 1, 10, 16)
    b = a.copy()
    b[0, 7:] = (b[0, 7:] + 1) % 16
    la, _ = forward_trace(model, a)
    lb, _ = forward_trace(model, b)
    assert np.array_equal(la.data[0, :7], lb.data[0, :7])
    assert not np.allclose(la.data[0, 7:], lb.data[0, 7:])


def test_uniform_position_shift_leaves_logits_unchanged(model):
    toks = random_tokens(np.random.default_rng(3), 2, 8, 16)
    base, _ = forward_trace(model, toks, np.arange(8))
    shifted, _ = forward_trace(model, toks, np.arange(8) + 3)
    assert np.allclose(base.data, shifted.data, atol=1e-10)


def test_per_sequence_plans_match_individual_runs(model):
    rng = np.random.default_rng(4)
    toks = random_tokens(rng, 2, 5, 16)
    plans = [PositionPlan([0, 2, 3, 7, 8], 11), PositionPlan([0, 1, 4, 10, 11], 11)]
    both, _ = forward_trace(model, toks, plans)
    for i, p in enumerate(plans):
        one, _ = forward_trace(model, toks[i : i + 1], p)
        assert np.allclose(both.data[i], one.data[0], atol=1e-12)


def test_trace_shapes(model):
    toks = random_tokens(np.random.default_rng(5), 3, 7, 16)
    logits, tr = forward_trace(model, toks, capture_hidden=True, capture_attention=True)
    assert logits.shape == (3, 7, 16)
    assert len(tr.hidden) == 3 and tr.hidden[0].shape == (3, 7, 8)
    assert len(tr.attention) == 2 and tr.attention[0].shape == (3, 2, 7, 7)
    A = tr.attention_of(0, 1, 0)
    assert np.allclose(A.sum(-1), 1.0) and np.all(np.triu(A, 1) == 0)


def test_one_dimensional_input(model):
    toks = np.arange(5)
    logits, _ = forward_trace(model, toks)
    assert logits.shape == (5, 16)


def test_errors(model):
    with pytest.raises(ValueError):
        forward_trace(model, np.zeros((1, 13), dtype=int))
    with pytest.raises(IndexError):
        forward_trace(model, np.array([[0, 16]]))
    with pytest.raises(TypeError):
        forward_trace(model, np.array([[0.0, 1.0]]))
    with pytest.raises(ValueError):
        forward_trace(model, np.zeros((1, 4), dtype=int), PositionPlan([0, 1, 2], 5))


def test_position_plan_validation():
    with pytest.raises(ValueError):
        PositionPlan([0, 2, 2], 5)
    with pytest.raises(ValueError):
        PositionPlan([0, 6], 5)
    with pytest.raises(ValueError):
        PositionPlan([-1, 0], 5)
    with pytest.raises(ValueError):
        PositionPlan([0, 1, 2], 5, segments=(1, 1, 2))
    assert len(PositionPlan.contiguous(4)) == 4


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(d=9, N=2)
    with pytest.raises(ValueError):
        tiny_config(d=6, N=2)  # odd head dim
    with pytest.raises(ValueError):
        tiny_config(rope_base=1.0)
    with pytest.raises(ValueError):
        tiny_config(dtype="float16")


def test_copy_is_independent_and_with_config_shares(model):
    c = model.copy()
    c.params["head"].data[0, 0] += 1.0
    assert c.params["head"].data[0, 0] != model.params["head"].data[0, 0]
    w = model.with_config(model.config.replace(context_window=24))
    assert w.params["head"] is model.params["head"]
    assert w.config.context_window == 24 and model.config.context_window == 12


def test_freeze_blocks_grads(model):
    f = model.copy().freeze()
    assert all(not p.requires_grad for p in f.parameters())


def test_param_count():
    cfg = tiny_config(L=4, N=4, d=128, V=256, T=64)
    m = DecoderModel.init(cfg, np.random.default_rng(0))
    per_layer = 4 * 128 * 128 + 3 * 128 * 256 + 2 * 128
    assert m.n_params() == 2 * 256 * 128 + 128 + 4 * per_layer
    assert set(param_shapes(cfg)) == set(m.params)


def test_float32_model_close_to_float64(model):
    m32 = DecoderModel(
        model.config.replace(dtype="float32"),
        {k: type(v)(v.data.astype(np.float32)) for k, v in model.params.items()},
    )
    toks = random_tokens(np.random.default_rng(6), 2, 8, 16)
    a, _ = forward_trace(model, toks)
    b, _ = forward_trace(m32, toks)
    assert b.data.dtype == np.float32
    assert np.allclose(a.data, b.data, atol=1e-4)
