import numpy as np
import pytest

from subjectvar import model as mdl
from subjectvar import numerics as nm
from subjectvar.conditioning import ConditionBundle
from subjectvar.model import (
    ModelConfig,
    SubjectScaleModel,
    additive_mask,
    attention,
    build_layout,
    build_mask,
    decoupled_cross_attention,
    mm_attention,
)
from subjectvar.numerics import Rng, Tensor, grad_check, tensor
from subjectvar.selftest import micro_model, micro_quantizer, random_bundle, random_tokens


def test_layout_lengths():
    layout = build_layout([(1, 1)], 0)
    assert layout.gen_len == 3  # [C, S, seg1]
    layout = build_layout([(1, 1), (2, 2)], 3)
    assert layout.gen_len == 2 + 1 + 4 == 7
    assert layout.total_len == 10
    assert layout.seg_offsets == [2, 3]


def test_mask_matches_handwritten_fixture():
    # layout [C, S | s1 | s2 s2 s2 s2 | r r r]: rows x cols, 1 = may attend
    expected = np.array(
        [
            [1, 1, 0, 0, 0, 0, 0, 0, 0, 0],  # C: prefix only
            [1, 1, 0, 0, 0, 0, 0, 0, 0, 0],  # S: prefix only
            [1, 1, 1, 0, 0, 0, 0, 1, 1, 1],  # scale1: prefix + self + reference
            [1, 1, 1, 1, 1, 1, 1, 1, 1, 1],  # scale2 rows: everything up to scale2 + ref
            [1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
            [0, 0, 0, 0, 0, 0, 0, 1, 1, 1],  # reference rows: reference only
            [0, 0, 0, 0, 0, 0, 0, 1, 1, 1],
            [0, 0, 0, 0, 0, 0, 0, 1, 1, 1],
        ],
        dtype=bool,
    )
    got = build_mask(build_layout([(1, 1), (2, 2)], 3))
    assert np.array_equal(got, expected)
    row = got[3]
    assert row.sum() == 10  # prefix(2) + scale1(1) + scale2(4) + reference(3)


def test_mask_without_reference_is_block_causal():
    layout = build_layout([(1, 1), (2, 2)], 0)
    m = build_mask(layout)
    assert m.shape == (7, 7)
    assert not m[2, 3:].any()  # scale1 cannot see scale2
    assert m[3:, :7].all()  # scale2 sees everything generated


def _mm_weights(rng, d):
    w = {}
    for k in ("wq", "wk", "wv", "wo", "wq_c", "wk_c", "wv_c"):
        w[k] = Tensor(rng.normal((d, d), 0.3).astype(np.float32))
    for k in ("bq", "bk", "bv", "bo", "bq_c", "bk_c", "bv_c"):
        w[k] = Tensor(rng.normal((d,), 0.1).astype(np.float32))
    return w


def test_mm_attention_reference_stream_oblivious():
    rng = Rng(0)
    d = 8
    layout = build_layout([(1, 1)], 2)
    mask_bias = additive_mask(build_mask(layout)).reshape(1, 1, 5, 5)
    ind = np.zeros((1, 1, 5, 5), dtype=np.float32)
    ind[..., :3, 3:] = 1.0
    w = _mm_weights(rng, d)
    beta = Tensor(np.asarray(-2.0, dtype=np.float32))
    c = Tensor(rng.normal((1, 2, d)).astype(np.float32))
    x1 = Tensor(rng.normal((1, 3, d)).astype(np.float32))
    x2 = Tensor(rng.normal((1, 3, d)).astype(np.float32) * 100)
    _, c1 = mm_attention(x1, c, w, 2, beta, mask_bias, ind)
    _, c2 = mm_attention(x2, c, w, 2, beta, mask_bias, ind)
    assert np.array_equal(c1.data, c2.data)


def test_mm_attention_single_token_no_reference():
    rng = Rng(1)
    d = 8
    mask_bias = np.zeros((1, 1, 1, 1), dtype=np.float32)
    ind = np.zeros((1, 1, 1, 1), dtype=np.float32)
    w = _mm_weights(rng, d)
    x = Tensor(rng.normal((1, 1, d)).astype(np.float32))
    c = Tensor(np.zeros((1, 0, d), dtype=np.float32))
    out, _ = mm_attention(x, c, w, 2, Tensor(np.asarray(0.0, np.float32)), mask_bias, ind)
    # the lone token attends only itself: its value vector through wo
    v = x.data[0, 0] @ w["wv"].data + w["bv"].data
    expect = v @ w["wo"].data + w["bo"].data
    assert np.allclose(out.data[0, 0], expect, atol=1e-6)


def test_mm_attention_matches_dense_oracle():
    """2 generated + 1 reference token, 1 head, random small weights."""
    rng = Rng(2)
    d = 4
    w = _mm_weights(rng, d)
    beta_val = -1.3
    x = rng.normal((1, 2, d)).astype(np.float32)
    c = rng.normal((1, 1, d)).astype(np.float32)
    mask = np.array([[1, 1, 1], [1, 1, 1], [0, 0, 1]], dtype=bool)  # 2 gen (bidir) + ref
    bias = additive_mask(mask).reshape(1, 1, 3, 3)
    ind = np.zeros((1, 1, 3, 3), dtype=np.float32)
    ind[..., :2, 2:] = 1.0
    out_x, out_c = mm_attention(
        Tensor(x), Tensor(c), w, 1, Tensor(np.asarray(beta_val, np.float32)), bias, ind
    )

    # independent dense computation
    xj = np.concatenate([x[0], c[0]], 0).astype(np.float64)
    q = np.concatenate(
        [x[0] @ w["wq"].data + w["bq"].data, c[0] @ w["wq_c"].data + w["bq_c"].data], 0
    ).astype(np.float64)
    k = np.concatenate(
        [x[0] @ w["wk"].data + w["bk"].data, c[0] @ w["wk_c"].data + w["bk_c"].data], 0
    ).astype(np.float64)
    v = np.concatenate(
        [x[0] @ w["wv"].data + w["bv"].data, c[0] @ w["wv_c"].data + w["bv_c"].data], 0
    ).astype(np.float64)
    scores = q @ k.T / np.sqrt(d)
    scores[:2, 2] += beta_val
    scores[~mask] = -1e9
    e = np.exp(scores - scores.max(1, keepdims=True))
    p = e / e.sum(1, keepdims=True)
    ref = (p @ v) @ w["wo"].data + w["bo"].data
    assert np.abs(out_x.data[0] - ref[:2]).max() < 1e-5
    assert np.abs(out_c.data[0] - ref[2:]).max() < 1e-5


def _ca_weights(rng, d, zero_keys=False):
    w = {}
    w["wq_ca"] = Tensor(rng.normal((d, d), 0.3).astype(np.float32))
    w["bq_ca"] = Tensor(np.zeros(d, dtype=np.float32))
    for s in ("t", "s"):
        std = 0.0 if (zero_keys and s == "s") else 0.3
        w[f"wk_{s}"] = Tensor((rng.normal((d, d), 0.3) * (0 if zero_keys and s == "s" else 1)).astype(np.float32))
        w[f"bk_{s}"] = Tensor(np.zeros(d, dtype=np.float32))
        w[f"wv_{s}"] = Tensor(rng.normal((d, d), 0.3).astype(np.float32))
        w[f"bv_{s}"] = Tensor(np.zeros(d, dtype=np.float32))
    return w


def test_cross_attention_beta_limit_is_text_only():
    rng = Rng(3)
    d = 8
    w = _ca_weights(rng, d)
    x = Tensor(rng.normal((1, 3, d)).astype(np.float32))
    c_s = Tensor(rng.normal((1, 4, d)).astype(np.float32))
    c_t = Tensor(rng.normal((1, 5, d)).astype(np.float32))
    key_bias = np.zeros((1, 1, 1, 9), dtype=np.float32)
    ind = np.zeros((1, 1, 1, 9), dtype=np.float32)
    ind[..., :4] = 1.0
    out = decoupled_cross_attention(
        x, c_s, c_t, w, 2, Tensor(np.asarray(-1e9, np.float32)), key_bias, ind
    )
    # text-only oracle: drop semantic keys entirely
    empty = Tensor(np.zeros((1, 0, d), dtype=np.float32))
    bias_t = np.zeros((1, 1, 1, 5), dtype=np.float32)
    out_t = decoupled_cross_attention(
        x, empty, c_t, w, 2, Tensor(np.asarray(0.0, np.float32)), bias_t,
        np.zeros((1, 1, 1, 5), dtype=np.float32),
    )
    assert np.allclose(out.data, out_t.data, atol=1e-6)


def test_cross_attention_equal_logits_averages_values():
    rng = Rng(4)
    d = 4
    w = _ca_weights(rng, d)
    # zero queries and keys -> all logits equal; beta_s = 0 keeps symmetry
    w["wq_ca"] = Tensor(np.zeros((d, d), dtype=np.float32))
    x = Tensor(rng.normal((1, 1, d)).astype(np.float32))
    c_s = Tensor(rng.normal((1, 1, d)).astype(np.float32))
    c_t = Tensor(rng.normal((1, 1, d)).astype(np.float32))
    out = decoupled_cross_attention(
        x, c_s, c_t, w, 1, Tensor(np.asarray(0.0, np.float32)),
        np.zeros((1, 1, 1, 2), dtype=np.float32), np.zeros((1, 1, 1, 2), dtype=np.float32),
    )
    v_s = c_s.data[0] @ w["wv_s"].data
    v_t = c_t.data[0] @ w["wv_t"].data
    assert np.allclose(out.data[0, 0], (v_s + v_t)[0] / 2 if v_s.shape[0] == 1 else None)


def test_cross_attention_matches_dense_oracle():
    rng = Rng(5)
    d = 4
    w = _ca_weights(rng, d)
    beta = 0.7
    x = rng.normal((1, 2, d)).astype(np.float32)
    c_s = rng.normal((1, 1, d)).astype(np.float32)
    c_t = rng.normal((1, 2, d)).astype(np.float32)
    out = decoupled_cross_attention(
        Tensor(x), Tensor(c_s), Tensor(c_t), w, 1, Tensor(np.asarray(beta, np.float32)),
        np.zeros((1, 1, 1, 3), dtype=np.float32),
        np.concatenate([np.ones((1, 1, 1, 1)), np.zeros((1, 1, 1, 2))], -1).astype(np.float32),
    )
    q = (x[0] @ w["wq_ca"].data).astype(np.float64)
    k = np.concatenate([c_s[0] @ w["wk_s"].data, c_t[0] @ w["wk_t"].data], 0).astype(np.float64)
    v = np.concatenate([c_s[0] @ w["wv_s"].data, c_t[0] @ w["wv_t"].data], 0).astype(np.float64)
    scores = q @ k.T / np.sqrt(d)
    scores[:, 0] += beta
    e = np.exp(scores - scores.max(1, keepdims=True))
    p = e / e.sum(1, keepdims=True)
    assert np.abs(out.data[0] - p @ v).max() < 1e-5


def test_cross_attention_empty_keys_rejected():
    rng = Rng(6)
    d = 4
    w = _ca_weights(rng, d)
    x = Tensor(rng.normal((1, 2, d)).astype(np.float32))
    empty = Tensor(np.zeros((1, 0, d), dtype=np.float32))
    with pytest.raises(mdl.ModelError, match="empty joint key set"):
        decoupled_cross_attention(
            x, empty, empty, w, 1, Tensor(np.asarray(0.0, np.float32)),
            np.zeros((1, 1, 1, 0), dtype=np.float32), np.zeros((1, 1, 1, 0), dtype=np.float32),
        )


def test_adaln_zero_init_is_plain_layernorm():
    model = micro_model(0)
    w = model.block_weights(0)
    w["w2"].data = np.zeros_like(w["w2"].data)  # restore the zero init
    cond = Tensor(Rng(1).normal((2, 16)).astype(np.float32))
    x = Tensor(Rng(2).normal((2, 5, 16)).astype(np.float32))
    sites = mdl.adaln_params(cond, w)
    out = mdl.adaln_apply(x, *sites[0])
    assert np.allclose(out.data, nm.layernorm(x).data, atol=1e-6)


def test_adaln_final_layer_linearity():
    model = micro_model(3)
    w = model.block_weights(0)
    w["w2"].data = Rng(3).normal(w["w2"].data.shape, 0.1).astype(np.float32)
    w["b2"].data = np.zeros_like(w["b2"].data)
    cond = Tensor(Rng(4).normal((1, 16)).astype(np.float32))
    h = nm.gelu(mdl.linear(cond, w["w1"], w["b1"]))
    gb1 = mdl.linear(h, w["w2"], w["b2"])
    gb2 = mdl.linear(nm.mul(h, 2.0), w["w2"], w["b2"])
    assert np.allclose(gb2.data, 2 * gb1.data, atol=1e-5)


def test_adaln_gradcheck():
    model = micro_model(0, dtype=np.float64, d_model=8)
    w = model.block_weights(0)
    w["w2"].data = Rng(5).normal(w["w2"].data.shape, 0.1)
    co = Rng(6).normal((1, 3, 8))

    def f(t):
        x = nm.reshape(t, (1, 3, 8))
        sites = mdl.adaln_params(Tensor(Rng(7).normal((1, 8))), w)
        return nm.sum_(nm.mul(mdl.adaln_apply(x, *sites[0]), Tensor(co)))

    err = grad_check(f, tensor(Rng(8).normal((24,)), np.float64))
    assert err < 1e-4


def test_forward_null_conditions_ignore_raw_inputs():
    model = micro_model(7)
    q = micro_quantizer(model, 7)
    tokens = random_tokens(model, q, 7)
    base = model.forward_teacher([tokens], [ConditionBundle()], q).data
    # a null bundle with different (unused) prompt text changes nothing
    again = model.forward_teacher([tokens], [ConditionBundle(prompt="ignored")], q).data
    assert np.array_equal(base, again)


def test_forward_logits_shape_default_config():
    cfg = ModelConfig()
    assert sum(h * w for h, w in cfg.schedule) == 341
    model = micro_model(0, schedule=((1, 1), (2, 2)), d_bits=4)
    q = micro_quantizer(model)
    tokens = random_tokens(model, q)
    logits = model.forward_teacher([tokens], [random_bundle(model)], q)
    assert logits.data.shape == (1, 5, 4)


def test_param_partition_names():
    model = micro_model(0)
    frozen, trainable = model.partition()
    assert set(frozen).isdisjoint(trainable)
    assert set(frozen) | set(trainable) == set(model.params.names())
    for want in (
        "blocks.0.ca.wk_s", "blocks.0.ca.wv_s", "blocks.0.attn_c.wq", "blocks.0.attn_c.wk",
        "blocks.0.attn_c.wv", "blocks.0.ffn_c.w1", "blocks.0.beta_s", "blocks.0.beta_c",
        "cond.sem_proj.w", "cond.glob_proj.w", "cond.content_proj.w", "cond.content_pos",
        "cond.null_t", "cond.null_s", "cond.null_C", "cond.null_c",
    ):
        assert want in trainable, want
    for want in (
        "blocks.0.attn.wq", "blocks.0.attn.wo", "blocks.0.ca.wq", "blocks.0.ca.wk_t",
        "blocks.0.ffn.w1", "blocks.0.adaln.w1", "cond.text.table", "model.start", "head.w",
    ):
        assert want in frozen, want
    # phase A touches the backbone plus the text null; phase B the subject set
    pa = {n for n, _ in model.phase_params("a")}
    pb = {n for n, _ in model.phase_params("b")}
    assert pa == set(frozen) | {"cond.null_t"}
    assert pb == set(trainable)


def test_beta_gates_init_value():
    model = micro_model(0)
    assert float(model.params["blocks.0.beta_s"].data) == -8.0
    assert float(model.params["blocks.1.beta_c"].data) == -8.0


def test_reducibility_to_text_only_base_model():
    """With zeroed subject groups and beta gates at -8, logits track a
    text-only twin with identical frozen weights."""
    model = micro_model(11, n_blocks=2, d_model=16, schedule=((1, 1), (2, 2)), d_bits=4)
    for name, t in model.params.items():
        if model.is_subject_group(name) and not name.startswith("cond.null"):
            if name.endswith((".g",)):
                continue  # reference-stream norm gains stay at 1
            if "beta" in name:
                continue
            t.data = np.zeros_like(t.data)
    q = micro_quantizer(model, 11)
    worst = 0.0
    for seed in range(10):
        tokens = random_tokens(model, q, seed + 100)
        bundle = random_bundle(model, seed + 100)
        text_only = ConditionBundle(prompt=bundle.prompt, text_ids=bundle.text_ids)
        full = model.forward_teacher([tokens], [bundle], q).data
        base = model.forward_teacher([tokens], [text_only], q).data
        worst = max(worst, float(np.abs(full - base).max()))
    assert worst < 1e-3, worst


def test_embed_text_rejects_overlong():
    model = micro_model(0)
    b = ConditionBundle(text_ids=np.zeros(64, dtype=np.int64))
    with pytest.raises(mdl.ModelError, match="length"):
        model.embed_text(b)


def test_c_slot_substitution_is_local():
    model = micro_model(9, schedule=((1, 1), (2, 2)), d_bits=4)
    q = micro_quantizer(model, 9)
    tokens = random_tokens(model, q, 9)
    bundle = random_bundle(model, 9)
    dropped = bundle.copy()
    dropped.drop_global = True
    emb_full = model.embed_bundles([bundle])
    emb_drop = model.embed_bundles([dropped])
    recons = [q.partial_recons(tokens)]
    x_full = model.build_input(recons, emb_full).data
    x_drop = model.build_input(recons, emb_drop).data
    assert not np.array_equal(x_full[:, 0], x_drop[:, 0])
    assert np.array_equal(x_full[:, 1:], x_drop[:, 1:])
