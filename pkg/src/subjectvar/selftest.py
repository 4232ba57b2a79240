"""Fast self-checks: gradient oracles, mask leakage, guidance identities,
and cache equivalence. Each check returns (ok, detail) so the CLI and the
test suite share one implementation.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .conditioning import ConditionBundle
from .model import ModelConfig, SubjectScaleModel, mm_attention, build_layout, additive_mask, build_mask
from .numerics import Rng, Tensor, grad_check, tensor
from .sampling import GuidanceScales, SampleRequest, Sampler, cfg_combine
from .tokenizer import ImageTokenizer, Autoencoder, AutoencoderConfig, MultiScaleQuantizer


def micro_model(seed=0, dtype=np.float32, n_blocks=2, d_model=16, schedule=((1, 1), (2, 2)),
                d_bits=4, n_sem=4, content_grid=2):
    cfg = ModelConfig(
        d_model=d_model, n_blocks=n_blocks, n_heads=2, ffn_mult=2, d_bits=d_bits,
        d_latent=d_bits, schedule=schedule, n_sem=n_sem, content_grid=content_grid,
        seed=seed,
    )
    model = SubjectScaleModel(cfg, dtype=dtype)
    # selftest models need live weights where training normally provides them
    r = Rng(seed).child("selftest-head")
    model.params["head.w"].data = r.normal(model.params["head.w"].data.shape, 0.05).astype(dtype)
    model.params["blocks.0.adaln.w2"].data = r.normal(
        model.params["blocks.0.adaln.w2"].data.shape, 0.02).astype(dtype)
    return model


def micro_quantizer(model, seed=0):
    q = MultiScaleQuantizer(model.config.schedule, model.config.d_bits)
    lat_h, lat_w = model.config.schedule[-1]
    q.calibrate(Rng(seed).child("calib").normal((8, lat_h, lat_w, model.config.d_bits)).astype(np.float32))
    return q


def random_bundle(model, seed=0, null=False):
    if null:
        return ConditionBundle()
    r = Rng(seed).child("bundle")
    cfg = model.config
    desc = r.uniform((cfg.n_sem, 12)).astype(np.float32)
    lat = r.normal((cfg.content_grid, cfg.content_grid, cfg.d_latent)).astype(np.float32)
    ids = np.asarray(r.integers(0, len(model.vocab), (5,)), dtype=np.int64)
    return ConditionBundle(prompt=None, text_ids=ids, sem_desc=desc, content_latent=lat)


def random_tokens(model, quantizer, seed=0):
    lat_h, lat_w = model.config.schedule[-1]
    lat = Rng(seed).child("lat").normal((lat_h, lat_w, model.config.d_bits)).astype(np.float32)
    return quantizer.encode(lat)


# ---------------------------------------------------------------------------


def check_cfg_identities(n_triples=100, seed=0):
    """The three identity settings must hold with exact fp equality."""
    rng = Rng(seed).child("cfg")
    for i in range(n_triples):
        shape = (3, 7, 4)
        lu = rng.normal(shape).astype(np.float32) * 3
        lt = rng.normal(shape).astype(np.float32) * 3
        lf = rng.normal(shape).astype(np.float32) * 3
        if not (
            np.array_equal(cfg_combine(lu, lt, lf, GuidanceScales(1.0, 1.0)), lf)
            and np.array_equal(cfg_combine(lu, lt, lf, GuidanceScales(1.0, 0.0)), lt)
            and np.array_equal(cfg_combine(lu, lt, lf, GuidanceScales(0.0, 0.0)), lu)
        ):
            return False, f"identity violated at triple {i}"
    return True, f"{n_triples} triples exact"


def check_leakage(seed=0, n_perturb=50):
    """Reference-stream outputs must ignore the generated stream exactly."""
    model = micro_model(seed)
    rng = Rng(seed).child("leak")
    layout = build_layout(model.config.schedule, 3)
    L = layout.total_len
    mask_bias = additive_mask(build_mask(layout)).reshape(1, 1, L, L)
    ref_ind = np.zeros((1, 1, L, L), dtype=np.float32)
    ref_ind[..., : layout.gen_len, layout.gen_len :] = 1.0
    w = model.block_weights(0)
    c = Tensor(rng.normal((1, 3, model.config.d_model)).astype(np.float32))
    x0 = rng.normal((1, layout.gen_len, model.config.d_model)).astype(np.float32)
    _, c_ref = mm_attention(Tensor(x0), c, w, model.config.n_heads, w["beta_c"],
                            mask_bias, ref_ind)
    base = c_ref.data
    for i in range(n_perturb):
        x = x0 + rng.normal(x0.shape).astype(np.float32) * 10 ** float(rng.integers(-2, 3))
        _, c2 = mm_attention(Tensor(x), c, w, model.config.n_heads, w["beta_c"],
                             mask_bias, ref_ind)
        if not np.array_equal(base, c2.data):
            return False, f"reference stream moved at perturbation {i}"
    return True, f"{n_perturb} perturbations, bit-identical"


def check_scale_causality(seed=0, n_trials=20):
    """Teacher-forced logits at scale k must be bit-identical under any
    perturbation of scales > k."""
    model = micro_model(seed, schedule=((1, 1), (2, 2), (4, 4)), d_bits=4)
    q = micro_quantizer(model, seed)
    tokens = random_tokens(model, q, seed)
    bundle = random_bundle(model, seed)
    base = model.forward_teacher([tokens], [bundle], q).data
    lens = [h * w for h, w in model.config.schedule]
    offsets = np.cumsum([0] + lens)
    rng = Rng(seed).child("causality")
    for k in range(len(lens) - 1):
        for t in range(n_trials):
            perturbed = tokens.copy()
            for j in range(k + 1, len(lens)):
                flip = rng.uniform(perturbed.maps[j].shape) < 0.5
                perturbed.maps[j] = np.where(flip, -perturbed.maps[j], perturbed.maps[j]).astype(np.int8)
            out = model.forward_teacher([perturbed], [bundle], q).data
            upto = offsets[k + 1]
            if not np.array_equal(base[:, :upto, :], out[:, :upto, :]):
                return False, f"scale {k} logits moved under perturbation of later scales"
    return True, f"{n_trials} trials per scale, divergence 0"


def check_cache_equivalence(seed=0, tol=1e-5):
    model = micro_model(seed, schedule=((1, 1), (2, 2), (4, 4)), d_bits=4)
    q = micro_quantizer(model, seed)
    ae = Autoencoder(
        AutoencoderConfig(image_size=16, downsample=4, d_latent=4, hidden=(8, 8), steps=0),
        Rng(seed).child("ae"),
    )
    tok = ImageTokenizer(ae, q)
    sampler = Sampler(model, tok)
    ref = Rng(seed).child("ref-img").uniform((16, 16, 3)).astype(np.float32)
    req = SampleRequest("a", reference=None, scales=GuidanceScales(2.0, 0.0), seed=seed)
    req.prompt = "a small red solid circle on a blue background ; center ; rotated 0"
    div = sampler.cache_equivalence_check(req)
    return div < tol, f"max divergence {div:.2e}"


def check_gradients(seeds=3, tol=1e-4):
    """Finite-difference oracle over a full block in float64."""
    worst = 0.0
    for seed in range(seeds):
        model = micro_model(seed, dtype=np.float64, d_model=8)
        q = micro_quantizer(model, seed)
        tokens = random_tokens(model, q, seed)
        bundle = random_bundle(model, seed)
        co = Rng(seed).child("co").normal((1, sum(h * w for h, w in model.config.schedule),
                                           model.config.d_bits))

        def loss_fn():
            logits = model.forward_teacher([tokens], [bundle], q)
            return nm.sum_(nm.mul(logits, Tensor(co)))

        for name in ("blocks.0.attn.wq", "blocks.0.ca.wk_s", "blocks.0.ffn_c.w1",
                     "blocks.0.beta_c", "cond.sem_proj.w", "head.w"):
            orig = model.params._params[name]

            def f(leaf):
                model.params._params[name] = leaf
                try:
                    return loss_fn()
                finally:
                    model.params._params[name] = orig

            err = grad_check(f, tensor(orig.data.copy(), np.float64), eps=1e-5)
            worst = max(worst, err)
            if err > tol:
                return False, f"seed {seed} param {name}: rel err {err:.2e}"
    return True, f"worst rel err {worst:.2e} over {seeds} seeds"


ALL_CHECKS = (
    ("gradient-checks", check_gradients),
    ("mask-leakage", check_leakage),
    ("scale-causality", check_scale_causality),
    ("cfg-identities", check_cfg_identities),
    ("cache-equivalence", check_cache_equivalence),
)


def run_selftest(verbose_print=print):
    ok_all = True
    for name, fn in ALL_CHECKS:
        ok, detail = fn()
        ok_all &= ok
        verbose_print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok_all
