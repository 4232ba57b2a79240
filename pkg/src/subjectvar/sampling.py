"""Autoregressive next-scale generation with subject-text classifier-free
guidance, per-bit sampling, KV caching, and a latency benchmark against a
simulated next-token schedule.

Guidance runs three branches per scale -- unconditional, text-only, fully
conditioned -- as one batched forward, and extrapolates their logits with
independent text and image scales.
"""

from __future__ import annotations

import platform
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConditionBundle, build_bundle
from .numerics import Rng
from .tokenizer import MultiScaleTokens


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceScales:
    gamma_t: float = 3.0
    gamma_i: float = 2.0

    def __post_init__(self):
        if not (np.isfinite(self.gamma_t) and np.isfinite(self.gamma_i)):
            raise SamplingError("guidance scales must be finite")
        if self.gamma_t < 0 or self.gamma_i < 0:
            raise SamplingError("guidance scales must be >= 0")

    @property
    def identity_collapse(self):
        # only (1, 1) may collapse to the single fully-conditioned branch
        return self.gamma_t == 1.0 and self.gamma_i == 1.0


@dataclass
class SampleRequest:
    prompt: str
    reference: np.ndarray = None
    scales: GuidanceScales = field(default_factory=GuidanceScales)
    temperature: float = 1.0
    argmax: bool = False
    seed: int = 0
    num_images: int = 1


def cfg_combine(l_uncond, l_text, l_full, scales):
    """Guided logits l_u + g_t (l_t - l_u) + g_i (l_f - l_t).

    The three identity settings return the corresponding operand directly,
    so those equalities are exact in floating point.
    """
    if l_uncond.shape != l_text.shape or l_text.shape != l_full.shape:
        raise SamplingError(
            f"cfg_combine: shape mismatch {l_uncond.shape}/{l_text.shape}/{l_full.shape}"
        )
    gt, gi = scales.gamma_t, scales.gamma_i
    if gt == 1.0 and gi == 1.0:
        return l_full
    if gt == 1.0 and gi == 0.0:
        return l_text
    if gt == 0.0 and gi == 0.0:
        return l_uncond
    return l_uncond + gt * (l_text - l_uncond) + gi * (l_full - l_text)


def sample_bits(logits, temperature=1.0, rng=None, argmax=False):
    """Independent per-bit draws: +1 with probability sigmoid(logit / tau);
    argmax mode takes the sign (sign(0) = +1)."""
    logits = np.asarray(logits)
    if argmax:
        return np.where(logits >= 0, 1, -1).astype(np.int8)
    if temperature <= 0:
        raise SamplingError("temperature must be > 0 (or use argmax)")
    if rng is None:
        raise SamplingError("sampling requires an rng")
    z = logits / temperature
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
    u = rng.uniform(logits.shape)
    return np.where(u < p, 1, -1).astype(np.int8)


class Sampler:
    """Owns one generation request at a time; shares immutable model and
    tokenizer parameters with any number of sibling samplers."""

    def __init__(self, model, tokenizer, vocab=None):
        self.model = model
        self.tokenizer = tokenizer
        self.vocab = vocab or model.vocab

    def _branches(self, bundle, scales, with_reference):
        full = bundle
        if scales.identity_collapse:
            return [full]
        uncond = ConditionBundle()
        text = ConditionBundle(prompt=bundle.prompt, text_ids=bundle.text_ids)
        return [uncond, text, full]

    def _make_bundle(self, request):
        reference = request.reference
        if request.scales.gamma_i > 0 and reference is None:
            raise SamplingError("gamma_i > 0 requires a reference image")
        return build_bundle(request.prompt, reference, self.tokenizer, self.vocab)

    def generate(self, request, collect_debug=False):
        """Run the scale loop once per requested image.

        Returns (images, records); each record carries the per-scale token
        maps, per-scale timings, and the exact conditioned-forward-pass
        count (3K with guidance active, K at the (1,1) collapse).
        """
        q = self.tokenizer.quantizer
        schedule = q.schedule
        bundle = self._make_bundle(request)
        branches = self._branches(bundle, request.scales, request.reference is not None)
        nb = len(branches)
        images, records = [], []
        for img_idx in range(request.num_images):
            rng = Rng(request.seed).child(f"image{img_idx}")
            state = self.model.request_state(branches)
            self.model.forward_chunk(state, self.model.prefix_chunk(state), attend_ref=False)
            recon = np.zeros((schedule[-1][0], schedule[-1][1], q.d_bits), dtype=np.float32)
            passes = 0
            maps, scale_times, debug_logits = [], [], []
            for k, (h, w) in enumerate(schedule):
                t0 = time.perf_counter()
                chunk = self.model.segment_chunk(k, [recon] * nb)
                hidden = self.model.forward_chunk(state, chunk, attend_ref=True)
                logits = self.model.chunk_logits(hidden)
                passes += nb
                if nb == 1:
                    combined = logits[0]
                else:
                    combined = cfg_combine(logits[0], logits[1], logits[2], request.scales)
                codes = sample_bits(
                    combined, request.temperature, rng.child(f"scale{k}"), request.argmax
                ).reshape(h, w, q.d_bits)
                maps.append(codes)
                recon = recon + q.upsample_codes(codes, k)
                scale_times.append(time.perf_counter() - t0)
                if collect_debug:
                    debug_logits.append(logits.copy())
            tokens = MultiScaleTokens(maps, schedule)
            images.append(self.tokenizer.decode_image(recon))
            rec = {
                "seed": request.seed,
                "image_index": img_idx,
                "scales": {"gamma_t": request.scales.gamma_t, "gamma_i": request.scales.gamma_i},
                "prompt": request.prompt,
                "forward_passes": passes,
                "branches": nb,
                "tokens": tokens,
                "scale_seconds": scale_times,
            }
            if collect_debug:
                rec["branch_logits"] = debug_logits
                rec["final_recon"] = recon
            records.append(rec)
        return images, records

    # -- verification harnesses ---------------------------------------------

    def cache_equivalence_check(self, request, corrupt=None):
        """Max |cached - recomputed| logit divergence across scales/branches.

        The recomputation is a single teacher-forced pass on the sampled
        tokens: by scale causality its scale-k rows equal what the cached
        incremental pass produced at step k. `corrupt=(block, flat_index)`
        flips the sign of one cached key entry before the last scale, for
        fault-injection tests.
        """
        q = self.tokenizer.quantizer
        bundle = self._make_bundle(request)
        branches = self._branches(bundle, request.scales, request.reference is not None)
        nb = len(branches)
        rng = Rng(request.seed).child("cache-check")
        state = self.model.request_state(branches)
        self.model.forward_chunk(state, self.model.prefix_chunk(state), attend_ref=False)
        recon = np.zeros((q.schedule[-1][0], q.schedule[-1][1], q.d_bits), dtype=np.float32)
        incremental, maps = [], []
        for k, (h, w) in enumerate(q.schedule):
            if corrupt is not None and k == len(q.schedule) - 1:
                blk, idx = corrupt
                flat = state["k_gen"][blk].reshape(-1)
                flat[idx % flat.size] = -flat[idx % flat.size]
            chunk = self.model.segment_chunk(k, [recon] * nb)
            hidden = self.model.forward_chunk(state, chunk, attend_ref=True)
            logits = self.model.chunk_logits(hidden)
            incremental.append(logits)
            combined = logits[0] if nb == 1 else cfg_combine(
                logits[0], logits[1], logits[2], request.scales)
            codes = sample_bits(combined, request.temperature, rng.child(f"s{k}"),
                                request.argmax).reshape(h, w, q.d_bits)
            maps.append(codes)
            recon = recon + q.upsample_codes(codes, k)
        tokens = MultiScaleTokens(maps, q.schedule)
        full = self.model.forward_teacher([tokens] * nb, branches, q).data
        worst = 0.0
        pos = 0
        for k, (h, w) in enumerate(q.schedule):
            n = h * w
            worst = max(
                worst,
                float(np.abs(full[:, pos : pos + n, :] - incremental[k]).max()),
            )
            pos += n
        return worst

    def bench(self, request, n_images=1, warmup=1):
        """Wall-clock next-scale generation vs a measured next-token
        baseline of h*w sequential single-token passes through the same
        network."""
        q = self.tokenizer.quantizer
        for _ in range(warmup):
            self.generate(SampleRequest(**{**request.__dict__, "num_images": 1}))
        t0 = time.perf_counter()
        per_image_passes = None
        per_scale = None
        for i in range(n_images):
            _, recs = self.generate(SampleRequest(**{**request.__dict__, "num_images": 1,
                                                     "seed": request.seed + i}))
            per_image_passes = recs[0]["forward_passes"]
            per_scale = recs[0]["scale_seconds"]
        next_scale_s = (time.perf_counter() - t0) / n_images

        # next-token baseline: h*w sequential single-token cached passes
        h, w = q.schedule[-1]
        bundle = self._make_bundle(request)
        branches = [bundle]
        attend_ref = request.reference is not None
        t0 = time.perf_counter()
        state = self.model.request_state(branches)
        self.model.forward_chunk(state, self.model.prefix_chunk(state), attend_ref=False)
        recon = np.zeros((h, w, q.d_bits), dtype=np.float32)
        full_chunk = self.model.segment_chunk(len(q.schedule) - 1, [recon])
        for i in range(h * w):
            hidden = self.model.forward_chunk(state, full_chunk[:, i : i + 1], attend_ref=attend_ref)
            self.model.chunk_logits(hidden)
        next_token_s = time.perf_counter() - t0

        return {
            "wall_clock_per_image_s": next_scale_s,
            "per_scale_seconds": per_scale,
            "forward_passes": per_image_passes,
            "tokens_generated": sum(hh * ww for hh, ww in q.schedule),
            "next_token_passes": h * w,
            "next_token_wall_clock_s": next_token_s,
            "speedup": next_token_s / next_scale_s,
            "machine": {
                "platform": platform.platform(),
                "cpu_count": os.cpu_count(),
                "processor": platform.processor() or "unknown",
            },
        }
