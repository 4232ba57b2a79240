"""Two-phase training: the text-to-image backbone first, then the frozen-
backbone pass that only touches subject-injection parameters.

Also home to the optimizer and the data-level recipe: per-scale reweighted
bit BCE, condition dropout, bit-flip self-correction, prompt truncation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Rng, Tensor
from .tokenizer import MultiScaleTokens, bsq_quantize


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_base: float = 3e-5
    lr_mm: float = 3e-6
    betas: tuple = (0.9, 0.97)
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    batch_size: int = 16
    steps: int = 2000
    p_text_drop: float = 0.1
    p_image_drop: float = 0.1
    flip_ratio: float = 0.3
    flip_fraction: float = 0.1
    truncate_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("p_text_drop", "p_image_drop", "flip_ratio", "flip_fraction", "truncate_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise TrainingError(f"{name}={v} outside [0,1]")
        if self.lr_base <= 0 or self.lr_mm <= 0:
            raise TrainingError("learning rates must be positive")


# ---------------------------------------------------------------------------
# Optimizer


def clip_by_global_norm(grads, max_norm):
    """Scale the gradient list so its global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return [g * scale for g in grads], total


class Adam:
    """Adaptive-moment update with bias correction and global-norm clipping.

    Parameters are (name, Tensor) pairs; per-name learning-rate overrides
    support the reduced multi-modal rate.
    """

    def __init__(self, named_params, lr, betas=(0.9, 0.97), eps=1e-8, clip=5.0, lr_overrides=None):
        self.named_params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.lr_overrides = lr_overrides or {}
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in self.named_params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.named_params}

    def step(self):
        grads = [
            t.grad if t.grad is not None else np.zeros_like(t.data)
            for _, t in self.named_params
        ]
        grads, raw_norm = clip_by_global_norm(grads, self.clip)
        self.step_count += 1
        bc1 = 1.0 - self.b1**self.step_count
        bc2 = 1.0 - self.b2**self.step_count
        for (name, t), g in zip(self.named_params, grads):
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * (g * g)
            lr = self.lr_overrides.get(name, self.lr)
            t.data = t.data - (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(
                t.data.dtype
            )
        return raw_norm

    def state(self):
        return {
            "step": self.step_count,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state(self, st):
        self.step_count = st["step"]
        for n in self.m:
            self.m[n] = st["m"][n].copy()
            self.v[n] = st["v"][n].copy()


# ---------------------------------------------------------------------------
# Loss


def scale_weighted_bce(logits, token_targets, schedule):
    """Mean bit BCE per scale, each scale weighted 1/K.

    logits: Tensor (B, total_tokens, d_bits); token_targets: int array of the
    same shape with values in {-1, +1}.
    """
    targets = np.asarray(token_targets)
    if tuple(targets.shape) != tuple(logits.data.shape):
        raise TrainingError(
            f"loss shape mismatch: logits {logits.data.shape} vs targets {targets.shape}"
        )
    t01 = ((targets + 1) // 2).astype(logits.data.dtype)
    per_bit = nm.bce_with_logits(logits, t01)
    total, pos = None, 0
    for h, w in schedule:
        n = h * w
        term = nm.mean(per_bit[:, pos : pos + n, :])
        total = term if total is None else nm.add(total, term)
        pos += n
    return nm.mul(total, 1.0 / len(schedule))


def per_scale_bit_accuracy(logits_np, token_targets, schedule):
    pred = np.where(logits_np >= 0, 1, -1)
    out, pos = [], 0
    for h, w in schedule:
        n = h * w
        out.append(float((pred[:, pos : pos + n, :] == token_targets[:, pos : pos + n, :]).mean()))
        pos += n
    return out


# ---------------------------------------------------------------------------
# Condition dropout / prompt truncation / bit-flip self-correction


def condition_dropout(bundle, p_text, p_image, rng):
    """Independently drop the text condition and the (semantic, global,
    content) image-condition group to their learned nulls."""
    drop_text = rng.bernoulli(p_text)
    drop_image = rng.bernoulli(p_image)
    out = bundle.copy()
    if drop_text:
        out.text_ids = None
    if drop_image:
        out.sem_desc = None
        out.content_latent = None
    return out


def truncate_prompt(prompt, p, rng, delimiter=" ; "):
    """With probability p keep only the first clause."""
    if rng.bernoulli(p):
        return prompt.split(delimiter)[0]
    return prompt


def bitwise_self_correction(latent, quantizer, ratio, flip_fraction, rng):
    """Corrupt teacher-forcing inputs by sign flips and recompute targets.

    Walks the residual cascade once: at each non-final scale, with
    probability `ratio`, flips a uniformly chosen `flip_fraction` of that
    scale's bits in the input copy. Targets at each scale quantize the
    residual against the (possibly corrupted) cumulative reconstruction, so
    the scale where a flip happens keeps its uncorrupted target while later
    scales learn to repair the damage.

    Returns (input_tokens, target_tokens).
    """
    schedule = quantizer.schedule
    h, w = schedule[-1]
    recon = np.zeros_like(latent)
    in_maps, tgt_maps = [], []
    for k, (hk, wk) in enumerate(schedule):
        resid = nm.resize_bilinear_np(latent - recon, (hk, wk))
        codes, _ = bsq_quantize(resid)
        tgt_maps.append(codes)
        inp = codes
        if k < len(schedule) - 1 and rng.bernoulli(ratio):
            inp = codes.copy()
            flat = inp.reshape(-1)
            n_flip = int(round(flip_fraction * flat.size))
            if n_flip:
                idx = rng.choice(flat.size, n_flip, replace=False)
                flat[idx] = -flat[idx]
        in_maps.append(inp)
        recon = recon + quantizer._upsample_scale(inp, k, (h, w), latent.dtype)
    return (
        MultiScaleTokens(in_maps, schedule),
        MultiScaleTokens(tgt_maps, schedule),
    )


# ---------------------------------------------------------------------------
# Train state and loops


@dataclass
class TrainState:
    phase: str
    step: int = 0
    loss_history: list = field(default_factory=list)
    rng_state: dict = None
    opt_state: dict = None


def make_optimizer(model, phase, config):
    """Optimizer over the parameters the given phase may touch."""
    named = model.phase_params(phase)
    overrides = {}
    if phase == "b":
        overrides = {
            name: config.lr_mm for name, _ in named if model.is_content_group(name)
        }
    return Adam(
        named,
        lr=config.lr_base,
        betas=tuple(config.betas),
        clip=config.grad_clip,
        lr_overrides=overrides,
    )


def train_step(batch, model, quantizer, opt, config, phase, rng):
    """One optimization step on a batch of (latent, bundle) pairs.

    Applies prompt truncation, condition dropout, and self-correction, then
    a teacher-forced forward, reweighted BCE, and a clipped Adam update.
    Phase A forces the image conditions to their nulls; phase B additionally
    requires the optimizer to cover only the subject-injection partition
    (enforced by construction in make_optimizer).
    """
    in_tokens, tgt_tokens, bundles = [], [], []
    for i, (latent, bundle) in enumerate(batch):
        srng = rng.child(f"sample{i}")
        b = bundle.copy()
        if b.prompt is not None:
            b.prompt = truncate_prompt(b.prompt, config.truncate_p, srng.child("trunc"))
            b.text_ids = model.vocab.encode(b.prompt)
        if phase == "a":
            b.sem_desc = None
            b.content_latent = None
            if srng.child("dropout").bernoulli(config.p_text_drop):
                b.text_ids = None
        else:
            b = condition_dropout(b, config.p_text_drop, config.p_image_drop, srng.child("dropout"))
        inp, tgt = bitwise_self_correction(
            latent, quantizer, config.flip_ratio, config.flip_fraction, srng.child("flip")
        )
        in_tokens.append(inp)
        tgt_tokens.append(tgt)
        bundles.append(b)

    logits = model.forward_teacher(in_tokens, bundles, quantizer)
    targets = np.stack([t.flat_bits() for t in tgt_tokens])
    loss = scale_weighted_bce(logits, targets, quantizer.schedule)
    model.params.zero_grads()
    nm.backward(loss)
    grad_norm = opt.step()
    acc = per_scale_bit_accuracy(logits.data, targets, quantizer.schedule)
    return {"loss": loss.item(), "grad_norm": grad_norm, "bit_acc": acc}


def run_training(model, quantizer, dataset, config, phase, state=None, opt=None, log_path=None):
    """Run config.steps optimization steps over the dataset.

    `dataset` is a list of (latent, bundle) pairs; batches are drawn by a
    dedicated order stream so runs are deterministic and resumable.
    """
    if phase == "b" and model.phase_tag != "a":
        raise TrainingError("phase B requires a phase-A checkpointed model")
    state = state or TrainState(phase=phase, rng_state=Rng(config.seed).state())
    opt = opt or make_optimizer(model, phase, config)
    if state.opt_state is not None:
        opt.load_state(state.opt_state)
    log_f = open(log_path, "a") if log_path else None
    try:
        while state.step < config.steps:
            step_rng = Rng(config.seed).child(f"{phase}-step{state.step}")
            idx = step_rng.child("order").integers(
                0, len(dataset), (min(config.batch_size, len(dataset)),)
            )
            batch = [dataset[i] for i in idx]
            rec = train_step(batch, model, quantizer, opt, config, phase, step_rng)
            state.step += 1
            state.loss_history.append(rec["loss"])
            if log_f:
                log_f.write(
                    json.dumps(
                        {
                            "step": state.step,
                            "loss": rec["loss"],
                            "grad_norm": rec["grad_norm"],
                            "bit_acc": rec["bit_acc"],
                            "lr": opt.lr,
                            "phase": phase,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    finally:
        if log_f:
            log_f.close()
    state.opt_state = opt.state()
    model.phase_tag = phase
    return state, opt
