"""Benchmark protocol with surrogate metrics.

Subject fidelity is the cosine between localized handcrafted descriptors of
the generated image and the reference; text alignment is a deterministic
attribute checker over background color, subject position, and size bucket.
Both are exact functions of their inputs, so reports reproduce bit for bit.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import data as dat
from .conditioning import (
    ConditionBundle,
    build_bundle,
    global_descriptor,
    patch_descriptors,
    segment_subject,
    whiteness_mask,
)
from .numerics import Rng
from .sampling import GuidanceScales, SampleRequest


class EvaluationError(ValueError):
    pass


# sprite extent (2r+1) plus 3: tight enough that a window cannot profitably
# trade subject pixels for a distractor's
WINDOW_BY_SIZE = {"small": 18, "medium": 26, "large": 34}

_QUANT_COLORS = np.array(list(dat.PALETTE.values()) + [(1.0, 1.0, 1.0)], dtype=np.float32)
_QUANT_NAMES = list(dat.PALETTE) + ["white"]


def quantize_to_palette(image):
    """Index of the nearest palette-or-white color per pixel."""
    img = np.asarray(image, dtype=np.float32)
    d = ((img[..., None, :] - _QUANT_COLORS) ** 2).sum(-1)
    return d.argmin(-1)


def whiten_background(image):
    """Replace the dominant color bucket with pure white."""
    q = quantize_to_palette(image)
    dominant = np.bincount(q.reshape(-1), minlength=len(_QUANT_NAMES)).argmax()
    out = np.asarray(image, dtype=np.float32).copy()
    out[q == dominant] = 1.0
    return out


def max_occupancy_window(image, win):
    """Top-left corner of the stride-1 window with the most non-white pixels."""
    occ = (~whiteness_mask(image)).astype(np.int64)
    ii = np.zeros((occ.shape[0] + 1, occ.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = occ.cumsum(0).cumsum(1)
    h, w = occ.shape
    win = min(win, h, w)
    sums = ii[win:, win:] - ii[:-win or None, win:] - ii[win:, :-win or None] + ii[:-win or None, :-win or None]
    idx = int(sums.argmax())
    return idx // sums.shape[1], idx % sums.shape[1], win


def _nn_resize(img, out_size):
    n = img.shape[0]
    idx = np.minimum((np.arange(out_size) + 0.5) * n / out_size, n - 1).astype(int)
    return img[idx][:, idx]


def localized_descriptor(image, size_bucket):
    """Whiten background, crop the strongest-occupancy window for the size
    bucket, rescale, and take the occupancy-weighted global descriptor."""
    whit = whiten_background(image)
    y, x, win = max_occupancy_window(whit, WINDOW_BY_SIZE[size_bucket])
    crop = _nn_resize(whit[y : y + win, x : x + win], 64)
    return global_descriptor(crop)


def subject_fidelity(generated, reference, size_bucket):
    """Cosine of localized descriptors in [-1, 1]; blank images score 0."""
    a = localized_descriptor(generated, size_bucket)
    b = localized_descriptor(reference, size_bucket)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    if np.array_equal(a, b):
        return 1.0
    return float(np.dot(a, b) / (na * nb))


@lru_cache(maxsize=None)
def expected_area(shape, size):
    canvas = np.ones((64, 64, 3), dtype=np.float32)
    mask = dat.draw_sprite(canvas, shape, "red", "solid", "red",
                           dat.SIZE_RADIUS[size], (32, 32), 0)
    return int(mask.sum())


def text_alignment(image, prompt):
    """Fraction of checked scene attributes the image satisfies: background
    color, subject position (window quadrant), and subject size bucket.

    The occupancy window is sized by the prompt's claimed size bucket, which
    keeps it tight enough to discriminate the five positions and free of
    distractor pixels by construction.
    """
    subject_attrs, scene_attrs = dat.parse_prompt(prompt)
    img = np.asarray(image, dtype=np.float32)
    whit = whiten_background(img)
    y, x, win = max_occupancy_window(whit, WINDOW_BY_SIZE[subject_attrs["size"]])

    # background: dominant color outside the subject window
    mask = np.ones(img.shape[:2], dtype=bool)
    mask[y : y + win, x : x + win] = False
    q = quantize_to_palette(img)[mask]
    bg_name = _QUANT_NAMES[int(np.bincount(q, minlength=len(_QUANT_NAMES)).argmax())]
    ok_bg = bg_name == scene_attrs["background"]

    # position: window center against the five anchors
    cy, cx = y + win / 2, x + win / 2
    anchors = dat.POSITION_ANCHOR
    pos_name = min(anchors, key=lambda p: (anchors[p][0] - cy) ** 2 + (anchors[p][1] - cx) ** 2)
    ok_pos = pos_name == scene_attrs["position"]

    # size: occupied pixels in-window against the claimed shape's area table
    area = int((~whiteness_mask(whit[y : y + win, x : x + win])).sum())
    shape = subject_attrs["shape"]
    sizes = list(dat.SIZES)
    pred = min(sizes, key=lambda s: abs(expected_area(shape, s) - area))
    ok_size = pred == subject_attrs["size"]

    return (ok_bg + ok_pos + ok_size) / 3.0


def spearman(xs, ys):
    """Spearman rank correlation; 0.0 when either input is constant."""
    from scipy.stats import spearmanr

    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        return 0.0
    rho = spearmanr(xs, ys).statistic
    return 0.0 if np.isnan(rho) else float(rho)


# ---------------------------------------------------------------------------
# Benchmark protocol


@dataclass
class EvalProtocol:
    n_subjects: int = 10
    prompts_per_subject: int = 10
    images_per_pair: int = 4  # fixed by the evaluation protocol
    seed: int = 0


ABLATIONS = ("none", "no_semantic", "no_prefix", "no_content", "no_segmentation")


def benchmark_subjects(manifest, protocol):
    """Held-out-identity subjects with deterministic sizes."""
    test_keys = sorted({tuple(i["identity_key"]) for i in manifest["items"] if i["split"] == "test"})
    if len(test_keys) < protocol.n_subjects:
        raise EvaluationError(
            f"need {protocol.n_subjects} held-out identities, dataset has {len(test_keys)}"
        )
    rng = Rng(protocol.seed).child("bench-subjects")
    order = rng.permutation(len(test_keys))
    subjects = []
    for i in order[: protocol.n_subjects]:
        shape, base, texture, accent = test_keys[int(i)]
        size = dat.SIZES[int(rng.child(f"size{i}").integers(0, len(dat.SIZES)))]
        subjects.append(dat.SubjectSpec(shape, base, texture, accent, size, int(i)))
    return subjects


def reject_train_subjects(manifest, subjects):
    train_keys = {tuple(i["identity_key"]) for i in manifest["items"] if i["split"] == "train"}
    for s in subjects:
        if s.identity_key() in train_keys:
            raise EvaluationError(
                f"benchmark subject {s.identity_key()} appears in the training split"
            )


def _pair_bundle(sampler, subject, prompt, ablation):
    canvas, mask = dat.render_subject(subject)
    reference = segment_subject(canvas, mask)
    if ablation == "no_segmentation":
        raw_scene = dat.render_scene(subject, dat.sample_scene(subject, Rng(subject.seed).child("rawscene")))
        bundle = build_bundle(prompt, raw_scene, sampler.tokenizer, sampler.vocab)
    else:
        bundle = build_bundle(prompt, reference, sampler.tokenizer, sampler.vocab)
    if ablation == "no_semantic":
        bundle.sem_desc = None
    elif ablation == "no_prefix":
        bundle.drop_global = True
    elif ablation == "no_content":
        bundle.content_latent = None
    return bundle, reference


def run_benchmark(sampler, manifest, protocol, scales, ablation="none", subjects=None,
                  temperature=1.0, argmax=False):
    """Generate images_per_pair images per (subject, prompt) pair with
    distinct seeds and aggregate both metrics. Ablation toggles swap single
    conditions for their nulls (or skip segmentation) at request time."""
    if ablation not in ABLATIONS:
        raise EvaluationError(f"unknown ablation {ablation!r}")
    subjects = subjects or benchmark_subjects(manifest, protocol)
    reject_train_subjects(manifest, subjects)

    pairs = []
    for si, subject in enumerate(subjects):
        for pj in range(protocol.prompts_per_subject):
            rng = Rng(protocol.seed).child(f"pair-{si}-{pj}")
            scene = dat.sample_scene(subject, rng)
            pairs.append((si, pj, subject, dat.prompt_of(subject, scene)))

    def eval_pair(pair):
        si, pj, subject, prompt = pair
        bundle, reference = _pair_bundle(sampler, subject, prompt, ablation)
        branches = sampler._branches(bundle, scales, True)
        fids, aligns = [], []
        for n in range(protocol.images_per_pair):
            req = SampleRequest(prompt, None, scales, temperature=temperature,
                                argmax=argmax, seed=protocol.seed * 100003 + si * 1009 + pj * 101 + n)
            images, _ = _generate_with_bundle(sampler, req, branches)
            fids.append(subject_fidelity(images[0], reference, subject.size))
            aligns.append(text_alignment(images[0], prompt))
        return {
            "subject_index": si,
            "prompt_index": pj,
            "identity_key": list(subject.identity_key()),
            "size": subject.size,
            "prompt": prompt,
            "fidelity": fids,
            "alignment": aligns,
        }

    with ThreadPoolExecutor(max_workers=dat.worker_count()) as ex:
        records = list(ex.map(eval_pair, pairs))

    all_f = [f for r in records for f in r["fidelity"]]
    all_a = [a for r in records for a in r["alignment"]]
    return {
        "protocol": protocol.__dict__,
        "scales": {"gamma_t": scales.gamma_t, "gamma_i": scales.gamma_i},
        "ablation": ablation,
        "n_images": len(all_f),
        "fidelity_mean": float(np.mean(all_f)),
        "alignment_mean": float(np.mean(all_a)),
        "pairs": records,
    }


def _generate_with_bundle(sampler, request, branches):
    """Generation with pre-built condition branches (ablation hooks)."""
    q = sampler.tokenizer.quantizer
    nb = len(branches)
    from .sampling import cfg_combine, sample_bits
    from .tokenizer import MultiScaleTokens

    rng = Rng(request.seed).child("image0")
    state = sampler.model.request_state(branches)
    sampler.model.forward_chunk(state, sampler.model.prefix_chunk(state), attend_ref=False)
    h, w = q.schedule[-1]
    recon = np.zeros((h, w, q.d_bits), dtype=np.float32)
    maps = []
    for k, (hk, wk) in enumerate(q.schedule):
        chunk = sampler.model.segment_chunk(k, [recon] * nb)
        hidden = sampler.model.forward_chunk(state, chunk, attend_ref=True)
        logits = sampler.model.chunk_logits(hidden)
        combined = logits[0] if nb == 1 else cfg_combine(logits[0], logits[1], logits[2], request.scales)
        codes = sample_bits(combined, request.temperature, rng.child(f"scale{k}"),
                            request.argmax).reshape(hk, wk, q.d_bits)
        maps.append(codes)
        recon = recon + q.upsample_codes(codes, k)
    image = sampler.tokenizer.decode_image(recon)
    return [image], [{"tokens": MultiScaleTokens(maps, q.schedule)}]


def cfg_sweep(sampler, manifest, gamma_t_grid, gamma_i_grid, protocol, subjects=None,
              temperature=1.0):
    """Metric pair per (gamma_t, gamma_i) grid point, as a plot-ready table."""
    rows = []
    for gt in gamma_t_grid:
        for gi in gamma_i_grid:
            rep = run_benchmark(
                sampler, manifest, protocol, GuidanceScales(gt, gi),
                subjects=subjects, temperature=temperature,
            )
            rows.append({
                "gamma_t": float(gt),
                "gamma_i": float(gi),
                "fidelity": rep["fidelity_mean"],
                "alignment": rep["alignment_mean"],
            })
    return rows


def sweep_table(rows):
    lines = ["gamma_t\tgamma_i\tfidelity\talignment"]
    for r in rows:
        lines.append(f"{r['gamma_t']:g}\t{r['gamma_i']:g}\t{r['fidelity']:.6f}\t{r['alignment']:.6f}")
    return "\n".join(lines) + "\n"


def noise_alignment_baseline(n_images, seed=0):
    """Measured chance level of the attribute checker on uniform noise."""
    rng = Rng(seed).child("noise-baseline")
    subject = dat.SubjectSpec("circle", "red", "solid", "red", "medium")
    scores = []
    for i in range(n_images):
        scene = dat.sample_scene(subject, rng.child(f"scene{i}"))
        prompt = dat.prompt_of(subject, scene)
        img = rng.child(f"img{i}").uniform((64, 64, 3)).astype(np.float32)
        scores.append(text_alignment(img, prompt))
    return float(np.mean(scores))
