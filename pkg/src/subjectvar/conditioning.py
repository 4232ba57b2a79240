"""Conditioning signals for a (prompt, reference image) pair.

Four signals feed the generator: token-level text, patch-level semantic
descriptors, one global semantic vector, and the tokenizer's continuous
latent as low-level content. The reference contract is a white-background
subject crop; a deterministic handcrafted patch descriptor stands in for a
pretrained semantic encoder at desk scale.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm

PATCH = 8
DESC_DIM = 12  # mean RGB (3) + 8-bin orientation histogram + occupancy
CONTENT_GRID = 8  # reference downsample 8 on 64px images
WHITE_TOL = 1.5 / 255.0
MAX_PROMPT_TOKENS = 32


class ConditioningError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Reference segmentation


def _nearest_resize(arr, out_size):
    n = arr.shape[0]
    idx = np.minimum((np.arange(out_size) + 0.5) * n / out_size, n - 1).astype(int)
    return arr[idx][:, idx]


def segment_subject(image, mask, out_size=64, return_mask=False):
    """Isolate the subject on a pure white background.

    Keeps subject pixels where the mask is true, paints white elsewhere,
    crops to the mask's bounding box, pads back to square, and resizes with
    nearest-neighbor so every output pixel is either pure white or an
    original subject pixel.
    """
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ConditioningError(
            f"mask shape {mask.shape} does not match image {image.shape[:2]}"
        )
    if not mask.any():
        raise ConditioningError("empty subject mask")
    comp = np.where(mask[..., None], image, np.float32(1.0))
    ys, xs = np.nonzero(mask)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    crop = comp[y0:y1, x0:x1]
    mcrop = mask[y0:y1, x0:x1]
    side = max(crop.shape[0], crop.shape[1])
    py = (side - crop.shape[0]) // 2
    px = (side - crop.shape[1]) // 2
    sq = np.ones((side, side, 3), dtype=np.float32)
    sq[py : py + crop.shape[0], px : px + crop.shape[1]] = crop
    msq = np.zeros((side, side), dtype=bool)
    msq[py : py + crop.shape[0], px : px + crop.shape[1]] = mcrop
    out = _nearest_resize(sq, out_size)
    mout = _nearest_resize(msq, out_size)
    return (out, mout) if return_mask else out


def whiteness_mask(image):
    """Boolean grid of pixels considered pure white."""
    return np.all(np.asarray(image) >= 1.0 - WHITE_TOL, axis=-1)


# ---------------------------------------------------------------------------
# Handcrafted semantic descriptors


def patch_descriptors(image, patch=PATCH):
    """Per-patch 12-dim descriptors: mean RGB, gradient-orientation
    histogram (magnitude-weighted, normalized to sum <= 1), and non-white
    occupancy. Patches are independent, so shuffling patches shuffles rows.
    """
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if h % patch or w % patch:
        raise ConditioningError(f"image {h}x{w} not divisible by patch {patch}")
    ph, pw = h // patch, w // patch
    lum = image @ np.asarray([0.299, 0.587, 0.114], dtype=np.float32)
    occ = ~whiteness_mask(image)
    out = np.zeros((ph * pw, DESC_DIM), dtype=np.float32)
    k = 0
    for i in range(ph):
        for j in range(pw):
            sl = (slice(i * patch, (i + 1) * patch), slice(j * patch, (j + 1) * patch))
            tile = image[sl]
            gy, gx = np.gradient(lum[sl])
            mag = np.sqrt(gy * gy + gx * gx)
            theta = np.arctan2(gy, gx)
            bins = np.clip(((theta + np.pi) / (2 * np.pi) * 8).astype(int), 0, 7)
            hist = np.bincount(bins.reshape(-1), weights=mag.reshape(-1), minlength=8)
            hist = hist / (mag.sum() + 1e-6)
            out[k, :3] = tile.reshape(-1, 3).mean(0)
            out[k, 3:11] = hist
            out[k, 11] = occ[sl].mean()
            k += 1
    return out


def global_descriptor(image, patch=PATCH):
    """Occupancy-weighted mean patch descriptor; zero for blank images."""
    desc = patch_descriptors(image, patch)
    wts = desc[:, 11]
    total = wts.sum()
    if total <= 0:
        return np.zeros(DESC_DIM, dtype=np.float32)
    return (desc * wts[:, None]).sum(0) / total


def extract_content(reference, tokenizer, grid=CONTENT_GRID):
    """Continuous pre-quantization latent of the reference at the content
    grid resolution."""
    latent = tokenizer.ae.encode_np(np.asarray(reference, dtype=np.float32))
    return nm.resize_bilinear_np(latent, (grid, grid))


# ---------------------------------------------------------------------------
# Text


def load_vocab():
    text = importlib.resources.files("subjectvar").joinpath("vocab.txt").read_text()
    return [w for w in text.splitlines() if w]


class Vocabulary:
    def __init__(self, words=None):
        self.words = list(words) if words is not None else load_vocab()
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, prompt):
        """Whitespace tokenization to ids; empty prompts signal the learned
        null embedding with a zero-length id array."""
        toks = prompt.split()
        if len(toks) > MAX_PROMPT_TOKENS:
            raise ConditioningError(
                f"prompt has {len(toks)} tokens, max is {MAX_PROMPT_TOKENS}"
            )
        ids = []
        for t in toks:
            if t not in self.index:
                raise ConditioningError(f"word not in vocabulary: {t!r}")
            ids.append(self.index[t])
        return np.asarray(ids, dtype=np.int64)

    def content_hash(self):
        import hashlib

        return hashlib.sha256("\n".join(self.words).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Bundle


@dataclass
class ConditionBundle:
    """The four conditioning signals; None marks a dropped condition whose
    learned null embedding substitutes downstream."""

    prompt: str = None
    text_ids: np.ndarray = None
    sem_desc: np.ndarray = None  # (N_s, 12); None -> null semantic + null global
    content_latent: np.ndarray = None  # (grid, grid, d_latent); None -> null content
    drop_global: bool = False  # keep c_s but swap the global token for its null

    def copy(self):
        return replace(self)

    def text_null(self):
        return self.text_ids is None or len(self.text_ids) == 0

    def sem_null(self):
        return self.sem_desc is None

    def content_null(self):
        return self.content_latent is None


def build_bundle(prompt, reference, tokenizer, vocab):
    """Full conditioning bundle for a (prompt, white-background reference)
    pair; either side may be None for the corresponding null."""
    text_ids = vocab.encode(prompt) if prompt is not None else None
    sem = content = None
    if reference is not None:
        sem = patch_descriptors(reference)
        content = extract_content(reference, tokenizer)
    return ConditionBundle(prompt, text_ids, sem, content)
