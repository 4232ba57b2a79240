"""Procedural triplet generator: sprite subjects, composed scenes, and a
closed prompt grammar that parses back to the generating attributes.

Subjects are parametric sprites (shape, base color, texture, accent), so
identity is formally defined and the train/test split can hold out whole
identities for zero-shot evaluation.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .numerics import Rng

IMAGE_SIZE = 64
REF_RADIUS = 24

SHAPES = ("circle", "square", "triangle", "star", "cross", "ring")
TEXTURES = ("solid", "stripes", "dots", "checker")
TEXTURE_ADJ = {"solid": "solid", "stripes": "striped", "dots": "dotted", "checker": "checkered"}
ADJ_TEXTURE = {v: k for k, v in TEXTURE_ADJ.items()}
SIZES = ("small", "medium", "large")
SIZE_RADIUS = {"small": 7, "medium": 11, "large": 15}
POSITIONS = ("center", "top-left", "top-right", "bottom-left", "bottom-right")
POSITION_ANCHOR = {
    "center": (32, 32),
    "top-left": (16, 16),
    "top-right": (16, 48),
    "bottom-left": (48, 16),
    "bottom-right": (48, 48),
}
ROTATIONS = (0, 90, 180, 270)

PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "orange": (0.95, 0.55, 0.05),
    "purple": (0.50, 0.10, 0.60),
    "cyan": (0.05, 0.75, 0.80),
    "magenta": (0.85, 0.15, 0.65),
}
PALETTE_NAMES = tuple(PALETTE)

DELIMITER = " ; "
DISTRACTOR_RADIUS = 3


class DataError(ValueError):
    pass


class PromptError(ValueError):
    """Grammar rejection carrying the 1-based offending token position."""

    def __init__(self, msg, token_index):
        super().__init__(f"{msg} (token {token_index + 1})")
        self.token_index = token_index + 1


@dataclass(frozen=True)
class SubjectSpec:
    shape: str
    base: str
    texture: str
    accent: str
    size: str
    seed: int = 0

    def identity_key(self):
        return (self.shape, self.base, self.texture, self.accent)


@dataclass(frozen=True)
class SceneSpec:
    background: str
    style: str  # flat | gradient
    position: str
    rotation: int
    distractors: tuple = ()  # ((shape, base, position), ...)


@dataclass
class Triplet:
    prompt: str
    reference: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    subject: SubjectSpec
    scene: SceneSpec


# ---------------------------------------------------------------------------
# Sprite rasterization


def _inside(shape, dy, dx, r):
    rho2 = dy * dy + dx * dx
    if shape == "circle":
        return rho2 <= r * r
    if shape == "square":
        s = 0.82 * r
        return np.maximum(np.abs(dy), np.abs(dx)) <= s
    if shape == "triangle":
        ay, ax = -r, 0.0
        by, bx = r / 2, -np.sqrt(3) / 2 * r
        cy, cx = r / 2, np.sqrt(3) / 2 * r
        d1 = (dx - bx) * (ay - by) - (ax - bx) * (dy - by)
        d2 = (dx - cx) * (by - cy) - (bx - cx) * (dy - cy)
        d3 = (dx - ax) * (cy - ay) - (cx - ax) * (dy - ay)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    if shape == "star":
        theta = np.arctan2(dx, -dy) % (2 * np.pi)
        phase = (theta * 5 / (2 * np.pi)) % 1.0
        spike = 1.0 - 2.0 * np.abs(phase - 0.5)  # 1 at point centers, 0 at valleys
        radius = 0.45 * r + 0.55 * r * spike
        return rho2 <= radius * radius
    if shape == "cross":
        arm = 0.33 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if shape == "ring":
        return (rho2 <= r * r) & (rho2 >= (0.55 * r) ** 2)
    raise DataError(f"unknown shape {shape!r}")


def _texture_accent(texture, dy, dx, r):
    """True where the accent color paints, in sprite-local coordinates."""
    if texture == "solid":
        return np.zeros_like(dy, dtype=bool)
    u = (dy + r).astype(np.int64)
    v = (dx + r).astype(np.int64)
    if texture == "stripes":
        return (v // 4) % 2 == 1  # 4-px bands
    if texture == "dots":
        return ((u % 6 == 2) | (u % 6 == 3)) & ((v % 6 == 2) | (v % 6 == 3))
    if texture == "checker":
        return ((u // 4) + (v // 4)) % 2 == 1
    raise DataError(f"unknown texture {texture!r}")


_ROT_MAPS = {
    0: lambda dy, dx: (dy, dx),
    1: lambda dy, dx: (dx, -dy),
    2: lambda dy, dx: (-dy, -dx),
    3: lambda dy, dx: (-dx, dy),
}


def draw_sprite(canvas, shape, base, texture, accent, radius, center, rotation=0):
    """Rasterize a sprite onto canvas in place; returns its boolean mask.

    Rotation is in exact 90-degree steps applied by coordinate transform, so
    the result matches np.rot90 of the unrotated sprite patch bit for bit.
    """
    cy, cx = center
    ys, xs = np.mgrid[0 : canvas.shape[0], 0 : canvas.shape[1]]
    dy = (ys - cy).astype(np.float64)
    dx = (xs - cx).astype(np.float64)
    ldy, ldx = _ROT_MAPS[rotation % 4 if rotation < 4 else (rotation // 90) % 4](dy, dx)
    mask = _inside(shape, ldy, ldx, float(radius))
    acc = _texture_accent(texture, ldy, ldx, int(radius)) & mask
    canvas[mask] = PALETTE[base]
    canvas[acc] = PALETTE[accent]
    return mask


def render_subject(spec, size_px=IMAGE_SIZE, radius=REF_RADIUS):
    """Deterministic sprite on a white canvas plus its exact mask."""
    canvas = np.ones((size_px, size_px, 3), dtype=np.float32)
    c = size_px // 2
    mask = draw_sprite(
        canvas, spec.shape, spec.base, spec.texture, spec.accent, radius, (c, c), 0
    )
    return canvas, mask


def render_scene(subject, scene, size_px=IMAGE_SIZE):
    """Subject composited at position/rotation over the background, with any
    distractors drawn behind it."""
    bg = np.asarray(PALETTE[scene.background], dtype=np.float32)
    canvas = np.broadcast_to(bg, (size_px, size_px, 3)).copy()
    if scene.style == "gradient":
        fade = np.linspace(1.0, 0.85, size_px, dtype=np.float32)[:, None, None]
        canvas = canvas * fade
    for shape, base, position in scene.distractors:
        draw_sprite(canvas, shape, base, "solid", base, DISTRACTOR_RADIUS,
                    POSITION_ANCHOR[position], 0)
    rot_k = ROTATIONS.index(scene.rotation)
    draw_sprite(
        canvas,
        subject.shape,
        subject.base,
        subject.texture,
        subject.accent,
        SIZE_RADIUS[subject.size],
        POSITION_ANCHOR[scene.position],
        rot_k,
    )
    return canvas


# ---------------------------------------------------------------------------
# Prompt grammar


def prompt_of(subject, scene):
    parts = [f"a {subject.size} {subject.base} {TEXTURE_ADJ[subject.texture]} {subject.shape}"]
    if subject.texture != "solid":
        parts.append(f"with {subject.accent} accents")
    parts.append(f"on a {scene.background} background")
    clause1 = " ".join(parts)
    return DELIMITER.join([clause1, scene.position, f"rotated {scene.rotation}"])


def parse_prompt(prompt):
    """Exact inverse of prompt_of on generated prompts; rejects anything
    outside the grammar with the offending token position."""
    toks = prompt.split()
    i = 0

    def expect(word):
        nonlocal i
        if i >= len(toks) or toks[i] != word:
            got = toks[i] if i < len(toks) else "<end>"
            raise PromptError(f"expected {word!r}, got {got!r}", i)
        i += 1

    def take(options, what):
        nonlocal i
        if i >= len(toks) or toks[i] not in options:
            got = toks[i] if i < len(toks) else "<end>"
            raise PromptError(f"expected {what}, got {got!r}", i)
        i += 1
        return toks[i - 1]

    expect("a")
    size = take(SIZES, "size")
    base = take(PALETTE_NAMES, "color")
    texture = ADJ_TEXTURE[take(tuple(ADJ_TEXTURE), "texture")]
    shape = take(SHAPES, "shape")
    accent = base
    if i < len(toks) and toks[i] == "with":
        i += 1
        accent = take(PALETTE_NAMES, "accent color")
        expect("accents")
    expect("on")
    expect("a")
    background = take(PALETTE_NAMES, "background color")
    expect("background")
    expect(";")
    position = take(POSITIONS, "position")
    expect(";")
    expect("rotated")
    rotation = int(take(tuple(str(r) for r in ROTATIONS), "rotation"))
    if i != len(toks):
        raise PromptError(f"trailing token {toks[i]!r}", i)
    subject_attrs = {
        "shape": shape, "base": base, "texture": texture, "accent": accent, "size": size,
    }
    scene_attrs = {"background": background, "position": position, "rotation": rotation}
    return subject_attrs, scene_attrs


def grammar_hash():
    from .conditioning import load_vocab

    payload = "|".join(load_vocab()) + "::" + DELIMITER
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Sampling specs and triplets


def all_identity_keys():
    keys = []
    for shape in SHAPES:
        for base in PALETTE_NAMES:
            for texture in TEXTURES:
                if texture == "solid":
                    keys.append((shape, base, "solid", base))
                else:
                    keys.extend(
                        (shape, base, texture, acc) for acc in PALETTE_NAMES if acc != base
                    )
    return keys


def split_identities(seed, test_frac=0.15):
    keys = all_identity_keys()
    order = Rng(seed).child("identity-split").permutation(len(keys))
    n_test = max(1, int(len(keys) * test_frac))
    test = [keys[i] for i in order[:n_test]]
    train = [keys[i] for i in order[n_test:]]
    return train, test


def sample_subject(pool, rng, seed=0):
    shape, base, texture, accent = pool[int(rng.integers(0, len(pool)))]
    size = SIZES[int(rng.integers(0, len(SIZES)))]
    return SubjectSpec(shape, base, texture, accent, size, seed)


def sample_scene(subject, rng):
    # the background may not share the subject's base or accent color, or
    # textured sprites would partially camouflage
    bg_options = [c for c in PALETTE_NAMES if c not in (subject.base, subject.accent)]
    background = bg_options[int(rng.integers(0, len(bg_options)))]
    style = "gradient" if rng.bernoulli(0.3) else "flat"
    position = POSITIONS[int(rng.integers(0, len(POSITIONS)))]
    rotation = ROTATIONS[int(rng.integers(0, len(ROTATIONS)))]
    n_d = int(rng.integers(0, 3))
    open_slots = [p for p in POSITIONS if p != position]
    slot_idx = rng.choice(len(open_slots), min(n_d, len(open_slots)), replace=False)
    distractors = []
    for si in np.atleast_1d(slot_idx)[:n_d]:
        dshape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        dbase_opts = [c for c in PALETTE_NAMES if c not in (background, subject.base)]
        dbase = dbase_opts[int(rng.integers(0, len(dbase_opts)))]
        if (dshape, dbase) == (subject.shape, subject.base):
            dshape = SHAPES[(SHAPES.index(dshape) + 1) % len(SHAPES)]
        distractors.append((dshape, dbase, open_slots[int(si)]))
    return SceneSpec(background, style, position, rotation, tuple(distractors))


def make_triplet(subject, scene):
    from .conditioning import segment_subject

    canvas, mask = render_subject(subject)
    reference, ref_mask = segment_subject(canvas, mask, return_mask=True)
    target = render_scene(subject, scene)
    return Triplet(prompt_of(subject, scene), reference, target, ref_mask, subject, scene)


# ---------------------------------------------------------------------------
# Disk layout


def _to_png(path, arr):
    if arr.dtype == bool:
        img = Image.fromarray((arr * 255).astype(np.uint8), mode="L")
    else:
        img = Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="RGB")
    img.save(path, format="PNG")


def load_png(path):
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        return arr > 127
    return (arr[..., :3] / 255.0).astype(np.float32)


def worker_count():
    cap = os.environ.get("ECHO_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def gen_dataset(n, seed, out_dir, split=(0.9, 0.1), test_identity_frac=0.15):
    """Write n triplets under out_dir/{train,test}/NNNNNN/, deterministic by
    (n, seed); held-out identities never appear in the train split."""
    if n < 1:
        raise DataError("n must be >= 1")
    train_pool, test_pool = split_identities(seed, test_identity_frac)
    n_train = int(round(n * split[0]))
    n_test = n - n_train
    jobs = [("train", i, train_pool) for i in range(n_train)]
    jobs += [("test", i, test_pool) for i in range(n_test)]

    os.makedirs(out_dir, exist_ok=True)
    records = [None] * len(jobs)

    def build(j):
        split_name, idx, pool = jobs[j]
        rng = Rng(seed).child(f"{split_name}-{idx}")
        subject = sample_subject(pool, rng.child("subject"), seed=idx)
        scene = sample_scene(subject, rng.child("scene"))
        trip = make_triplet(subject, scene)
        d = os.path.join(out_dir, split_name, f"{idx:06d}")
        try:
            os.makedirs(d, exist_ok=True)
            _to_png(os.path.join(d, "ref.png"), trip.reference)
            _to_png(os.path.join(d, "target.png"), trip.target)
            _to_png(os.path.join(d, "mask.png"), trip.mask)
            meta = {
                "prompt": trip.prompt,
                "subject": asdict(trip.subject),
                "scene": {**asdict(trip.scene), "distractors": list(map(list, trip.scene.distractors))},
            }
            with open(os.path.join(d, "meta.json"), "w") as f:
                json.dump(meta, f, sort_keys=True, indent=1)
        except OSError as e:
            raise DataError(f"failed writing triplet under {d}: {e}") from e
        records[j] = {
            "id": f"{split_name}/{idx:06d}",
            "split": split_name,
            "identity_key": list(subject.identity_key()),
            "prompt": trip.prompt,
        }

    with ThreadPoolExecutor(max_workers=worker_count()) as ex:
        list(ex.map(build, range(len(jobs))))

    manifest = {
        "n": n,
        "seed": seed,
        "split": list(split),
        "counts": {"train": n_train, "test": n_test},
        "grammar_hash": grammar_hash(),
        "items": records,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return manifest


def load_manifest(root):
    with open(os.path.join(root, "manifest.json")) as f:
        return json.load(f)


def load_triplet(root, item_id):
    d = os.path.join(root, item_id)
    with open(os.path.join(d, "meta.json")) as f:
        meta = json.load(f)
    subject = SubjectSpec(**meta["subject"])
    scene = SceneSpec(**{**meta["scene"], "distractors": tuple(map(tuple, meta["scene"]["distractors"]))})
    return Triplet(
        meta["prompt"],
        load_png(os.path.join(d, "ref.png")),
        load_png(os.path.join(d, "target.png")),
        load_png(os.path.join(d, "mask.png")),
        subject,
        scene,
    )


def iter_split(root, split):
    manifest = load_manifest(root)
    for item in manifest["items"]:
        if item["split"] == split:
            yield load_triplet(root, item["id"])
