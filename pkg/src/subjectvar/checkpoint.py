"""Flat binary checkpoint format.

One file: magic, format version, a canonical-JSON manifest (config, phase
tag, parent hash, tensor directory with dtype/shape/offset/frozen flags),
then the raw payload of little-endian float32 tensors concatenated in
manifest order. Offsets must exactly tile the payload, and save -> load ->
save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"SVCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, meta):
    """tensors: iterable of (name, float32 array, frozen flag)."""
    directory, chunks, offset = [], [], 0
    for name, arr, frozen in tensors:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        raw = arr.astype("<f4").tobytes()
        directory.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(arr.shape),
                "offset": offset,
                "frozen": bool(frozen),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "tensors": directory, **meta}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(mbytes)))
        f.write(mbytes)
        for raw in chunks:
            f.write(raw)
    return file_hash(path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, mlen = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} != {FORMAT_VERSION}")
    manifest = json.loads(blob[16 : 16 + mlen].decode())
    payload = blob[16 + mlen :]
    expected = 0
    tensors = {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = n * 4
        if entry["offset"] != expected:
            raise CheckpointError(f"{path}: tensor offsets do not tile the payload")
        expected += nbytes
        raw = payload[entry["offset"] : entry["offset"] + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: payload size mismatch")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload size mismatch")
    return manifest, tensors


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Model / tokenizer / train-state adapters


def save_model(path, model, resolved_config, config_hash, parent_hash=None, opt=None,
               train_state=None):
    rows = []
    for name, t in model.params.items():
        rows.append((name, t.data, not model.is_subject_group(name)))
    extra = {}
    if opt is not None:
        for name, _ in opt.named_params:
            rows.append((f"opt.m.{name}", opt.m[name], False))
            rows.append((f"opt.v.{name}", opt.v[name], False))
        extra["opt_step"] = opt.step_count
        extra["opt_lr_overrides"] = sorted(opt.lr_overrides)
    if train_state is not None:
        rows.append((
            "state.loss_history",
            np.asarray(train_state.loss_history, dtype=np.float32),
            False,
        ))
        extra["train_step"] = train_state.step
        extra["rng_state"] = train_state.rng_state
    meta = {
        "kind": "model",
        "phase": model.phase_tag,
        "config": resolved_config,
        "config_hash": config_hash,
        "parent_hash": parent_hash,
        "vocab_hash": model.vocab.content_hash(),
        "extra": extra,
    }
    return save_checkpoint(path, rows, meta)


def load_model(path, expect_kind="model"):
    from .model import ModelConfig, SubjectScaleModel
    from .conditioning import Vocabulary

    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != expect_kind:
        raise CheckpointError(f"{path}: kind {manifest.get('kind')!r}, expected {expect_kind!r}")
    vocab = Vocabulary()
    if manifest["vocab_hash"] != vocab.content_hash():
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch (checkpoint {manifest['vocab_hash']}, "
            f"installed {vocab.content_hash()})"
        )
    mc = manifest["config"]["model"]
    cfg = ModelConfig(
        d_model=mc["d_model"], n_blocks=mc["n_blocks"], n_heads=mc["n_heads"],
        ffn_mult=mc["ffn_mult"], d_bits=mc["d_bits"], d_latent=mc["d_latent"],
        schedule=tuple(tuple(s) for s in mc["schedule"]), max_text=mc["max_text"],
        n_sem=mc["n_sem"], content_grid=mc["content_grid"], beta_init=mc["beta_init"],
        init_std=mc["init_std"], seed=mc["seed"],
    )
    model = SubjectScaleModel(cfg, vocab)
    for name, t in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tuple(tensors[name].shape) != t.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        t.data = tensors[name]
    model.phase_tag = manifest["phase"]
    return model, manifest, tensors


def save_tokenizer(path, tokenizer, resolved_config, config_hash, report=None):
    rows = [(name, t.data, False) for name, t in tokenizer.ae.params.items()]
    rows.append(("quantizer.gains", tokenizer.quantizer.gains, False))
    meta = {
        "kind": "tokenizer",
        "phase": "tokenizer",
        "config": resolved_config,
        "config_hash": config_hash,
        "parent_hash": None,
        "vocab_hash": None,
        "extra": {
            "schedule": [list(s) for s in tokenizer.quantizer.schedule],
            "train_report": report,
        },
    }
    return save_checkpoint(path, rows, meta)


def load_tokenizer(path):
    from .numerics import Rng
    from .tokenizer import Autoencoder, AutoencoderConfig, ImageTokenizer, MultiScaleQuantizer

    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "tokenizer":
        raise CheckpointError(f"{path}: not a tokenizer checkpoint")
    tc = manifest["config"]["tokenizer"]
    cfg = AutoencoderConfig(
        image_size=tc["image_size"], downsample=tc["downsample"], d_latent=tc["d_latent"],
        hidden=tuple(tc["hidden"]), steps=tc["steps"], batch_size=tc["batch_size"],
        lr=tc["lr"], holdout_frac=tc["holdout_frac"], mse_target=tc["mse_target"],
        seed=tc["seed"],
    )
    ae = Autoencoder(cfg, Rng(cfg.seed).child("ae-init"))
    for name, t in ae.params.items():
        t.data = tensors[name]
    schedule = [tuple(s) for s in manifest["extra"]["schedule"]]
    quant = MultiScaleQuantizer(schedule, cfg.d_latent, tensors["quantizer.gains"])
    return ImageTokenizer(ae, quant), manifest
