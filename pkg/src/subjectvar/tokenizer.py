"""Image tokenizer: conv autoencoder plus bitwise residual multi-scale codes.

The encoder maps a 64x64 RGB image to a latent grid; a residual cascade
then quantizes the latent into K token maps of increasing resolution. Each
token is the sign pattern of its (normalized) residual vector, so a map of
h_k x w_k tokens costs h_k * w_k * d_bits bits. A single calibrated gain
per scale restores residual magnitude at dequantization.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, Rng, Tensor, no_grad


class TokenizerError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Scale schedules


def validate_schedule(schedule, latent_hw):
    """Schedules start at (1,1), end at the latent resolution, and are
    monotone in both axes."""
    if not schedule:
        raise TokenizerError("empty schedule")
    if tuple(schedule[0]) != (1, 1):
        raise TokenizerError(f"schedule must start at (1,1), got {schedule[0]}")
    if tuple(schedule[-1]) != tuple(latent_hw):
        raise TokenizerError(
            f"schedule must end at latent resolution {latent_hw}, got {schedule[-1]}"
        )
    for (h0, w0), (h1, w1) in zip(schedule, schedule[1:]):
        if h1 < h0 or w1 < w0:
            raise TokenizerError(f"schedule not monotone at {(h0, w0)} -> {(h1, w1)}")
    return [tuple(s) for s in schedule]


def default_schedule(latent_side):
    side, sched = 1, [(1, 1)]
    while side < latent_side:
        side *= 2
        sched.append((side, side))
    return sched


# ---------------------------------------------------------------------------
# Bitwise sign quantization


def bsq_quantize(v):
    """Sign-quantize a vector (or an array of vectors along the last axis).

    Returns (codes in {-1,+1}, dequantized = codes / sqrt(d)); sign(0) = +1.
    The dequantized point is the nearest of the 2^d unit-norm sign codewords
    to v / ||v||.
    """
    v = np.asarray(v)
    codes = np.where(v >= 0, 1, -1).astype(np.int8)
    deq = codes.astype(v.dtype if v.dtype.kind == "f" else np.float32)
    deq /= np.sqrt(deq.shape[-1]).astype(deq.dtype)
    return codes, deq


@dataclass
class MultiScaleTokens:
    """Ordered token maps, one (h_k, w_k, d_bits) array of {-1,+1} per scale."""

    maps: list
    schedule: list

    @property
    def d_bits(self):
        return self.maps[0].shape[-1]

    def total_tokens(self):
        return sum(h * w for h, w in self.schedule)

    def flat_bits(self):
        """(total_tokens, d_bits) int8 view in scale-major, row-major order."""
        return np.concatenate([m.reshape(-1, self.d_bits) for m in self.maps], axis=0)

    def copy(self):
        return MultiScaleTokens([m.copy() for m in self.maps], list(self.schedule))


def pack_tokens(tokens):
    """Serialize to header (K, d_bits, schedule) + little-endian packed bits,
    1 bit per entry (+1 -> 1), row-major within a scale, scale-major."""
    buf = io.BytesIO()
    buf.write(b"SVTK")
    buf.write(struct.pack("<HH", len(tokens.schedule), tokens.d_bits))
    for h, w in tokens.schedule:
        buf.write(struct.pack("<HH", h, w))
    bits = (tokens.flat_bits().reshape(-1) > 0).astype(np.uint8)
    buf.write(np.packbits(bits, bitorder="little").tobytes())
    return buf.getvalue()


def unpack_tokens(blob):
    if blob[:4] != b"SVTK":
        raise TokenizerError("bad token blob magic")
    k, d_bits = struct.unpack("<HH", blob[4:8])
    schedule, off = [], 8
    for _ in range(k):
        h, w = struct.unpack("<HH", blob[off : off + 4])
        schedule.append((h, w))
        off += 4
    n = sum(h * w for h, w in schedule) * d_bits
    bits = np.unpackbits(
        np.frombuffer(blob, dtype=np.uint8, offset=off), bitorder="little", count=n
    )
    flat = (bits.astype(np.int8) * 2 - 1).reshape(-1, d_bits)
    maps, pos = [], 0
    for h, w in schedule:
        maps.append(flat[pos : pos + h * w].reshape(h, w, d_bits))
        pos += h * w
    return MultiScaleTokens(maps, schedule)


# ---------------------------------------------------------------------------
# Residual multi-scale quantizer


class MultiScaleQuantizer:
    """Residual cascade of sign-quantized token maps with per-scale gains.

    Per-token magnitudes are not stored; a single gain per scale (fit on a
    calibration set, shrunk for a monotone-descent safety margin) rescales
    the unit-norm codewords at dequantization.
    """

    def __init__(self, schedule, d_bits, gains=None):
        self.schedule = [tuple(s) for s in schedule]
        self.d_bits = int(d_bits)
        if gains is None:
            gains = np.ones(len(schedule), dtype=np.float32)
        self.gains = np.asarray(gains, dtype=np.float32)
        if self.gains.shape != (len(self.schedule),):
            raise TokenizerError("one gain per scale required")

    def encode(self, latent, return_stages=False):
        """latent (h, w, d_bits) -> MultiScaleTokens.

        With return_stages=True also returns the cumulative reconstructions
        [F_hat_0 .. F_hat_K] (F_hat_0 is the zero grid).
        """
        h, w, d = latent.shape
        if d != self.d_bits:
            raise TokenizerError(f"latent channels {d} != d_bits {self.d_bits}")
        validate_schedule(self.schedule, (h, w))
        recon = np.zeros_like(latent)
        stages = [recon.copy()]
        maps = []
        for k, (hk, wk) in enumerate(self.schedule):
            resid = nm.resize_bilinear_np(latent - recon, (hk, wk))
            codes, _ = bsq_quantize(resid)
            maps.append(codes)
            recon = recon + self._upsample_scale(codes, k, (h, w), latent.dtype)
            stages.append(recon.copy())
        tokens = MultiScaleTokens(maps, self.schedule)
        return (tokens, stages) if return_stages else tokens

    def decode(self, tokens):
        """Inverse path; bit-exact with the encoder's internal reconstruction
        (same accumulation order and ops)."""
        h, w = self.schedule[-1]
        recon = np.zeros((h, w, self.d_bits), dtype=np.float32)
        for k, codes in enumerate(tokens.maps):
            if codes.shape[:2] != self.schedule[k]:
                raise TokenizerError(
                    f"scale {k}: token map {codes.shape[:2]} != schedule {self.schedule[k]}"
                )
            recon = recon + self._upsample_scale(codes, k, (h, w), np.float32)
        return recon

    def partial_recons(self, tokens):
        """Cumulative reconstructions [F_hat_0 .. F_hat_K] from codes alone."""
        h, w = self.schedule[-1]
        recon = np.zeros((h, w, self.d_bits), dtype=np.float32)
        out = [recon.copy()]
        for k, codes in enumerate(tokens.maps):
            recon = recon + self._upsample_scale(codes, k, (h, w), np.float32)
            out.append(recon.copy())
        return out

    def _upsample_scale(self, codes, k, full_hw, dtype):
        deq = codes.astype(dtype) / np.asarray(np.sqrt(self.d_bits), dtype=dtype)
        return nm.resize_bilinear_np(deq * self.gains[k].astype(dtype), full_hw)

    def upsample_codes(self, codes, k):
        """Scale-k codes dequantized and resized to the full latent grid;
        the exact accumulation term used by encode/decode."""
        return self._upsample_scale(codes, k, self.schedule[-1], np.float32)

    def calibrate(self, latents, shrink=0.5):
        """Fit per-scale gains as shrunk least-squares optima over a
        calibration batch. The shrink keeps every update a strict descent
        step with high probability, which the monotonicity contract needs."""
        latents = np.asarray(latents, dtype=np.float32)
        h, w = self.schedule[-1]
        recon = np.zeros_like(latents)
        gains = []
        for k, (hk, wk) in enumerate(self.schedule):
            resid = np.stack(
                [nm.resize_bilinear_np(e, (hk, wk)) for e in (latents - recon)]
            )
            codes, deq = bsq_quantize(resid)
            # least-squares shared gain: <R, C>/<C, C> with unit-norm tokens
            opt = float((resid * deq).sum() / max(deq.size / self.d_bits, 1))
            gains.append(max(opt, 1e-6) * shrink)
            self.gains = np.asarray(gains + [1.0] * (len(self.schedule) - k - 1), np.float32)
            recon = recon + np.stack(
                [self._upsample_scale(c, k, (h, w), np.float32) for c in codes]
            )
        self.gains = np.asarray(gains, dtype=np.float32)
        return self.gains


# ---------------------------------------------------------------------------
# Convolutional autoencoder


@dataclass
class AutoencoderConfig:
    image_size: int = 64
    downsample: int = 4
    d_latent: int = 16
    hidden: tuple = (32, 64, 96, 128)  # one entry per stride-2 stage is used
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    holdout_frac: float = 0.1
    mse_target: float = 0.01
    seed: int = 0

    @property
    def latent_side(self):
        if self.image_size % self.downsample:
            raise TokenizerError(
                f"image size {self.image_size} not divisible by downsample {self.downsample}"
            )
        return self.image_size // self.downsample

    @property
    def n_stages(self):
        n = int(np.log2(self.downsample))
        if 2**n != self.downsample:
            raise TokenizerError("downsample must be a power of two")
        return n


class Autoencoder:
    """Small strided conv encoder/decoder trained with plain MSE."""

    def __init__(self, config, rng=None):
        self.config = config
        self.params = ParamStore()
        rng = rng or Rng(config.seed).child("ae-init")
        chans = [3] + list(config.hidden[: config.n_stages])
        for i in range(config.n_stages):
            self._conv_init(rng, f"enc{i}", 3, chans[i], chans[i + 1])
        self._conv_init(rng, "enc_out", 1, chans[-1], config.d_latent)
        self._conv_init(rng, "dec_in", 1, config.d_latent, chans[-1])
        for i in range(config.n_stages):
            cin = chans[config.n_stages - i]
            cout = chans[config.n_stages - i - 1] if i < config.n_stages - 1 else chans[1]
            self._conv_init(rng, f"dec{i}", 3, cin, cout)
        self._conv_init(rng, "dec_out", 3, chans[1], 3)

    def _conv_init(self, rng, name, k, cin, cout):
        std = 1.0 / np.sqrt(k * k * cin)
        self.params.add(f"{name}.w", rng.normal((k, k, cin, cout), std).astype(np.float32))
        self.params.add(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def _conv(self, x, name, stride=1):
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        return nm.conv2d(x, w, b, stride=stride, padding=w.data.shape[0] // 2)

    def encode_t(self, x):
        h = x
        for i in range(self.config.n_stages):
            h = nm.gelu(self._conv(h, f"enc{i}", stride=2))
        return self._conv(h, "enc_out")

    def decode_t(self, z, clamp=True):
        h = nm.gelu(self._conv(z, "dec_in"))
        for i in range(self.config.n_stages):
            h = nm.resize_bilinear(h, (h.data.shape[1] * 2, h.data.shape[2] * 2))
            h = nm.gelu(self._conv(h, f"dec{i}"))
        out = self._conv(h, "dec_out")
        return nm.clip01(out) if clamp else out

    def encode_np(self, images):
        """(B|none, H, W, 3) in [0,1] -> latent grids, no tape."""
        arr, squeeze = _batched(images)
        with no_grad():
            z = self.encode_t(Tensor(arr)).data
        return z[0] if squeeze else z

    def decode_np(self, latents):
        arr, squeeze = _batched(latents)
        with no_grad():
            x = self.decode_t(Tensor(arr)).data
        return x[0] if squeeze else x


def _batched(x):
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        return arr[None], True
    return arr, False


def train_autoencoder(images, config, log_cb=None):
    """Train on (N, H, W, 3) images in [0,1]; returns (Autoencoder, report).

    Deterministic given config.seed. Raises when the dataset is empty or the
    images do not match the configured square resolution.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise TokenizerError("train_autoencoder: empty or malformed dataset")
    s = config.image_size
    if images.shape[1:] != (s, s, 3):
        raise TokenizerError(
            f"train_autoencoder: expected {s}x{s}x3 images, got {images.shape[1:]}"
        )
    rng = Rng(config.seed)
    ae = Autoencoder(config, rng.child("ae-init"))
    n_hold = max(1, int(len(images) * config.holdout_frac)) if len(images) > 1 else 0
    order = rng.child("split").permutation(len(images))
    hold, train = images[order[:n_hold]], images[order[n_hold:]]
    if len(train) == 0:
        train = images[order]

    from .training import Adam  # deferred: training depends on numerics only

    opt = Adam(
        [(n, t) for n, t in ae.params.items()], lr=config.lr, betas=(0.9, 0.97), clip=5.0
    )
    losses = []
    data_rng = rng.child("batches")
    for step in range(config.steps):
        idx = data_rng.integers(0, len(train), (min(config.batch_size, len(train)),))
        batch = Tensor(train[idx])
        out = ae.decode_t(ae.encode_t(batch), clamp=False)
        loss = nm.mean(nm.mul(nm.sub(out, batch), nm.sub(out, batch)))
        ae.params.zero_grads()
        nm.backward(loss)
        opt.step()
        losses.append(loss.item())
        if log_cb and (step % 100 == 0 or step == config.steps - 1):
            log_cb(step, losses[-1])

    holdout_mse = evaluate_ae_mse(ae, hold if n_hold else images)
    report = {
        "steps": config.steps,
        "final_train_mse": losses[-1] if losses else None,
        "holdout_mse": holdout_mse,
        "target": config.mse_target,
        "target_met": bool(holdout_mse <= config.mse_target) if config.steps else False,
    }
    return ae, report


def evaluate_ae_mse(ae, images, batch=32):
    images = np.asarray(images, dtype=np.float32)
    total, n = 0.0, 0
    for i in range(0, len(images), batch):
        chunk = images[i : i + batch]
        rec = ae.decode_np(ae.encode_np(chunk))
        total += float(((rec - chunk) ** 2).sum())
        n += chunk.size
    return total / max(n, 1)


# ---------------------------------------------------------------------------
# Full tokenizer


class ImageTokenizer:
    """Autoencoder + residual quantizer behind one image<->tokens interface."""

    def __init__(self, ae, quantizer):
        self.ae = ae
        self.quantizer = quantizer

    @classmethod
    def build(cls, ae, schedule=None, gains=None):
        cfg = ae.config
        sched = schedule or default_schedule(cfg.latent_side)
        sched = validate_schedule(sched, (cfg.latent_side, cfg.latent_side))
        return cls(ae, MultiScaleQuantizer(sched, cfg.d_latent, gains))

    def calibrate(self, images, shrink=0.5, max_images=256):
        latents = self.ae.encode_np(np.asarray(images[:max_images], dtype=np.float32))
        return self.quantizer.calibrate(latents, shrink=shrink)

    def encode_image(self, image):
        return self.quantizer.encode(self.ae.encode_np(image))

    def decode_tokens(self, tokens):
        return self.decode_image(self.quantizer.decode(tokens))

    def decode_image(self, latent):
        return self.ae.decode_np(latent.astype(np.float32))

    @property
    def schedule(self):
        return self.quantizer.schedule

    @property
    def d_bits(self):
        return self.quantizer.d_bits
