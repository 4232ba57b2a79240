"""Next-scale transformer with dual-path subject injection.

Sequence layout: [global-condition slot C, start token S | one segment per
scale | reference tokens in key/value space]. Each block applies, in order,
conditioned layer norm -> masked multi-modal attention over
[generated || reference] -> decoupled cross-attention over
[semantic || text] keys -> feed-forward, with a parallel feed-forward on
the reference stream. The admissibility mask is block-causal over scales,
gives generated rows unobstructed access to reference columns, and keeps
reference rows blind to everything but themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import LARGE_NEG, ParamStore, Rng, Tensor, no_grad
from .conditioning import DESC_DIM, Vocabulary


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_blocks: int = 6
    n_heads: int = 4
    ffn_mult: int = 4
    d_bits: int = 16
    d_latent: int = 16
    schedule: tuple = ((1, 1), (2, 2), (4, 4), (8, 8), (16, 16))
    max_text: int = 32
    n_sem: int = 64
    content_grid: int = 8
    beta_init: float = -8.0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.n_heads}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def n_content(self):
        return self.content_grid * self.content_grid


# ---------------------------------------------------------------------------
# Layout and mask


@dataclass(frozen=True)
class SequenceLayout:
    schedule: tuple
    n_ref: int
    prefix_len: int = 2

    @property
    def seg_lens(self):
        return [h * w for h, w in self.schedule]

    @property
    def seg_offsets(self):
        offs, pos = [], self.prefix_len
        for n in self.seg_lens:
            offs.append(pos)
            pos += n
        return offs

    @property
    def gen_len(self):
        return self.prefix_len + sum(self.seg_lens)

    @property
    def total_len(self):
        return self.gen_len + self.n_ref

    def seg_slice(self, k):
        off = self.seg_offsets[k]
        return slice(off, off + self.seg_lens[k])


def build_layout(schedule, n_ref):
    return SequenceLayout(tuple(tuple(s) for s in schedule), int(n_ref))


def build_mask(layout):
    """Boolean admissibility matrix over [prefix | scale segments | reference].

    (a) generated rows are block-causal over scales, bidirectional within a
    scale; (b) every generated row sees every reference column; (c) reference
    rows see only reference columns; (d) prefix rows see the prefix only.
    """
    L, G, P = layout.total_len, layout.gen_len, layout.prefix_len
    m = np.zeros((L, L), dtype=bool)
    m[:P, :P] = True
    for k in range(len(layout.schedule)):
        rows = layout.seg_slice(k)
        m[rows, :P] = True
        for j in range(k + 1):
            m[rows, layout.seg_slice(j)] = True
        m[rows, G:] = True
    m[G:, G:] = True
    return m


def additive_mask(bool_mask, dtype=np.float32):
    return np.where(bool_mask, np.asarray(0, dtype), np.asarray(LARGE_NEG, dtype))


# ---------------------------------------------------------------------------
# Functional pieces (operate on pre-normalized streams)


def split_heads(x, n_heads):
    B, L, d = x.data.shape
    return nm.transpose(nm.reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x):
    B, H, L, dh = x.data.shape
    return nm.reshape(nm.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def attention(q, k, v, n_heads, bias=None):
    """Multi-head scaled dot-product attention with an optional additive
    logit bias (mask and gate terms enter through `bias`)."""
    dh = q.data.shape[-1] // n_heads
    qh, kh, vh = (split_heads(t, n_heads) for t in (q, k, v))
    scores = nm.mul(nm.matmul(qh, nm.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if bias is not None:
        scores = nm.add(scores, bias)
    return merge_heads(nm.matmul(nm.softmax(scores), vh))


def linear(x, w, b=None):
    out = nm.matmul(x, w)
    return nm.add(out, b) if b is not None else out


def mm_attention(xn, cn, w, n_heads, beta_c, mask_bias, ref_indicator):
    """Joint attention over [generated || reference] with separate
    projectors per stream; returns the pre-residual update for each stream.

    beta_c (a learned scalar) is added to every generated-row ->
    reference-column logit via `ref_indicator`.
    """
    n_gen = xn.data.shape[1]
    q = nm.concat([linear(xn, w["wq"], w["bq"]), linear(cn, w["wq_c"], w["bq_c"])], 1)
    k = nm.concat([linear(xn, w["wk"], w["bk"]), linear(cn, w["wk_c"], w["bk_c"])], 1)
    v = nm.concat([linear(xn, w["wv"], w["bv"]), linear(cn, w["wv_c"], w["bv_c"])], 1)
    bias = nm.add(Tensor(mask_bias), nm.mul(beta_c, Tensor(ref_indicator)))
    out = attention(q, k, v, n_heads, bias)
    joint = linear(out, w["wo"], w["bo"])
    return joint[:, :n_gen, :], joint[:, n_gen:, :]


def decoupled_cross_attention(xn, c_s, c_t, w, n_heads, beta_s, key_bias, sem_indicator):
    """Cross-attention whose keys/values concatenate the independently
    projected semantic and text streams; beta_s gates the semantic keys."""
    if c_s.data.shape[1] + c_t.data.shape[1] == 0:
        raise ModelError("decoupled cross-attention: empty joint key set")
    q = linear(xn, w["wq_ca"], w["bq_ca"])
    k = nm.concat([linear(c_s, w["wk_s"], w["bk_s"]), linear(c_t, w["wk_t"], w["bk_t"])], 1)
    v = nm.concat([linear(c_s, w["wv_s"], w["bv_s"]), linear(c_t, w["wv_t"], w["bv_t"])], 1)
    bias = nm.add(Tensor(key_bias), nm.mul(beta_s, Tensor(sem_indicator)))
    return attention(q, k, v, n_heads, bias)


def adaln_params(cond, w):
    """Per-site (gamma, beta) triplets from the conditioning vector; the
    final layer is zero-initialized so this starts as plain layer norm."""
    h = nm.gelu(linear(cond, w["w1"], w["b1"]))
    gb = linear(h, w["w2"], w["b2"])  # (B, 6d)
    d = w["w1"].data.shape[0]
    chunks = [gb[:, i * d : (i + 1) * d] for i in range(6)]
    return [(chunks[2 * i], chunks[2 * i + 1]) for i in range(3)]


def adaln_apply(x, gamma, beta):
    B, d = gamma.data.shape
    g = nm.reshape(gamma, (B, 1, d))
    b = nm.reshape(beta, (B, 1, d))
    xn = nm.layernorm(x)
    return nm.add(nm.mul(xn, nm.add(g, 1.0)), b)


def ffn(x, w, prefix):
    h = nm.gelu(linear(x, w[f"{prefix}w1"], w[f"{prefix}b1"]))
    return linear(h, w[f"{prefix}w2"], w[f"{prefix}b2"])


def layernorm_affine(x, g, b):
    return nm.add(nm.mul(nm.layernorm(x), g), b)


# ---------------------------------------------------------------------------
# Model


SUBJECT_TAGS = (".attn_c.", ".ffn_c.", ".ln_c", ".beta_s", ".beta_c", ".ca.wk_s",
                ".ca.wv_s", ".ca.bk_s", ".ca.bv_s")
SUBJECT_PREFIXES = ("cond.sem_proj", "cond.glob_proj", "cond.content_proj",
                    "cond.content_pos", "cond.null_")
CONTENT_TAGS = (".attn_c.", ".ffn_c.", ".ln_c", ".beta_c")
CONTENT_PREFIXES = ("cond.content_proj", "cond.content_pos", "cond.null_c")


class SubjectScaleModel:
    """Owns all transformer and condition-embedding parameters, the
    frozen/trainable partition, and both forward modes."""

    def __init__(self, config, vocab=None, dtype=np.float32):
        self.config = config
        self.vocab = vocab or Vocabulary()
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        self.phase_tag = "init"
        self._build(Rng(config.seed).child("model-init"))

    # -- construction -------------------------------------------------------

    def _add(self, name, arr):
        return self.params.add(name, np.asarray(arr, dtype=self.dtype))

    def _build(self, rng):
        cfg = self.config
        d = cfg.d_model
        std = cfg.init_std
        self._add("cond.text.table", rng.normal((len(self.vocab), d), std))
        self._add("cond.text.pos", rng.normal((cfg.max_text, d), std))
        self._add("cond.null_t", np.zeros((1, d)))
        self._add("cond.null_s", np.zeros((1, d)))
        self._add("cond.null_C", np.zeros(d))
        self._add("cond.null_c", np.zeros((1, d)))
        self._add("cond.sem_proj.w", rng.normal((DESC_DIM, d), std))
        self._add("cond.sem_proj.b", np.zeros(d))
        self._add("cond.glob_proj.w", rng.normal((DESC_DIM, d), std))
        self._add("cond.glob_proj.b", np.zeros(d))
        self._add("cond.content_proj.w", rng.normal((cfg.d_latent, d), std))
        self._add("cond.content_proj.b", np.zeros(d))
        self._add("cond.content_pos", rng.normal((cfg.n_content, d), std))

        self._add("model.start", rng.normal((d,), std))
        self._add("model.word_proj.w", rng.normal((cfg.d_latent, d), std))
        self._add("model.word_proj.b", np.zeros(d))
        self._add("model.scale_emb", rng.normal((len(cfg.schedule), d), std))
        n_pos = sum(h * w for h, w in cfg.schedule)
        self._add("model.pos2d", rng.normal((n_pos, d), std))

        for i in range(cfg.n_blocks):
            p = f"blocks.{i}"
            self._add(f"{p}.adaln.w1", rng.normal((d, d), std))
            self._add(f"{p}.adaln.b1", np.zeros(d))
            self._add(f"{p}.adaln.w2", np.zeros((d, 6 * d)))
            self._add(f"{p}.adaln.b2", np.zeros(6 * d))
            for nm_ in ("wq", "wk", "wv", "wo"):
                self._add(f"{p}.attn.{nm_}", rng.normal((d, d), std))
                self._add(f"{p}.attn.{nm_.replace('w', 'b')}", np.zeros(d))
            for nm_ in ("wq", "wk", "wv"):
                self._add(f"{p}.attn_c.{nm_}", rng.normal((d, d), std))
                self._add(f"{p}.attn_c.{nm_.replace('w', 'b')}", np.zeros(d))
            self._add(f"{p}.ln_c1.g", np.ones(d))
            self._add(f"{p}.ln_c1.b", np.zeros(d))
            self._add(f"{p}.ln_c2.g", np.ones(d))
            self._add(f"{p}.ln_c2.b", np.zeros(d))
            self._add(f"{p}.ca.wq", rng.normal((d, d), std))
            self._add(f"{p}.ca.bq", np.zeros(d))
            for stream in ("t", "s"):
                self._add(f"{p}.ca.wk_{stream}", rng.normal((d, d), std))
                self._add(f"{p}.ca.bk_{stream}", np.zeros(d))
                self._add(f"{p}.ca.wv_{stream}", rng.normal((d, d), std))
                self._add(f"{p}.ca.bv_{stream}", np.zeros(d))
            self._add(f"{p}.beta_s", np.asarray(cfg.beta_init))
            self._add(f"{p}.beta_c", np.asarray(cfg.beta_init))
            self._add(f"{p}.ffn.w1", rng.normal((d, cfg.ffn_mult * d), std))
            self._add(f"{p}.ffn.b1", np.zeros(cfg.ffn_mult * d))
            self._add(f"{p}.ffn.w2", rng.normal((cfg.ffn_mult * d, d), std))
            self._add(f"{p}.ffn.b2", np.zeros(d))
            self._add(f"{p}.ffn_c.w1", rng.normal((d, cfg.ffn_mult * d), std))
            self._add(f"{p}.ffn_c.b1", np.zeros(cfg.ffn_mult * d))
            self._add(f"{p}.ffn_c.w2", rng.normal((cfg.ffn_mult * d, d), std))
            self._add(f"{p}.ffn_c.b2", np.zeros(d))

        self._add("head.w", np.zeros((d, cfg.d_bits)))
        self._add("head.b", np.zeros(cfg.d_bits))

    def block_weights(self, i):
        p = self.params
        pre = f"blocks.{i}"
        w = {}
        for nm_ in ("wq", "wk", "wv", "wo"):
            w[nm_] = p[f"{pre}.attn.{nm_}"]
            w[nm_.replace("w", "b")] = p[f"{pre}.attn.{nm_.replace('w', 'b')}"]
        for nm_ in ("wq", "wk", "wv"):
            w[f"{nm_}_c"] = p[f"{pre}.attn_c.{nm_}"]
            w[f"{nm_.replace('w', 'b')}_c"] = p[f"{pre}.attn_c.{nm_.replace('w', 'b')}"]
        w["wq_ca"] = p[f"{pre}.ca.wq"]
        w["bq_ca"] = p[f"{pre}.ca.bq"]
        for stream in ("t", "s"):
            for nm_ in ("wk", "wv"):
                w[f"{nm_}_{stream}"] = p[f"{pre}.ca.{nm_}_{stream}"]
                w[f"{nm_.replace('w', 'b')}_{stream}"] = p[f"{pre}.ca.{nm_.replace('w', 'b')}_{stream}"]
        for site in ("w1", "b1", "w2", "b2"):
            w[site] = p[f"{pre}.adaln.{site}"]
            w[f"ffn.{site}"] = p[f"{pre}.ffn.{site}"]
            w[f"ffn_c.{site}"] = p[f"{pre}.ffn_c.{site}"]
        for ln in ("ln_c1", "ln_c2"):
            w[f"{ln}.g"] = p[f"{pre}.{ln}.g"]
            w[f"{ln}.b"] = p[f"{pre}.{ln}.b"]
        w["beta_s"] = p[f"{pre}.beta_s"]
        w["beta_c"] = p[f"{pre}.beta_c"]
        return w

    # -- partition ----------------------------------------------------------

    def is_subject_group(self, name):
        return any(t in name for t in SUBJECT_TAGS) or name.startswith(SUBJECT_PREFIXES)

    def is_content_group(self, name):
        return any(t in name for t in CONTENT_TAGS) or name.startswith(CONTENT_PREFIXES)

    def partition(self):
        """(frozen, trainable) parameter names for the subject-tuning phase."""
        trainable = [n for n in self.params.names() if self.is_subject_group(n)]
        frozen = [n for n in self.params.names() if not self.is_subject_group(n)]
        return frozen, trainable

    def phase_params(self, phase):
        if phase == "a":
            return [
                (n, t)
                for n, t in self.params.items()
                if not self.is_subject_group(n) or n == "cond.null_t"
            ]
        if phase == "b":
            return [(n, t) for n, t in self.params.items() if self.is_subject_group(n)]
        raise ModelError(f"unknown phase {phase!r}")

    # -- condition embedding -------------------------------------------------

    def embed_text(self, bundle):
        p = self.params
        if bundle.text_null():
            emb = p["cond.null_t"]
        else:
            ids = np.asarray(bundle.text_ids)
            if len(ids) > self.config.max_text:
                raise ModelError(f"prompt length {len(ids)} exceeds {self.config.max_text}")
            emb = nm.add(nm.embedding(p["cond.text.table"], ids), p["cond.text.pos"][: len(ids)])
        pooled = nm.mean(emb, axis=0)
        return emb, pooled

    def embed_semantic(self, bundle):
        p = self.params
        if bundle.sem_null():
            return p["cond.null_s"], p["cond.null_C"]
        desc = np.asarray(bundle.sem_desc, dtype=self.dtype)
        c_s = linear(Tensor(desc), p["cond.sem_proj.w"], p["cond.sem_proj.b"])
        if getattr(bundle, "drop_global", False):
            return c_s, p["cond.null_C"]
        wts = desc[:, 11:12]
        total = wts.sum()
        glob = (desc * wts).sum(0) / total if total > 0 else np.zeros(DESC_DIM, self.dtype)
        glob2d = Tensor(glob.astype(self.dtype).reshape(1, DESC_DIM))
        c_vec = linear(glob2d, p["cond.glob_proj.w"], p["cond.glob_proj.b"])
        return c_s, nm.reshape(c_vec, (self.config.d_model,))

    def embed_content(self, bundle):
        p = self.params
        if bundle.content_null():
            return p["cond.null_c"]
        lat = np.asarray(bundle.content_latent, dtype=self.dtype).reshape(-1, self.config.d_latent)
        return nm.add(linear(Tensor(lat), p["cond.content_proj.w"], p["cond.content_proj.b"]),
                      p["cond.content_pos"][: lat.shape[0]])

    def embed_bundles(self, bundles):
        """Batch bundles into padded condition tensors plus key masks."""
        d = self.config.d_model
        texts, pooled, sems, cvecs, refs = [], [], [], [], []
        for b in bundles:
            t_emb, t_pool = self.embed_text(b)
            s_emb, c_vec = self.embed_semantic(b)
            r_emb = self.embed_content(b)
            texts.append(t_emb)
            pooled.append(t_pool)
            sems.append(s_emb)
            cvecs.append(c_vec)
            refs.append(r_emb)

        def pad_stack(seqs):
            n_max = max(s.data.shape[0] for s in seqs)
            rows, mask = [], np.zeros((len(seqs), n_max), dtype=bool)
            for i, s in enumerate(seqs):
                n = s.data.shape[0]
                mask[i, :n] = True
                if n < n_max:
                    z = Tensor(np.zeros((n_max - n, s.data.shape[1]), dtype=self.dtype))
                    s = nm.concat([s, z], 0)
                rows.append(nm.reshape(s, (1, n_max, d)))
            return nm.concat(rows, 0), mask

        text, text_mask = pad_stack(texts)
        sem, sem_mask = pad_stack(sems)
        ref, ref_mask = pad_stack(refs)
        pooled_t = nm.concat([nm.reshape(x, (1, d)) for x in pooled], 0)
        cvec_t = nm.concat([nm.reshape(x, (1, d)) for x in cvecs], 0)
        cond = nm.add(cvec_t, pooled_t)
        return {
            "text": text, "text_mask": text_mask,
            "sem": sem, "sem_mask": sem_mask,
            "ref": ref, "ref_mask": ref_mask,
            "cvec": cvec_t, "cond": cond,
        }

    # -- generated-sequence embedding ----------------------------------------

    def seg_meta(self):
        """Scale index and intra-grid position index per segment row."""
        scale_idx, pos_idx = [], []
        pos = 0
        for k, (h, w) in enumerate(self.config.schedule):
            scale_idx.extend([k] * (h * w))
            pos_idx.extend(range(pos, pos + h * w))
            pos += h * w
        return np.asarray(scale_idx), np.asarray(pos_idx)

    def embed_segments(self, recons_batch):
        """Embed per-scale inputs from cumulative reconstructions.

        recons_batch[b][k] is F_hat_k for sample b; scale k's input rows are
        the projection of F_hat_{k-1} resized to that scale's grid (the
        first scale re-uses the learned start token).
        """
        cfg = self.config
        p = self.params
        rows = []
        for recons in recons_batch:
            # segment k's input is the reconstruction through the previous
            # scale: partial list index k holds exactly maps 0..k-1
            pre = [
                nm.resize_bilinear_np(
                    recons[k].astype(self.dtype), cfg.schedule[k]
                ).reshape(-1, cfg.d_latent)
                for k in range(1, len(cfg.schedule))
            ]
            if pre:
                rows.append(np.concatenate(pre, 0))
            else:
                rows.append(np.zeros((0, cfg.d_latent), dtype=self.dtype))
        tail = linear(Tensor(np.stack(rows)), p["model.word_proj.w"], p["model.word_proj.b"])
        B = tail.data.shape[0]
        start = nm.reshape(p["model.start"], (1, 1, cfg.d_model))
        seg1 = nm.concat([start] * B, 0) if B > 1 else start
        segs = nm.concat([seg1, tail], 1)
        scale_idx, pos_idx = self.seg_meta()
        extra = nm.add(
            nm.embedding(p["model.scale_emb"], scale_idx),
            nm.embedding(p["model.pos2d"], pos_idx),
        )
        return nm.add(segs, nm.reshape(extra, (1, len(scale_idx), cfg.d_model)))

    def build_input(self, recons_batch, cond_emb):
        """Full generated sequence: [C slot, S, segments]."""
        d = self.config.d_model
        B = cond_emb["cvec"].data.shape[0]
        c_slot = nm.reshape(cond_emb["cvec"], (B, 1, d))
        s_slot = nm.concat([nm.reshape(self.params["model.start"], (1, 1, d))] * B, 0) \
            if B > 1 else nm.reshape(self.params["model.start"], (1, 1, d))
        segs = self.embed_segments(recons_batch)
        return nm.concat([c_slot, s_slot, segs], 1)

    # -- forward -------------------------------------------------------------

    def _cross_bias(self, n_sem, sem_mask, text_mask):
        B = sem_mask.shape[0]
        key_valid = np.concatenate([sem_mask, text_mask], 1)
        bias = additive_mask(key_valid, self.dtype).reshape(B, 1, 1, -1)
        ind = np.zeros((1, 1, 1, key_valid.shape[1]), dtype=self.dtype)
        ind[..., :n_sem] = 1.0
        return bias, ind

    def _mm_bias(self, layout, ref_mask):
        B = ref_mask.shape[0]
        base = build_mask(layout)
        bias = np.broadcast_to(additive_mask(base, self.dtype), (B, layout.total_len, layout.total_len)).copy()
        for i in range(B):
            bias[i, :, layout.gen_len :][:, ~ref_mask[i]] = LARGE_NEG
        ind = np.zeros((1, 1, layout.total_len, layout.total_len), dtype=self.dtype)
        ind[..., : layout.gen_len, layout.gen_len :] = 1.0
        return bias.reshape(B, 1, layout.total_len, layout.total_len), ind

    def forward_blocks(self, x, c, cond_emb, mm_bias, mm_ind, adaln_cache=None):
        """Run all blocks on generated stream x and reference stream c."""
        cross_bias, cross_ind = self._cross_bias(
            cond_emb["sem"].data.shape[1], cond_emb["sem_mask"], cond_emb["text_mask"]
        )
        for i in range(self.config.n_blocks):
            w = self.block_weights(i)
            sites = (
                adaln_cache[i] if adaln_cache is not None else adaln_params(cond_emb["cond"], w)
            )
            xn = adaln_apply(x, *sites[0])
            cn = layernorm_affine(c, w["ln_c1.g"], w["ln_c1.b"])
            dx, dc = mm_attention(xn, cn, w, self.config.n_heads, w["beta_c"], mm_bias, mm_ind)
            x = nm.add(x, dx)
            c = nm.add(c, dc)
            xn = adaln_apply(x, *sites[1])
            dx = decoupled_cross_attention(
                xn, cond_emb["sem"], cond_emb["text"], w, self.config.n_heads,
                w["beta_s"], cross_bias, cross_ind,
            )
            x = nm.add(x, dx)
            xn = adaln_apply(x, *sites[2])
            x = nm.add(x, ffn(xn, w, "ffn."))
            cn = layernorm_affine(c, w["ln_c2.g"], w["ln_c2.b"])
            c = nm.add(c, ffn(cn, w, "ffn_c."))
        return x, c

    def head_logits(self, x, layout):
        h = nm.layernorm(x[:, layout.prefix_len : layout.gen_len, :])
        return linear(h, self.params["head.w"], self.params["head.b"])

    def forward_teacher(self, in_tokens, bundles, quantizer):
        """Teacher-forced pass over the full layout; logits at scale-k rows
        predict scale-k bits, every scale at once."""
        if len(in_tokens) != len(bundles):
            raise ModelError("tokens/bundles length mismatch")
        for t in in_tokens:
            if [tuple(s) for s in t.schedule] != [tuple(s) for s in self.config.schedule]:
                raise ModelError("token schedule does not match model schedule")
        cond_emb = self.embed_bundles(bundles)
        recons_batch = [quantizer.partial_recons(t) for t in in_tokens]
        x = self.build_input(recons_batch, cond_emb)
        layout = build_layout(self.config.schedule, cond_emb["ref"].data.shape[1])
        mm_bias, mm_ind = self._mm_bias(layout, cond_emb["ref_mask"])
        x, _ = self.forward_blocks(x, cond_emb["ref"], cond_emb, mm_bias, mm_ind)
        return self.head_logits(x, layout)

    # -- incremental (cached) forward ----------------------------------------

    def request_state(self, bundles):
        """Per-request precomputation: condition embeddings, per-block
        conditioned-norm parameters, per-block reference K/V (computed once),
        and empty generated-stream caches."""
        cfg = self.config
        with no_grad():
            cond_emb = self.embed_bundles(bundles)
            B = cond_emb["cvec"].data.shape[0]
            n_ref = cond_emb["ref"].data.shape[1]
            adaln_cache, ca_cache = [], []
            for i in range(cfg.n_blocks):
                w = self.block_weights(i)
                adaln_cache.append(adaln_params(cond_emb["cond"], w))
                ks = nm.concat(
                    [linear(cond_emb["sem"], w["wk_s"], w["bk_s"]),
                     linear(cond_emb["text"], w["wk_t"], w["bk_t"])], 1)
                vs = nm.concat(
                    [linear(cond_emb["sem"], w["wv_s"], w["bv_s"]),
                     linear(cond_emb["text"], w["wv_t"], w["bv_t"])], 1)
                cross_bias, cross_ind = self._cross_bias(
                    cond_emb["sem"].data.shape[1], cond_emb["sem_mask"], cond_emb["text_mask"])
                ca_cache.append(
                    (split_heads(ks, cfg.n_heads).data, split_heads(vs, cfg.n_heads).data,
                     cross_bias + float(w["beta_s"].data) * cross_ind))

            # reference stream pre-pass: rows attend only themselves
            ref_pad = additive_mask(cond_emb["ref_mask"], self.dtype).reshape(B, 1, 1, n_ref)
            ref_kv = []
            c = cond_emb["ref"]
            for i in range(cfg.n_blocks):
                w = self.block_weights(i)
                cn = layernorm_affine(c, w["ln_c1.g"], w["ln_c1.b"])
                kc = linear(cn, w["wk_c"], w["bk_c"])
                vc = linear(cn, w["wv_c"], w["bv_c"])
                qc = linear(cn, w["wq_c"], w["bq_c"])
                ref_kv.append((split_heads(kc, cfg.n_heads).data, split_heads(vc, cfg.n_heads).data))
                dc = attention(qc, kc, vc, cfg.n_heads, Tensor(ref_pad))
                c = nm.add(c, linear(dc, w["wo"], w["bo"]))
                cn = layernorm_affine(c, w["ln_c2.g"], w["ln_c2.b"])
                c = nm.add(c, ffn(cn, w, "ffn_c."))

        return {
            "cond_emb": cond_emb,
            "adaln": adaln_cache,
            "cross": ca_cache,
            "ref_kv": ref_kv,
            "ref_pad": ref_pad,
            "k_gen": [None] * cfg.n_blocks,
            "v_gen": [None] * cfg.n_blocks,
            "committed": 0,
            "forward_passes": 0,
        }

    def forward_chunk(self, state, x_chunk, attend_ref=True):
        """Process a chunk of generated rows against the caches; appends the
        chunk's keys/values so later chunks can attend to it."""
        cfg = self.config
        with no_grad():
            x = Tensor(np.ascontiguousarray(x_chunk, dtype=self.dtype))
            B = x.data.shape[0]
            for i in range(cfg.n_blocks):
                w = self.block_weights(i)
                sites = state["adaln"][i]
                xn = adaln_apply(x, *sites[0])
                q = split_heads(linear(xn, w["wq"], w["bq"]), cfg.n_heads)
                k_new = split_heads(linear(xn, w["wk"], w["bk"]), cfg.n_heads).data
                v_new = split_heads(linear(xn, w["wv"], w["bv"]), cfg.n_heads).data
                k_cat = k_new if state["k_gen"][i] is None else np.concatenate(
                    [state["k_gen"][i], k_new], 2)
                v_cat = v_new if state["v_gen"][i] is None else np.concatenate(
                    [state["v_gen"][i], v_new], 2)
                if attend_ref:
                    rk, rv = state["ref_kv"][i]
                    keys = np.concatenate([k_cat, rk], 2)
                    vals = np.concatenate([v_cat, rv], 2)
                    n_ref = rk.shape[2]
                    bias = np.zeros((B, 1, 1, keys.shape[2]), dtype=self.dtype)
                    bias[..., -n_ref:] = float(w["beta_c"].data) + state["ref_pad"]
                    bias_t = Tensor(bias)
                else:
                    keys, vals, bias_t = k_cat, v_cat, None
                scores = nm.mul(nm.matmul(q, Tensor(np.swapaxes(keys, -1, -2))),
                                1.0 / np.sqrt(cfg.d_head))
                if bias_t is not None:
                    scores = nm.add(scores, bias_t)
                out = merge_heads(nm.matmul(nm.softmax(scores), Tensor(vals)))
                x = nm.add(x, linear(out, w["wo"], w["bo"]))
                state["k_gen"][i] = k_cat
                state["v_gen"][i] = v_cat

                xn = adaln_apply(x, *sites[1])
                ks, vs, cbias = state["cross"][i]
                qc = split_heads(linear(xn, w["wq_ca"], w["bq_ca"]), cfg.n_heads)
                sc = nm.mul(nm.matmul(qc, Tensor(np.swapaxes(ks, -1, -2))), 1.0 / np.sqrt(cfg.d_head))
                sc = nm.add(sc, Tensor(cbias))
                x = nm.add(x, merge_heads(nm.matmul(nm.softmax(sc), Tensor(vs))))

                xn = adaln_apply(x, *sites[2])
                x = nm.add(x, ffn(xn, w, "ffn."))
            state["committed"] += x.data.shape[1]
            state["forward_passes"] += 1
            return x.data

    def chunk_logits(self, hidden):
        with no_grad():
            h = nm.layernorm(Tensor(hidden))
            return linear(h, self.params["head.w"], self.params["head.b"]).data

    def prefix_chunk(self, state):
        """Embedded [C, S] rows for the request."""
        d = self.config.d_model
        cvec = state["cond_emb"]["cvec"].data
        B = cvec.shape[0]
        start = self.params["model.start"].data
        return np.stack([np.stack([cvec[b], start]) for b in range(B)])

    def segment_chunk(self, k, recon_prev_batch):
        """Embedded input rows for scale k from F_hat_{k-1} (batch, np)."""
        cfg = self.config
        with no_grad():
            h, w_ = cfg.schedule[k]
            if k == 0:
                B = len(recon_prev_batch)
                seg = np.broadcast_to(self.params["model.start"].data, (B, 1, cfg.d_model)).copy()
            else:
                pre = np.stack([
                    nm.resize_bilinear_np(r.astype(self.dtype), (h, w_)).reshape(-1, cfg.d_latent)
                    for r in recon_prev_batch
                ])
                seg = linear(Tensor(pre), self.params["model.word_proj.w"],
                             self.params["model.word_proj.b"]).data
            scale_idx, pos_idx = self.seg_meta()
            rows = np.nonzero(scale_idx == k)[0]
            extra = (self.params["model.scale_emb"].data[k]
                     + self.params["model.pos2d"].data[pos_idx[rows]])
            return seg + extra[None]
