"""Encoder with a CTC head, pinyin-to-character decoder, and CMLM decoder.

All three networks are plain pre-norm transformers built from autodiff
primitives: the encoder consumes frame groups through a strided linear
front end, and both decoders run bidirectional self-attention (no causal
mask) plus cross-attention over the encoder states. The bundle also owns
checkpoint serialization and parameter averaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import read_arrays, write_arrays, ContainerError
from .losses import MaskedSequence
from .vocab import Vocabulary

CTC_ONLY = "ctc_only"
MASK_CTC = "mask_ctc"
MASK_CTC_P2M = "mask_ctc_p2m"
ARCHITECTURES = (CTC_ONLY, MASK_CTC, MASK_CTC_P2M)

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    input_dim: int
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_dim: int = 256
    subsample_factor: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.subsample_factor < 1:
            raise ValueError("subsample_factor must be >= 1")


@dataclass
class DecoderConfig:
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def sinusoid_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    out = np.zeros((length, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


class LayerNorm:
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim))
        self.bias = Tensor(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm_lastdim(x), self.gain), self.bias)

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class MultiHeadAttention:
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Tensor(_glorot(rng, dim, dim))
        self.wk = Tensor(_glorot(rng, dim, dim))
        self.wv = Tensor(_glorot(rng, dim, dim))
        self.wo = Tensor(_glorot(rng, dim, dim))
        self.bq = Tensor(np.zeros(dim))
        self.bk = Tensor(np.zeros(dim))
        self.bv = Tensor(np.zeros(dim))
        self.bo = Tensor(np.zeros(dim))

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        q = ad.add(ad.matmul(q_in, self.wq), self.bq)
        k = ad.add(ad.matmul(kv_in, self.wk), self.bk)
        v = ad.add(ad.matmul(kv_in, self.wv), self.bv)
        inv = 1.0 / math.sqrt(self.head_dim)
        ctx = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = ad.slice_(q, 1, lo, hi)
            kh = ad.slice_(k, 1, lo, hi)
            vh = ad.slice_(v, 1, lo, hi)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv)
            att = ad.softmax_lastdim(scores)
            ctx.append(ad.matmul(att, vh))
        merged = ctx[0] if len(ctx) == 1 else ad.concat(ctx, axis=1)
        return ad.add(ad.matmul(merged, self.wo), self.bo)

    def named_params(self, prefix: str):
        for name in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
            yield f"{prefix}.{name}", getattr(self, name)


class FeedForward:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.w1 = Tensor(_glorot(rng, dim, hidden))
        self.b1 = Tensor(np.zeros(hidden))
        self.w2 = Tensor(_glorot(rng, hidden, dim))
        self.b2 = Tensor(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.gelu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def named_params(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


class _Forward:
    """Per-call forward context: dropout switch and RNG stream."""

    def __init__(self, rate: float, train: bool, rng: np.random.Generator | None):
        self.rate = rate
        self.train = train and rate > 0.0
        self.rng = rng

    def drop(self, x: Tensor) -> Tensor:
        if not self.train:
            return x
        return ad.dropout(x, self.rate, self.rng, train=True)


class EncoderLayer:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, rng)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.ff = FeedForward(cfg.model_dim, cfg.ff_dim, rng)

    def __call__(self, x: Tensor, fwd: _Forward) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, fwd.drop(self.attn(h, h)))
        return ad.add(x, fwd.drop(self.ff(self.ln2(x))))

    def named_params(self, prefix: str):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.ff.named_params(f"{prefix}.ff")


class Encoder:
    """Strided front end, transformer stack, and the CTC projection."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab_size = vocab_size
        f = cfg.subsample_factor
        self.w_front = Tensor(_glorot(rng, f * cfg.input_dim, cfg.model_dim))
        self.b_front = Tensor(np.zeros(cfg.model_dim))
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.ln_f = LayerNorm(cfg.model_dim)
        self.w_ctc = Tensor(_glorot(rng, cfg.model_dim, vocab_size))
        self.b_ctc = Tensor(np.zeros(vocab_size))

    def _group_frames(self, features: np.ndarray) -> np.ndarray:
        f = self.cfg.subsample_factor
        T = features.shape[0]
        if T < f:
            raise ValueError(f"need at least {f} frames, got {T}")
        t_out = -(-T // f)
        padded = np.zeros((t_out * f, features.shape[1]), dtype=np.float64)
        padded[:T] = features
        return padded.reshape(t_out, f * features.shape[1])

    def forward(
        self,
        features: np.ndarray,
        fwd: _Forward,
        w_ctc_override: Tensor | None = None,
    ) -> tuple[Tensor, Tensor]:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.cfg.input_dim:
            raise ValueError(
                f"features must be T x {self.cfg.input_dim}, got {features.shape}"
            )
        x = Tensor(self._group_frames(features))
        x = ad.add(ad.matmul(x, self.w_front), self.b_front)
        x = ad.add(x, Tensor(sinusoid_positions(x.shape[0], self.cfg.model_dim)))
        x = fwd.drop(x)
        for layer in self.layers:
            x = layer(x, fwd)
        hidden = self.ln_f(x)
        w_ctc = self.w_ctc if w_ctc_override is None else w_ctc_override
        logits = ad.add(ad.matmul(hidden, w_ctc), self.b_ctc)
        return hidden, ad.log_softmax_lastdim(logits)

    def named_params(self, prefix: str = "encoder", include_ctc: bool = True):
        yield f"{prefix}.front.w", self.w_front
        yield f"{prefix}.front.b", self.b_front
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layers.{i}")
        yield from self.ln_f.named_params(f"{prefix}.ln_f")
        if include_ctc:
            yield f"{prefix}.ctc.w", self.w_ctc
        yield f"{prefix}.ctc.b", self.b_ctc


class DecoderLayer:
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.model_dim)
        self.self_attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, rng)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.cross_attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, rng)
        self.ln3 = LayerNorm(cfg.model_dim)
        self.ff = FeedForward(cfg.model_dim, cfg.ff_dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, fwd: _Forward) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, fwd.drop(self.self_attn(h, h)))
        x = ad.add(x, fwd.drop(self.cross_attn(self.ln2(x), memory)))
        return ad.add(x, fwd.drop(self.ff(self.ln3(x))))

    def named_params(self, prefix: str):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.self_attn.named_params(f"{prefix}.self_attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.cross_attn.named_params(f"{prefix}.cross_attn")
        yield from self.ln3.named_params(f"{prefix}.ln3")
        yield from self.ff.named_params(f"{prefix}.ff")


class TransformerDecoder:
    """Bidirectional decoder over token ids with cross-attention to the encoder."""

    def __init__(
        self,
        cfg: DecoderConfig,
        in_vocab_size: int,
        out_vocab_size: int,
        rng: np.random.Generator,
    ):
        self.cfg = cfg
        self.in_vocab_size = in_vocab_size
        self.out_vocab_size = out_vocab_size
        self.emb = Tensor(rng.normal(0.0, 0.02, size=(in_vocab_size, cfg.model_dim)))
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.ln_f = LayerNorm(cfg.model_dim)
        self.w_out = Tensor(_glorot(rng, cfg.model_dim, out_vocab_size))
        self.b_out = Tensor(np.zeros(out_vocab_size))

    def forward(
        self,
        ids,
        memory: Tensor,
        fwd: _Forward,
        w_out_override: Tensor | None = None,
    ) -> Tensor:
        ids = list(ids)
        x = ad.embed_lookup(self.emb, ids)
        x = ad.scale(x, math.sqrt(self.cfg.model_dim))
        x = ad.add(x, Tensor(sinusoid_positions(len(ids), self.cfg.model_dim)))
        x = fwd.drop(x)
        for layer in self.layers:
            x = layer(x, memory, fwd)
        h = self.ln_f(x)
        w_out = self.w_out if w_out_override is None else w_out_override
        return ad.add(ad.matmul(h, w_out), self.b_out)

    def named_params(self, prefix: str, include_out: bool = True):
        yield f"{prefix}.emb", self.emb
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layers.{i}")
        yield from self.ln_f.named_params(f"{prefix}.ln_f")
        if include_out:
            yield f"{prefix}.out.w", self.w_out
        yield f"{prefix}.out.b", self.b_out


class ModelBundle:
    """The full model: encoder plus optional P2M and CMLM decoders.

    ``ctc_vocab`` is what the CTC head emits over (the pinyin vocabulary
    for the P2M architecture, otherwise the character vocabulary);
    ``char_vocab`` is the final output inventory. With ``tie_projections``
    the relevant output projection reuses the transposed CMLM embedding
    instead of owning its own matrix.
    """

    def __init__(
        self,
        architecture: str,
        encoder_cfg: EncoderConfig,
        p2m_cfg: DecoderConfig | None,
        cmlm_cfg: DecoderConfig | None,
        char_vocab: Vocabulary,
        ctc_vocab: Vocabulary,
        seed: int = 0,
        tie_projections: bool = False,
    ):
        if architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {architecture!r}")
        if architecture == MASK_CTC_P2M and (p2m_cfg is None or cmlm_cfg is None):
            raise ValueError("mask_ctc_p2m needs both decoder configs")
        if architecture == MASK_CTC and cmlm_cfg is None:
            raise ValueError("mask_ctc needs the CMLM decoder config")
        if tie_projections and architecture == CTC_ONLY:
            raise ValueError("tie_projections needs a CMLM decoder")
        if architecture != MASK_CTC_P2M and ctc_vocab.tokens != char_vocab.tokens:
            raise ValueError(
                "architectures without a P2M stage must emit CTC over the character vocabulary"
            )
        self.architecture = architecture
        self.encoder_cfg = encoder_cfg
        self.p2m_cfg = p2m_cfg if architecture == MASK_CTC_P2M else None
        self.cmlm_cfg = cmlm_cfg if architecture != CTC_ONLY else None
        self.char_vocab = char_vocab
        self.ctc_vocab = ctc_vocab
        self.tie_projections = tie_projections
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.encoder = Encoder(encoder_cfg, len(ctc_vocab), rng)
        self.p2m = (
            TransformerDecoder(self.p2m_cfg, len(ctc_vocab), len(char_vocab), rng)
            if self.p2m_cfg is not None
            else None
        )
        self.cmlm = (
            TransformerDecoder(self.cmlm_cfg, len(char_vocab), len(char_vocab), rng)
            if self.cmlm_cfg is not None
            else None
        )
        if tie_projections and architecture == MASK_CTC and len(ctc_vocab) != len(char_vocab):
            raise ValueError("tied CTC projection needs matching vocabularies")

    # Tied projections are materialized per forward pass as a transpose
    # node, so gradients land on the shared embedding.
    def _ctc_override(self) -> Tensor | None:
        if self.tie_projections and self.architecture == MASK_CTC:
            return ad.transpose(self.cmlm.emb)
        return None

    def _p2m_override(self) -> Tensor | None:
        if self.tie_projections and self.architecture == MASK_CTC_P2M:
            return ad.transpose(self.cmlm.emb)
        return None

    def _fwd(self, train: bool, rng) -> _Forward:
        return _Forward(self.encoder_cfg.dropout, train, rng)

    def encoder_forward(
        self, features: np.ndarray, train: bool = False, rng=None
    ) -> tuple[Tensor, Tensor]:
        return self.encoder.forward(features, self._fwd(train, rng), self._ctc_override())

    def p2m_forward(
        self, masked: MaskedSequence, hidden: Tensor, train: bool = False, rng=None
    ) -> Tensor:
        if self.p2m is None:
            raise ValueError(f"architecture {self.architecture!r} has no P2M decoder")
        fwd = _Forward(self.p2m_cfg.dropout, train, rng)
        return self.p2m.forward(masked.ids, hidden, fwd, self._p2m_override())

    def cmlm_forward(
        self, masked: MaskedSequence, hidden: Tensor, train: bool = False, rng=None
    ) -> Tensor:
        if self.cmlm is None:
            raise ValueError(f"architecture {self.architecture!r} has no CMLM decoder")
        fwd = _Forward(self.cmlm_cfg.dropout, train, rng)
        return self.cmlm.forward(masked.ids, hidden, fwd)

    def named_params(self):
        tie_ctc = self.tie_projections and self.architecture == MASK_CTC
        tie_p2m = self.tie_projections and self.architecture == MASK_CTC_P2M
        yield from self.encoder.named_params("encoder", include_ctc=not tie_ctc)
        if self.p2m is not None:
            yield from self.p2m.named_params("p2m", include_out=not tie_p2m)
        if self.cmlm is not None:
            yield from self.cmlm.named_params("cmlm")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.grad = None

    def matreg_pair(self) -> tuple[Tensor, Tensor] | None:
        """The (output projection, transposed CMLM embedding) pair to regularize.

        The plain architecture pairs the CTC projection with the CMLM
        embedding; the P2M architecture pairs the P2M output projection
        with it, since the CTC head lives on the pinyin vocabulary there.
        """
        if self.cmlm is None or self.tie_projections:
            return None
        if self.architecture == MASK_CTC:
            return self.encoder.w_ctc, self.cmlm.emb
        if self.architecture == MASK_CTC_P2M:
            return self.p2m.w_out, self.cmlm.emb
        return None


def _vocab_meta(v: Vocabulary) -> dict:
    return {"tokens": list(v.tokens), "tags": list(v.tags)}


def save_checkpoint(bundle: ModelBundle, path, meta: dict | None = None) -> None:
    """Serialize every parameter array plus enough config to rebuild the bundle."""
    header_meta = {
        "version": CHECKPOINT_VERSION,
        "architecture": bundle.architecture,
        "encoder_cfg": asdict(bundle.encoder_cfg),
        "p2m_cfg": asdict(bundle.p2m_cfg) if bundle.p2m_cfg else None,
        "cmlm_cfg": asdict(bundle.cmlm_cfg) if bundle.cmlm_cfg else None,
        "char_vocab": _vocab_meta(bundle.char_vocab),
        "ctc_vocab": _vocab_meta(bundle.ctc_vocab),
        "tie_projections": bundle.tie_projections,
        "user": meta or {},
    }
    arrays = {name: p.values for name, p in bundle.named_params()}
    write_arrays(path, arrays, header_meta)


def _bundle_from_meta(meta: dict) -> ModelBundle:
    try:
        version = meta["version"]
    except KeyError:
        raise ContainerError("checkpoint header lacks a version field") from None
    if version != CHECKPOINT_VERSION:
        raise ContainerError(f"checkpoint version {version} unsupported")
    char_vocab = Vocabulary(meta["char_vocab"]["tokens"], meta["char_vocab"]["tags"])
    ctc_vocab = Vocabulary(meta["ctc_vocab"]["tokens"], meta["ctc_vocab"]["tags"])
    return ModelBundle(
        meta["architecture"],
        EncoderConfig(**meta["encoder_cfg"]),
        DecoderConfig(**meta["p2m_cfg"]) if meta["p2m_cfg"] else None,
        DecoderConfig(**meta["cmlm_cfg"]) if meta["cmlm_cfg"] else None,
        char_vocab,
        ctc_vocab,
        seed=0,
        tie_projections=meta.get("tie_projections", False),
    )


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    """Rebuild a bundle from a checkpoint; bit-exact inverse of save."""
    arrays, meta = read_arrays(path)
    bundle = _bundle_from_meta(meta)
    params = bundle.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise ContainerError(f"checkpoint arrays do not match model: {missing[:4]}")
    for name, p in params.items():
        if arrays[name].shape != p.values.shape:
            raise ContainerError(
                f"array {name!r} has shape {arrays[name].shape}, model expects {p.values.shape}"
            )
        p.values = arrays[name]
        p.grad = None
    return bundle, meta.get("user", {})


def checkpoint_meta(path) -> dict:
    _, meta = read_arrays(path)
    return meta.get("user", {})


def average_checkpoints(paths: list, k: int) -> ModelBundle:
    """Mean the parameters of the k best checkpoints (by validation metric).

    Ranking prefers the recorded validation masked-token accuracy (higher
    is better) and falls back to validation TER, then input order.
    """
    if not paths:
        raise ValueError("average_checkpoints needs at least one path")
    if k < 1:
        raise ValueError("k must be >= 1")
    loaded = []
    for p in paths:
        arrays, meta = read_arrays(p)
        loaded.append((p, arrays, meta))

    def rank_key(item):
        user = item[2].get("user", {})
        acc = user.get("val_masked_acc")
        ter = user.get("val_ter")
        if acc is not None:
            return (0, -float(acc))
        if ter is not None:
            return (1, float(ter))
        return (2, 0.0)

    loaded.sort(key=rank_key)
    chosen = loaded[: min(k, len(loaded))]
    base_path, base_arrays, base_meta = chosen[0]
    sums = {name: arr.copy() for name, arr in base_arrays.items()}
    for p, arrays, _ in chosen[1:]:
        if set(arrays) != set(sums):
            raise ContainerError(f"{p}: array names differ from {base_path}")
        for name, arr in arrays.items():
            if arr.shape != sums[name].shape:
                raise ContainerError(
                    f"{p}: array {name!r} shape {arr.shape} differs from {sums[name].shape}"
                )
            sums[name] += arr
    bundle = _bundle_from_meta(base_meta)
    params = bundle.parameters()
    if set(params) != set(sums):
        raise ContainerError("averaged arrays do not match model parameters")
    n = float(len(chosen))
    for name, p in params.items():
        p.values = sums[name] / n
    return bundle
