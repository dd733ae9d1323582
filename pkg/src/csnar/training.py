"""Training loop: batched graphs, Adam with inverse-sqrt warmup, validation.

One optimization step spans a batch of per-utterance graphs sharing the
model parameters: each utterance contributes its CTC term plus the masked
decoder terms of the active architecture, the batch mean picks up the
projection regularizer once, and gradients are clipped by global norm.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import embedding as emb_mod
from .config import RunConfig
from .data import ManifestRecord, load_features, read_manifest, spec_augment
from .decoding import DecodeConfig, decode_corpus
from .losses import (
    LossConfig,
    apply_mask,
    combined_loss,
    ctc_loss_graph,
    masked_ce,
    matreg_loss,
    sample_mask,
)
from .model import (
    CTC_ONLY,
    MASK_CTC,
    MASK_CTC_P2M,
    ModelBundle,
    save_checkpoint,
)
from .scoring import score_corpus
from .vocab import PinyinTable, Vocabulary, to_pinyin, tokenize
from .autodiff import backward, Tensor
from . import autodiff as ad

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def warmup_inv_sqrt_lr(base_lr: float, warmup_steps: int, step: int) -> float:
    """Linear ramp to ``base_lr`` over warmup, then inverse-sqrt decay."""
    step = max(step, 1)
    if step <= warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * math.sqrt(warmup_steps / step)


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float, grad_clip: float | None = None) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(gnorm):
            raise NumericError("non-finite gradient norm")
        scale = 1.0
        if grad_clip is not None and gnorm > grad_clip:
            scale = grad_clip / gnorm
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            self.params[k].values = self.params[k].values - lr * mhat / (
                np.sqrt(vhat) + self.eps
            )
        for p in self.params.values():
            p.grad = None
        return gnorm


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    char_ids: list[int]
    pinyin_ids: list[int]
    ref_tokens: list[str]


def load_split(
    manifest_path,
    char_vocab: Vocabulary,
    pinyin_vocab: Vocabulary,
    table: PinyinTable,
    limit: int | None = None,
) -> list[Utterance]:
    records = read_manifest(manifest_path)
    if limit is not None:
        records = records[:limit]
    out = []
    for rec in records:
        tokens = tokenize(rec.text)
        char_ids = char_vocab.encode(tokens)
        pinyin_ids = to_pinyin(char_ids, char_vocab, pinyin_vocab, table)
        out.append(
            Utterance(rec.utt_id, load_features(manifest_path, rec), char_ids, pinyin_ids, tokens)
        )
    return out


def build_bundle(cfg: RunConfig, char_vocab: Vocabulary, pinyin_vocab: Vocabulary) -> ModelBundle:
    arch = cfg.architecture
    ctc_vocab = pinyin_vocab if arch == MASK_CTC_P2M else char_vocab
    return ModelBundle(
        arch,
        cfg.encoder,
        cfg.p2m if arch == MASK_CTC_P2M else None,
        cfg.cmlm if arch != CTC_ONLY else None,
        char_vocab,
        ctc_vocab,
        seed=cfg.seed,
        tie_projections=cfg.tie_projections,
    )


def resolve_matreg_pairs(cfg: RunConfig, bundle: ModelBundle) -> list[tuple[Tensor, Tensor]]:
    """Which (projection, embedding) pairs the cosine regularizer ties.

    'auto' follows the architecture: the plain model pairs the CTC
    projection with the CMLM embedding, the P2M model pairs its output
    projection with it (the CTC head lives on the pinyin vocabulary
    there, so the shapes only match on the P2M side).
    """
    mode = cfg.matreg_pair
    if mode == "none" or cfg.loss.beta == 0.0 or bundle.cmlm is None or bundle.tie_projections:
        return []
    pairs = []
    if mode in ("auto", "p2m_emb", "both") and bundle.architecture == MASK_CTC_P2M:
        pairs.append((bundle.p2m.w_out, bundle.cmlm.emb))
    if mode in ("auto", "ctc_emb", "both") and bundle.architecture == MASK_CTC:
        pairs.append((bundle.encoder.w_ctc, bundle.cmlm.emb))
    if mode == "ctc_emb" and bundle.architecture == MASK_CTC_P2M:
        raise ValueError("ctc_emb regularization needs matching vocabularies; use p2m_emb")
    if mode == "p2m_emb" and bundle.architecture != MASK_CTC_P2M:
        raise ValueError("p2m_emb regularization needs the P2M architecture")
    return pairs


def build_smoother(cfg: RunConfig, char_vocab: Vocabulary, train_lines: list[str]):
    """Target-distribution builder for the masked cross-entropy terms."""
    loss_cfg = cfg.loss
    vocab_size = len(char_vocab)
    if loss_cfg.smoothing == "none":
        return None
    if loss_cfg.smoothing == "conventional":
        table = np.stack(
            [
                emb_mod.conventional_distribution(i, loss_cfg.epsilon, vocab_size)
                for i in range(vocab_size)
            ]
        )
        return lambda tid: table[tid]
    if cfg.embedding.vectors_path:
        word_emb = emb_mod.load_vectors(cfg.embedding.vectors_path, char_vocab)
    else:
        word_emb = emb_mod.train_ppmi_svd(
            train_lines, char_vocab, cfg.embedding.dim, cfg.embedding.window
        )
    table = emb_mod.build_smoothing_table(char_vocab, word_emb, cfg.smoothing)
    return lambda tid: table[tid]


def utterance_loss(
    bundle: ModelBundle,
    utt: Utterance,
    loss_cfg: LossConfig,
    smoother,
    rng: np.random.Generator,
):
    """Per-utterance weighted loss (regularizer excluded; added per batch)."""
    hidden, ctc_lp = bundle.encoder_forward(utt.features, train=True, rng=rng)
    arch = bundle.architecture
    ctc_targets = utt.pinyin_ids if arch == MASK_CTC_P2M else utt.char_ids
    ctc_blank = bundle.ctc_vocab.blank_id
    ctc = ctc_loss_graph(ctc_lp, ctc_targets, ctc_blank)
    if arch == CTC_ONLY:
        return combined_loss(ctc, None, None, None, LossConfig(alpha=1.0))

    p2m_term = None
    if arch == MASK_CTC_P2M:
        # The P2M stage is a translator trained with random input masking:
        # every output position is supervised, since decoding reads its
        # argmax at observed-pinyin positions too (a masked-only loss
        # leaves exactly those rows untrained).
        pos = sample_mask(len(utt.pinyin_ids), rng)
        masked = apply_mask(utt.pinyin_ids, pos, bundle.ctc_vocab.mask_id)
        logits = bundle.p2m_forward(masked, hidden, train=True, rng=rng)
        p2m_term = masked_ce(logits, utt.char_ids, range(len(utt.char_ids)), smoother)

    pos = sample_mask(len(utt.char_ids), rng)
    masked = apply_mask(utt.char_ids, pos, bundle.char_vocab.mask_id)
    logits = bundle.cmlm_forward(masked, hidden, train=True, rng=rng)
    cmlm_term = masked_ce(logits, utt.char_ids, pos, smoother)
    return combined_loss(ctc, p2m_term, cmlm_term, None, loss_cfg)


def masked_token_accuracy(
    bundle: ModelBundle, utts: list[Utterance], seed: int
) -> float | None:
    """Fraction of masked positions the CMLM restores given clean context."""
    if bundle.cmlm is None:
        return None
    rng = np.random.default_rng([seed, 9001])
    correct = 0
    total = 0
    for utt in utts:
        if not utt.char_ids:
            continue
        hidden, _ = bundle.encoder_forward(utt.features)
        pos = sorted(sample_mask(len(utt.char_ids), rng))
        masked = apply_mask(utt.char_ids, pos, bundle.char_vocab.mask_id)
        logits = bundle.cmlm_forward(masked, hidden).values
        pred = logits.argmax(axis=1)
        for p in pos:
            correct += int(pred[p] == utt.char_ids[p])
            total += 1
    return correct / total if total else None


def validation_ter(bundle: ModelBundle, utts: list[Utterance], decode_cfg: DecodeConfig) -> float:
    hyps = decode_corpus([(u.utt_id, u.features) for u in utts], bundle, decode_cfg)
    refs = {u.utt_id: u.ref_tokens for u in utts}
    out = {h.utt_id: h.tokens for h in hyps}
    return score_corpus(refs, out, bundle.char_vocab).ter


@dataclass
class TrainResult:
    bundle: ModelBundle
    checkpoint_paths: list[Path]
    log_path: Path
    history: list[dict]

    @property
    def best_checkpoint(self) -> Path:
        by_ter = min(self.history, key=lambda h: h["val_ter"])
        return self.checkpoint_paths[by_ter["epoch"] - 1]


def train(cfg: RunConfig, data_dir, work_dir) -> TrainResult:
    """Full training run; writes per-epoch checkpoints and a JSONL log."""
    data_dir = Path(data_dir)
    work_dir = Path(work_dir)
    ckpt_dir = work_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    char_vocab = Vocabulary.load(data_dir / "char_vocab.tsv")
    pinyin_vocab = Vocabulary.load(data_dir / "pinyin_vocab.tsv")
    table = PinyinTable.load(data_dir / "pinyin_table.tsv")
    train_utts = load_split(data_dir / "train.jsonl", char_vocab, pinyin_vocab, table)
    val_utts = load_split(data_dir / "val.jsonl", char_vocab, pinyin_vocab, table)
    if not train_utts:
        raise ValueError("training manifest is empty")

    bundle = build_bundle(cfg, char_vocab, pinyin_vocab)
    pairs = resolve_matreg_pairs(cfg, bundle)
    train_lines = [" ".join(u.ref_tokens) for u in train_utts]
    smoother = build_smoother(cfg, char_vocab, train_lines)

    params = bundle.parameters()
    optim = Adam(params)
    opt_cfg = cfg.optim
    val_decode = DecodeConfig(
        p_thres=cfg.decode.p_thres,
        iterations=cfg.decode.iterations,
        architecture=bundle.architecture,
        mask_source=cfg.decode.mask_source,
    )

    rng = np.random.default_rng([cfg.seed, 555])
    order_rng = np.random.default_rng([cfg.seed, 556])
    aug = cfg.augment

    log_path = work_dir / "train_log.jsonl"
    history: list[dict] = []
    ckpt_paths: list[Path] = []
    step = 0
    n = len(train_utts)
    with open(log_path, "w", encoding="utf-8") as log_file:
        for epoch in range(1, opt_cfg.epochs + 1):
            t0 = time.perf_counter()
            order = order_rng.permutation(n)
            epoch_loss = 0.0
            n_batches = 0
            for lo in range(0, n, opt_cfg.batch_size):
                batch = [train_utts[i] for i in order[lo : lo + opt_cfg.batch_size]]
                terms = []
                for utt in batch:
                    feats = utt.features
                    if aug.enabled:
                        feats = spec_augment(
                            feats,
                            aug.num_time_masks,
                            aug.time_width,
                            aug.num_freq_masks,
                            aug.freq_width,
                            rng,
                        )
                        utt = Utterance(
                            utt.utt_id, feats, utt.char_ids, utt.pinyin_ids, utt.ref_tokens
                        )
                    terms.append(utterance_loss(bundle, utt, cfg.loss, smoother, rng))
                total = terms[0]
                for t in terms[1:]:
                    total = ad.add(total, t)
                total = ad.scale(total, 1.0 / len(terms))
                for w_proj, w_emb in pairs:
                    reg = matreg_loss(w_proj, ad.transpose(w_emb))
                    total = ad.add(total, ad.scale(reg, cfg.loss.beta))
                loss_val = float(total.values)
                if not math.isfinite(loss_val):
                    batch_ids = ",".join(u.utt_id for u in batch)
                    raise NumericError(f"non-finite loss at batch [{batch_ids}]")
                backward(total)
                step += 1
                lr = warmup_inv_sqrt_lr(opt_cfg.lr, opt_cfg.warmup_steps, step)
                optim.step(lr, opt_cfg.grad_clip)
                epoch_loss += loss_val
                n_batches += 1

            val_ter = validation_ter(bundle, val_utts, val_decode)
            masked_acc = masked_token_accuracy(bundle, val_utts, cfg.seed + epoch)
            record = {
                "epoch": epoch,
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_ter": val_ter,
                "val_masked_acc": masked_acc,
                "lr": warmup_inv_sqrt_lr(opt_cfg.lr, opt_cfg.warmup_steps, step),
                "wall_s": time.perf_counter() - t0,
            }
            history.append(record)
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
            log.info(
                "epoch %d: loss %.4f, val TER %.2f%%, masked acc %s",
                epoch,
                record["train_loss"],
                100.0 * val_ter,
                "n/a" if masked_acc is None else f"{100.0 * masked_acc:.1f}%",
            )
            ckpt = ckpt_dir / f"epoch{epoch:03d}.mccs"
            save_checkpoint(
                bundle,
                ckpt,
                meta={
                    "epoch": epoch,
                    "val_ter": val_ter,
                    "val_masked_acc": masked_acc,
                    "train_loss": record["train_loss"],
                },
            )
            ckpt_paths.append(ckpt)
    return TrainResult(bundle, ckpt_paths, log_path, history)
