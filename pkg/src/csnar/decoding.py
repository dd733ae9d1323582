"""Inference pipeline: CTC greedy pass, confidence masking, CMLM refinement.

The decode modes mirror the three trainable architectures. ``ctc_only``
reports the greedy output (translated through the P2M decoder when one
exists), ``mask_ctc`` masks low-confidence greedy tokens and lets the CMLM
fill them over K iterations, and ``mask_ctc_p2m`` runs greedy over pinyin,
fills confident positions through the P2M decoder, and leaves the masked
ones for the CMLM.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .losses import MaskedSequence, apply_mask
from .model import CTC_ONLY, MASK_CTC, MASK_CTC_P2M, ModelBundle
from .vocab import detokenize

FRAME_SECONDS = 0.01  # 10 ms frame shift for synthetic features


@dataclass
class DecodeConfig:
    p_thres: float = 0.99
    iterations: int = 1
    architecture: str = MASK_CTC_P2M
    mask_source: str = "ctc"  # "ctc" | "p2m": which confidence drives masking

    def __post_init__(self):
        if not 0.0 < self.p_thres <= 1.0:
            raise ValueError("p_thres must lie in (0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.architecture not in (CTC_ONLY, MASK_CTC, MASK_CTC_P2M):
            raise ValueError(f"unknown decode architecture {self.architecture!r}")
        if self.mask_source not in ("ctc", "p2m"):
            raise ValueError(f"mask_source must be 'ctc' or 'p2m', got {self.mask_source!r}")


@dataclass
class Hypothesis:
    utt_id: str
    token_ids: list[int]
    tokens: list[str]
    confidences: list[float]
    masked_positions: list[int]
    fill_history: list[list[int]]  # positions committed per CMLM iteration
    decode_s: float
    audio_s: float

    @property
    def text(self) -> str:
        return detokenize(self.tokens)


def ctc_greedy(ctc_log_probs: np.ndarray, blank: int) -> tuple[list[int], list[float]]:
    """Per-frame argmax, collapse repeats, drop blanks.

    A token's confidence is the highest posterior among the frames that
    merged into it.
    """
    lp = np.asarray(ctc_log_probs)
    if lp.shape[0] == 0:
        return [], []
    best = lp.argmax(axis=1)
    conf = np.exp(lp[np.arange(lp.shape[0]), best])
    tokens: list[int] = []
    confs: list[float] = []
    prev = -1
    for sym, p in zip(best.tolist(), conf.tolist()):
        if sym == prev:
            if sym != blank and p > confs[-1]:
                confs[-1] = p
        elif sym != blank:
            tokens.append(sym)
            confs.append(p)
        prev = sym
    return tokens, confs


def mask_by_threshold(
    tokens: list[int], confidences: list[float], p_thres: float, mask_id: int
) -> MaskedSequence:
    """Replace tokens whose confidence falls strictly below the threshold."""
    if len(tokens) != len(confidences):
        raise ValueError("tokens and confidences differ in length")
    positions = [i for i, c in enumerate(confidences) if c < p_thres]
    return apply_mask(list(tokens), positions, mask_id)


def iteration_schedule(num_masked: int, iterations: int) -> list[int]:
    """Fill counts per iteration: floor(n/K) for the first K-1, remainder last."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if num_masked < 0:
        raise ValueError("num_masked must be >= 0")
    if num_masked == 0:
        return []
    base = num_masked // iterations
    plan = [base] * (iterations - 1)
    plan.append(num_masked - base * (iterations - 1))
    return plan


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def cmlm_refine(
    bundle: ModelBundle,
    masked: MaskedSequence,
    hidden,
    iterations: int,
    banned_ids: tuple[int, ...],
) -> tuple[list[int], list[float], list[list[int]]]:
    """Resolve every masked position in K scheduled iterations.

    Each iteration reruns the CMLM on the partially filled sequence and
    commits the scheduled number of highest-posterior positions with their
    argmax token (banned ids, i.e. mask and blank, are excluded from the
    argmax domain). Committed tokens are never revisited.
    """
    ids = list(masked.ids)
    confs = [1.0] * len(ids)
    remaining = sorted(masked.mask_positions)
    history: list[list[int]] = []
    if not remaining:
        return ids, confs, history
    plan = iteration_schedule(len(remaining), iterations)
    banned = list(banned_ids)
    for count in plan:
        seq = MaskedSequence(tuple(ids), frozenset(remaining), masked.mask_id)
        logits = bundle.cmlm_forward(seq, hidden).values
        probs = _softmax_rows(logits)
        probs[:, banned] = -1.0  # never selectable
        picks = []
        for pos in remaining:
            tok = int(probs[pos].argmax())
            picks.append((-probs[pos, tok], pos, tok))
        picks.sort()
        committed = []
        for negp, pos, tok in picks[:count]:
            ids[pos] = tok
            confs[pos] = -negp
            committed.append(pos)
            remaining.remove(pos)
        history.append(sorted(committed))
    if remaining:
        raise AssertionError("refinement schedule left masked positions unresolved")
    return ids, confs, history


def _p2m_translate(
    bundle: ModelBundle, pinyin_masked: MaskedSequence, hidden
) -> tuple[list[int], list[float]]:
    """One P2M pass: argmax characters everywhere, probabilities attached.

    Masked input positions still produce a row; the caller decides whether
    to keep it (mask-source 'p2m') or re-mask it (CTC confidence mode).
    """
    char_vocab = bundle.char_vocab
    logits = bundle.p2m_forward(pinyin_masked, hidden).values
    probs = _softmax_rows(logits) if len(logits) else logits
    out_ids: list[int] = []
    out_probs: list[float] = []
    for row in probs:
        row = row.copy()
        row[[char_vocab.mask_id, char_vocab.blank_id]] = -1.0
        tok = int(row.argmax())
        out_ids.append(tok)
        out_probs.append(float(row[tok]))
    return out_ids, out_probs


def decode_utterance(
    utt_id: str, features: np.ndarray, bundle: ModelBundle, cfg: DecodeConfig
) -> Hypothesis:
    """Run the configured pipeline on one utterance and record wall time."""
    _check_compatible(bundle, cfg)
    char_vocab = bundle.char_vocab
    ctc_vocab = bundle.ctc_vocab
    start = time.perf_counter()

    hidden, ctc_lp = bundle.encoder_forward(features)
    greedy_ids, greedy_conf = ctc_greedy(ctc_lp.values, ctc_vocab.blank_id)

    masked_positions: list[int] = []
    history: list[list[int]] = []

    if cfg.architecture == CTC_ONLY:
        if bundle.p2m is not None:
            seq = apply_mask(greedy_ids, [], ctc_vocab.mask_id)
            ids, confs = _p2m_translate(bundle, seq, hidden)
        else:
            ids, confs = list(greedy_ids), list(greedy_conf)
    elif cfg.architecture == MASK_CTC:
        seq = mask_by_threshold(greedy_ids, greedy_conf, cfg.p_thres, char_vocab.mask_id)
        masked_positions = sorted(seq.mask_positions)
        confs = list(greedy_conf)
        ids, fill_confs, history = cmlm_refine(
            bundle, seq, hidden, cfg.iterations,
            (char_vocab.mask_id, char_vocab.blank_id),
        )
        for pos in masked_positions:
            confs[pos] = fill_confs[pos]
    else:  # MASK_CTC_P2M
        if cfg.mask_source == "ctc":
            pinyin_seq = mask_by_threshold(
                greedy_ids, greedy_conf, cfg.p_thres, ctc_vocab.mask_id
            )
            masked_positions = sorted(pinyin_seq.mask_positions)
            p2m_ids, p2m_probs = _p2m_translate(bundle, pinyin_seq, hidden)
            char_ids = list(p2m_ids)
            confs = list(p2m_probs)
            for pos in masked_positions:
                char_ids[pos] = char_vocab.mask_id
        else:
            pinyin_seq = apply_mask(greedy_ids, [], ctc_vocab.mask_id)
            p2m_ids, p2m_probs = _p2m_translate(bundle, pinyin_seq, hidden)
            char_ids = list(p2m_ids)
            confs = list(p2m_probs)
            masked_positions = [i for i, p in enumerate(p2m_probs) if p < cfg.p_thres]
            for pos in masked_positions:
                char_ids[pos] = char_vocab.mask_id
        seq = apply_mask(char_ids, masked_positions, char_vocab.mask_id)
        ids, fill_confs, history = cmlm_refine(
            bundle, seq, hidden, cfg.iterations,
            (char_vocab.mask_id, char_vocab.blank_id),
        )
        for pos in masked_positions:
            confs[pos] = fill_confs[pos]

    decode_s = time.perf_counter() - start
    audio_s = features.shape[0] * FRAME_SECONDS
    # Plain bundles share one vocabulary for CTC and output, so ids are
    # always over the character vocabulary by the time we get here.
    tokens = [char_vocab.tokens[i] for i in ids]
    return Hypothesis(
        utt_id=utt_id,
        token_ids=ids,
        tokens=tokens,
        confidences=[float(c) for c in confs],
        masked_positions=masked_positions,
        fill_history=history,
        decode_s=decode_s,
        audio_s=audio_s,
    )


def _check_compatible(bundle: ModelBundle, cfg: DecodeConfig) -> None:
    arch = cfg.architecture
    if arch == bundle.architecture:
        return
    if arch == CTC_ONLY:
        return  # greedy-only decoding works on any bundle
    raise ValueError(
        f"decode architecture {arch!r} incompatible with bundle {bundle.architecture!r}"
    )


def decode_corpus(
    utterances: list[tuple[str, np.ndarray]],
    bundle: ModelBundle,
    cfg: DecodeConfig,
    workers: int = 1,
) -> list[Hypothesis]:
    """Decode many utterances; the bundle is shared read-only."""
    if workers <= 1:
        return [decode_utterance(u, f, bundle, cfg) for u, f in utterances]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda uf: decode_utterance(uf[0], uf[1], bundle, cfg), utterances))


def measure_rtf(hypotheses: list[Hypothesis]) -> float:
    """Total decode time over total audio time (ratio of sums)."""
    total_audio = sum(h.audio_s for h in hypotheses)
    if total_audio <= 0.0:
        raise ValueError("cannot compute RTF with zero total audio duration")
    return sum(h.decode_s for h in hypotheses) / total_audio


def write_hypotheses(path, hypotheses: list[Hypothesis]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for h in hypotheses:
            record = {
                "utt_id": h.utt_id,
                "text": h.text,
                "tokens": h.tokens,
                "confidences": h.confidences,
                "masked_positions": h.masked_positions,
                "decode_ms": h.decode_s * 1000.0,
                "audio_ms": h.audio_s * 1000.0,
            }
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_hypotheses(path) -> dict[str, dict]:
    out: dict[str, dict] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["utt_id"] in out:
                raise ValueError(f"{path}:{lineno}: duplicate utt_id {rec['utt_id']!r}")
            out[rec["utt_id"]] = rec
    return out
