"""Word embeddings and the similarity machinery behind label smoothing.

Vectors either come from a word2vec-style text file or from a fully
deterministic PPMI + truncated-SVD trainer over the training transcripts.
Smoothing moves an epsilon of probability mass from the target onto its
nearest cosine neighbors (top-N or above a threshold); tokens without a
usable vector fall back to conventional uniform smoothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .vocab import Vocabulary, tokenize

log = logging.getLogger(__name__)


@dataclass
class SmoothingConfig:
    """Neighbor-set selection for embedding-based label smoothing."""

    mode: str = "topn"  # "topn" | "threshold"
    top_n: int = 10
    tau: float = 0.5
    epsilon: float = 0.1
    same_language_only: bool = False

    def __post_init__(self):
        if self.mode not in ("topn", "threshold"):
            raise ValueError(f"smoothing mode {self.mode!r} not in {{'topn', 'threshold'}}")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if not -1.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (-1, 1)")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")


class WordEmbedding:
    """Per-token vectors aligned with a vocabulary's id order.

    Tokens may lack a vector (``has_vector`` False); an all-zero trained
    vector counts as missing for similarity purposes since its cosine is
    undefined.
    """

    def __init__(self, tokens: list[str], dim: int):
        if dim <= 0:
            raise ValueError("embedding dim must be positive")
        self.tokens = list(tokens)
        self.dim = dim
        self.matrix = np.zeros((len(tokens), dim), dtype=np.float64)
        self._present = np.zeros(len(tokens), dtype=bool)
        self._id_of = {t: i for i, t in enumerate(tokens)}

    def set_vector(self, token: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"vector for {token!r} has length {vec.shape}, expected {self.dim}")
        i = self._id_of[token]
        self.matrix[i] = vec
        self._present[i] = True

    def has_vector(self, token: str) -> bool:
        i = self._id_of.get(token)
        if i is None or not self._present[i]:
            return False
        return bool(np.any(self.matrix[i]))

    def vector(self, token: str) -> np.ndarray | None:
        return self.matrix[self._id_of[token]] if self.has_vector(token) else None

    def coverage(self) -> float:
        if not self.tokens:
            return 0.0
        return sum(self.has_vector(t) for t in self.tokens) / len(self.tokens)

    def _unit_rows(self) -> np.ndarray:
        norms = np.linalg.norm(self.matrix, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        return self.matrix / safe

    def cosines_from(self, token: str) -> np.ndarray | None:
        """Cosine of ``token`` against every vocab row (0 for vectorless rows)."""
        v = self.vector(token)
        if v is None:
            return None
        units = self._unit_rows()
        return units @ (v / np.linalg.norm(v))


def load_vectors(path, vocab: Vocabulary) -> WordEmbedding:
    """Load a ``<count> <dim>`` header text file; rows not in the vocab are skipped."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}:1: expected '<count> <dim>' header, got {header!r}")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise ValueError(f"{path}:1: non-integer header fields {header!r}") from None
        emb = WordEmbedding(vocab.tokens, dim)
        n_rows = 0
        for lineno, line in enumerate(f, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(" ")
            token, fields = parts[0], parts[1:]
            if len(fields) != dim:
                raise ValueError(
                    f"{path}:{lineno}: row has {len(fields)} values, header says {dim}"
                )
            try:
                vec = np.array([float(x) for x in fields], dtype=np.float64)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed float field") from None
            n_rows += 1
            if token in vocab.id_of:
                emb.set_vector(token, vec)
    if n_rows != count:
        log.warning("%s: header declared %d rows, found %d", path, count, n_rows)
    log.info("loaded vectors: %.1f%% vocabulary coverage", 100.0 * emb.coverage())
    return emb


def cooccurrence_counts(
    corpus_lines: list[str], vocab: Vocabulary, window: int
) -> np.ndarray:
    """Symmetric within-window co-occurrence counts, |V| x |V|."""
    if window < 1:
        raise ValueError("window must be >= 1")
    n = len(vocab)
    counts = np.zeros((n, n), dtype=np.float64)
    for line in corpus_lines:
        ids = vocab.encode(tokenize(line))
        for i, a in enumerate(ids):
            hi = min(len(ids), i + window + 1)
            for j in range(i + 1, hi):
                b = ids[j]
                counts[a, b] += 1.0
                counts[b, a] += 1.0
    return counts


def ppmi_from_counts(counts: np.ndarray) -> np.ndarray:
    """Positive pointwise mutual information of a co-occurrence matrix."""
    total = counts.sum()
    if total == 0:
        return np.zeros_like(counts)
    row = counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / np.outer(row, row))
    pmi[~np.isfinite(pmi)] = 0.0
    return np.maximum(pmi, 0.0)


def svd_factor(matrix: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-``dim`` factors (W, C) with W @ C.T approximating ``matrix``."""
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    root = np.sqrt(s[:dim])
    return u[:, :dim] * root, vt[:dim].T * root


def train_ppmi_svd(
    corpus_lines: list[str], vocab: Vocabulary, dim: int, window: int = 2
) -> WordEmbedding:
    """Deterministic embedding trainer: PPMI matrix, truncated SVD, L2 rows.

    Tokens never observed in the corpus end up with a zero vector and are
    reported once; they degrade to conventional smoothing downstream.
    """
    if dim > len(vocab):
        raise ValueError(f"dim {dim} exceeds vocabulary size {len(vocab)}")
    counts = cooccurrence_counts(corpus_lines, vocab, window)
    ppmi = ppmi_from_counts(counts)
    w, _ = svd_factor(ppmi, dim)
    norms = np.linalg.norm(w, axis=1)
    unseen = counts.sum(axis=1) == 0
    n_zero = int(np.count_nonzero(unseen | (norms == 0)))
    if n_zero:
        log.warning("%d of %d tokens have no usable embedding vector", n_zero, len(vocab))
    emb = WordEmbedding(vocab.tokens, dim)
    for i, tok in enumerate(vocab.tokens):
        if norms[i] > 0 and not unseen[i]:
            emb.set_vector(tok, w[i] / norms[i])
    return emb


def _candidate_ids(
    target: str, emb: WordEmbedding, vocab: Vocabulary | None, same_language_only: bool
) -> np.ndarray:
    n = len(emb.tokens)
    mask = np.array([emb.has_vector(t) for t in emb.tokens], dtype=bool)
    tid = emb._id_of[target]
    mask[tid] = False
    if same_language_only:
        if vocab is None:
            raise ValueError("same_language_only needs the vocabulary for tags")
        tag = vocab.tag_of(target)
        mask &= np.array([vocab.tag_of(t) == tag for t in emb.tokens], dtype=bool)
    return np.flatnonzero(mask) if n else np.array([], dtype=int)


def similar_by_threshold(
    target: str,
    emb: WordEmbedding,
    tau: float,
    vocab: Vocabulary | None = None,
    same_language_only: bool = False,
) -> list[str]:
    """Tokens (excluding the target) with cosine >= tau, best first."""
    cos = emb.cosines_from(target)
    if cos is None:
        log.warning("token %r has no vector; empty similarity set", target)
        return []
    cand = _candidate_ids(target, emb, vocab, same_language_only)
    keep = cand[cos[cand] >= tau]
    order = sorted(keep.tolist(), key=lambda i: (-cos[i], i))
    return [emb.tokens[i] for i in order]


def similar_topn(
    target: str,
    emb: WordEmbedding,
    n: int,
    vocab: Vocabulary | None = None,
    same_language_only: bool = False,
) -> list[str]:
    """The n highest-cosine tokens excluding the target; ties break on lower id."""
    cos = emb.cosines_from(target)
    if cos is None:
        log.warning("token %r has no vector; empty similarity set", target)
        return []
    cand = _candidate_ids(target, emb, vocab, same_language_only)
    order = sorted(cand.tolist(), key=lambda i: (-cos[i], i))[:n]
    return [emb.tokens[i] for i in order]


def smooth_distribution(
    target_id: int, similar_ids: list[int], epsilon: float, vocab_size: int
) -> np.ndarray:
    """Target gets 1-eps, each similar token eps/|D|, everything else 0.

    An empty similar set falls back to conventional smoothing, spreading
    eps uniformly over the rest of the vocabulary.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    q = np.zeros(vocab_size, dtype=np.float64)
    if target_id in similar_ids:
        raise ValueError("target id must not appear in its own similarity set")
    if epsilon == 0.0:
        q[target_id] = 1.0
        return q
    if similar_ids:
        q[target_id] = 1.0 - epsilon
        share = epsilon / len(similar_ids)
        for i in similar_ids:
            q[i] = share
    else:
        log.warning("empty similarity set for id %d; using conventional smoothing", target_id)
        q[:] = epsilon / (vocab_size - 1)
        q[target_id] = 1.0 - epsilon
    return q


def conventional_distribution(target_id: int, epsilon: float, vocab_size: int) -> np.ndarray:
    q = np.full(vocab_size, epsilon / (vocab_size - 1), dtype=np.float64)
    q[target_id] = 1.0 - epsilon
    return q


def one_hot_distribution(target_id: int, vocab_size: int) -> np.ndarray:
    q = np.zeros(vocab_size, dtype=np.float64)
    q[target_id] = 1.0
    return q


def build_smoothing_table(
    vocab: Vocabulary, emb: WordEmbedding, cfg: SmoothingConfig
) -> np.ndarray:
    """Precompute the |V| x |V| smoothed target table for embedding mode.

    Similarity sets for the whole vocabulary are computed once up front so
    training batches only index rows.
    """
    n = len(vocab)
    table = np.zeros((n, n), dtype=np.float64)
    n_fallback = 0
    for tid, tok in enumerate(vocab.tokens):
        if emb.has_vector(tok):
            if cfg.mode == "topn":
                similar = similar_topn(tok, emb, cfg.top_n, vocab, cfg.same_language_only)
            else:
                similar = similar_by_threshold(tok, emb, cfg.tau, vocab, cfg.same_language_only)
            sim_ids = [vocab.id_of[s] for s in similar]
        else:
            sim_ids = []
        if sim_ids:
            table[tid] = smooth_distribution(tid, sim_ids, cfg.epsilon, n)
        else:
            n_fallback += 1
            table[tid] = conventional_distribution(tid, cfg.epsilon, n)
    if n_fallback:
        log.info("%d of %d tokens use the conventional smoothing fallback", n_fallback, n)
    return table
