"""Training objectives: CTC, masked cross-entropy, projection regularizer.

The CTC negative log-likelihood runs the forward-backward recursion in log
space and hands back an analytic gradient with respect to the frame
log-probabilities, wrapped as a custom graph node so it composes with the
autodiff stack. The masked cross-entropy and the columnwise cosine
regularizer are assembled from generic primitives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossConfig:
    alpha: float = 0.3
    beta: float = 1e-4
    smoothing: str = "conventional"  # "conventional" | "embedding" | "none"
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")
        if self.smoothing not in ("conventional", "embedding", "none"):
            raise ValueError(f"unknown smoothing mode {self.smoothing!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")


@dataclass(frozen=True)
class MaskedSequence:
    """Token ids with an explicit set of masked positions.

    Ids at masked positions must already hold the mask id; the observed
    context is everything else.
    """

    ids: tuple[int, ...]
    mask_positions: frozenset[int]
    mask_id: int

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "mask_positions", frozenset(self.mask_positions))
        for p in self.mask_positions:
            if not 0 <= p < len(self.ids):
                raise ValueError(f"mask position {p} out of range for length {len(self.ids)}")
            if self.ids[p] != self.mask_id:
                raise ValueError(f"position {p} is masked but holds id {self.ids[p]}")

    def __len__(self) -> int:
        return len(self.ids)


def apply_mask(ids: list[int], positions, mask_id: int) -> MaskedSequence:
    positions = frozenset(positions)
    masked = tuple(mask_id if i in positions else t for i, t in enumerate(ids))
    return MaskedSequence(masked, positions, mask_id)


def sample_mask(length: int, rng: np.random.Generator) -> frozenset[int]:
    """Pick m ~ Uniform{1..length} positions without replacement; empty for length 0."""
    if length <= 0:
        return frozenset()
    m = int(rng.integers(1, length + 1))
    return frozenset(int(i) for i in rng.choice(length, size=m, replace=False))


class CtcInfeasibleError(ValueError):
    """The target cannot be emitted in the given number of frames."""


def _extend_with_blanks(target: list[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_loss(
    log_probs: np.ndarray, target: list[int], blank: int
) -> tuple[float, np.ndarray]:
    """CTC negative log-likelihood and its gradient wrt the log-probs.

    ``log_probs`` is T x V with each row a log-distribution; ``target`` is
    the label sequence without blanks. Returns (nll, d nll / d log_probs);
    the gradient row t is minus the posterior over symbols at frame t, so
    each row sums to -1.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError(f"log_probs must be T x V, got shape {lp.shape}")
    T, V = lp.shape
    target = [int(t) for t in target]
    for t in target:
        if not 0 <= t < V or t == blank:
            raise ValueError(f"target symbol {t} invalid for V={V} with blank={blank}")
    L = len(target)
    min_frames = L + sum(1 for i in range(1, L) if target[i] == target[i - 1])
    if T < min_frames:
        raise CtcInfeasibleError(
            f"target of length {L} (minimum {min_frames} frames) cannot fit in {T} frames"
        )

    ext = _extend_with_blanks(target, blank)
    S = ext.size
    # skip transition s-2 -> s allowed between different non-blank labels
    can_skip = np.zeros(S, dtype=bool)
    if S > 2:
        can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    neg = -np.inf
    alpha = np.full((T, S), neg)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([neg], prev[:-1]))
        skip = np.concatenate(([neg, neg], prev[:-2]))
        skip = np.where(can_skip, skip, neg)
        merged = np.logaddexp(np.logaddexp(stay, step), skip)
        alpha[t] = merged + lp[t, ext]

    loglik = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2] if S > 1 else neg)
    if not np.isfinite(loglik):
        raise FloatingPointError("CTC forward pass underflowed to zero probability")

    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        stay = nxt
        step = np.concatenate((nxt[1:], [neg]))
        skip = np.concatenate((nxt[2:], [neg, neg]))
        skip_ok = np.zeros(S, dtype=bool)
        skip_ok[:-2] = can_skip[2:]
        skip = np.where(skip_ok, skip, neg)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)

    # gamma_t(k): posterior that the path emits symbol k at frame t
    grad = np.zeros_like(lp)
    with np.errstate(invalid="ignore"):
        weight = np.exp(alpha + beta - loglik)
    weight[~np.isfinite(weight)] = 0.0
    for t in range(T):
        np.add.at(grad[t], ext, weight[t])
    return float(-loglik), -grad


def ctc_loss_graph(log_probs: Tensor, target: list[int], blank: int) -> Tensor:
    """Autodiff wrapper around ``ctc_loss`` (custom gradient node)."""
    nll, grad = ctc_loss(log_probs.values, target, blank)

    def bwd(g: np.ndarray):
        return (float(g) * grad,)

    return Tensor(np.float64(nll), (log_probs,), bwd)


class EmptyMaskError(ValueError):
    """A masked loss was asked for with no masked positions."""


def masked_ce(
    logits: Tensor,
    targets: list[int],
    mask_positions,
    smooth,
) -> Tensor:
    """Mean cross-entropy at the masked positions against smoothed targets.

    ``smooth`` maps a target id to a probability vector over the output
    vocabulary (one-hot when None). Unmasked positions contribute nothing.
    """
    positions = sorted(mask_positions)
    if not positions:
        raise EmptyMaskError("a masked loss needs at least one masked position")
    vocab_size = logits.shape[-1]
    q = np.zeros((len(positions), vocab_size), dtype=np.float64)
    for row, pos in enumerate(positions):
        tid = targets[pos]
        if smooth is None:
            q[row, tid] = 1.0
        else:
            q[row] = smooth(tid)
    logp = ad.log_softmax_lastdim(logits)
    rows = ad.embed_lookup(logp, positions)  # row gather
    ce = ad.sum_(ad.mul(Tensor(q), rows))
    return ad.scale(ce, -1.0 / len(positions))


def matreg_loss(w_a: Tensor, w_b: Tensor) -> Tensor:
    """Mean columnwise cosine-distance (1 - cos) between two d x |V| matrices.

    Columns with zero norm on either side contribute a constant cos = 0
    term (and no gradient); that situation is transient early in training
    and is reported once per call.
    """
    if w_a.shape != w_b.shape:
        raise ad.ShapeError(f"matreg operands differ: {w_a.shape} vs {w_b.shape}")
    if w_a.ndim != 2:
        raise ad.ShapeError(f"matreg needs rank-2 matrices, got {w_a.shape}")
    ncols = w_a.shape[1]
    na2 = (w_a.values * w_a.values).sum(axis=0)
    nb2 = (w_b.values * w_b.values).sum(axis=0)
    live = (na2 > 0.0) & (nb2 > 0.0)
    if not live.all():
        warnings.warn(
            f"{int(np.count_nonzero(~live))} zero-norm columns scored as cos=0 in matreg",
            RuntimeWarning,
            stacklevel=2,
        )
    live_f = Tensor(live.astype(np.float64))
    dead_f = Tensor((~live).astype(np.float64))

    dots = ad.mul(ad.sum_(ad.mul(w_a, w_b), axis=0), live_f)
    qa = ad.add(ad.sum_(ad.mul(w_a, w_a), axis=0), dead_f)
    qb = ad.add(ad.sum_(ad.mul(w_b, w_b), axis=0), dead_f)
    denom = ad.mul(ad.sqrt_(qa), ad.sqrt_(qb))
    cos = ad.div(dots, denom)
    terms = ad.add(Tensor(np.ones(ncols)), ad.scale(cos, -1.0))
    return ad.scale(ad.sum_(terms), 1.0 / ncols)


def combined_loss(
    ctc_nll: Tensor | None,
    p2m_nll: Tensor | None,
    cmlm_nll: Tensor | None,
    matreg: Tensor | None,
    cfg: LossConfig,
) -> Tensor:
    """alpha * ctc + (1 - alpha) * (p2m + cmlm) + beta * matreg.

    Terms absent from the current architecture are passed as None and
    dropped; at least one term must be present.
    """
    parts: list[Tensor] = []
    if ctc_nll is not None:
        parts.append(ad.scale(ctc_nll, cfg.alpha))
    if p2m_nll is not None:
        parts.append(ad.scale(p2m_nll, 1.0 - cfg.alpha))
    if cmlm_nll is not None:
        parts.append(ad.scale(cmlm_nll, 1.0 - cfg.alpha))
    if matreg is not None and cfg.beta > 0.0:
        parts.append(ad.scale(matreg, cfg.beta))
    if not parts:
        raise ValueError("combined_loss needs at least one term")
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return total
