"""Loss tests. The CTC oracle enumerates every frame-level path directly."""

import itertools
import math
import warnings

import numpy as np
import pytest

from csnar import autodiff as ad
from csnar.autodiff import Tensor, backward
from csnar.losses import (
    CtcInfeasibleError,
    EmptyMaskError,
    LossConfig,
    MaskedSequence,
    apply_mask,
    combined_loss,
    ctc_loss,
    ctc_loss_graph,
    masked_ce,
    matreg_loss,
    sample_mask,
)

BLANK = 0


def collapse(path, blank=BLANK):
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def ctc_brute_force(log_probs, target, blank=BLANK):
    """Sum path probabilities by full enumeration over V^T paths."""
    T, V = log_probs.shape
    target = tuple(target)
    total = -np.inf
    for path in itertools.product(range(V), repeat=T):
        if collapse(path, blank) != target:
            continue
        logp = sum(log_probs[t, s] for t, s in enumerate(path))
        total = np.logaddexp(total, logp)
    return -total


def random_log_dist(rng, T, V):
    x = rng.normal(size=(T, V))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


class TestCtcLoss:
    def test_single_frame_single_path(self):
        lp = np.log(np.array([[0.4, 0.6]]))
        nll, _ = ctc_loss(lp, [1], BLANK)
        assert abs(nll - (-math.log(0.6))) < 1e-12

    def test_two_frame_three_paths(self):
        # uniform p(blank) = p(a) = 0.5 per frame; paths aa, a-, -a
        lp = np.log(np.full((2, 2), 0.5))
        nll, _ = ctc_loss(lp, [1], BLANK)
        assert abs(nll - (-math.log(0.75))) < 1e-12

    def test_empty_target_all_blank_path(self):
        rng = np.random.default_rng(3)
        lp = random_log_dist(rng, 4, 3)
        nll, _ = ctc_loss(lp, [], BLANK)
        assert abs(nll - (-lp[:, BLANK].sum())) < 1e-10

    def test_matches_brute_force_small_grid(self):
        rng = np.random.default_rng(7)
        for T in (1, 2, 3, 4, 5):
            for V in (2, 3):
                for L in (0, 1, 2):
                    lp = random_log_dist(rng, T, V)
                    labels = [1 + rng.integers(V - 1) for _ in range(L)]
                    reps = sum(1 for i in range(1, L) if labels[i] == labels[i - 1])
                    if T < L + reps:
                        continue
                    nll, _ = ctc_loss(lp, labels, BLANK)
                    oracle = ctc_brute_force(lp, labels, BLANK)
                    assert abs(nll - oracle) < 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        lp = random_log_dist(rng, 5, 3)
        target = [1, 2]
        _, grad = ctc_loss(lp, target, BLANK)
        h = 1e-6
        for t in range(5):
            for v in range(3):
                up, down = lp.copy(), lp.copy()
                up[t, v] += h
                down[t, v] -= h
                num = (ctc_brute_force(up, target) - ctc_brute_force(down, target)) / (2 * h)
                rel = abs(grad[t, v] - num) / (abs(grad[t, v]) + abs(num) + 1e-12)
                assert rel < 1e-5

    def test_gradient_rows_sum_to_minus_one(self):
        # each row of the gradient is minus a posterior distribution
        rng = np.random.default_rng(13)
        lp = random_log_dist(rng, 6, 4)
        _, grad = ctc_loss(lp, [2, 1, 3], BLANK)
        np.testing.assert_allclose(grad.sum(axis=1), -1.0, atol=1e-9)

    def test_infeasible_target_distinct_error(self):
        lp = random_log_dist(np.random.default_rng(1), 2, 3)
        with pytest.raises(CtcInfeasibleError):
            ctc_loss(lp, [1, 2, 1], BLANK)
        # repeated labels need a separating blank frame
        with pytest.raises(CtcInfeasibleError):
            ctc_loss(lp, [1, 1], BLANK)

    def test_graph_node_backpropagates(self):
        rng = np.random.default_rng(17)
        raw = Tensor(rng.normal(size=(4, 3)))

        def f(t):
            lp = ad.log_softmax_lastdim(t)
            return ctc_loss_graph(lp, [1, 2], BLANK)

        assert ad.grad_check(f, raw) < 1e-6

    def test_blank_in_target_rejected(self):
        lp = random_log_dist(np.random.default_rng(1), 3, 3)
        with pytest.raises(ValueError):
            ctc_loss(lp, [BLANK], BLANK)


class TestSampleMask:
    def test_length_one_always_masked(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sample_mask(1, rng) == frozenset({0})

    def test_zero_length_empty(self):
        assert sample_mask(0, np.random.default_rng(0)) == frozenset()

    def test_deterministic_given_state(self):
        a = sample_mask(10, np.random.default_rng(42))
        b = sample_mask(10, np.random.default_rng(42))
        assert a == b

    def test_mask_count_uniform(self):
        rng = np.random.default_rng(5)
        counts = {m: 0 for m in range(1, 5)}
        n = 10_000
        for _ in range(n):
            counts[len(sample_mask(4, rng))] += 1
        for m in range(1, 5):
            assert abs(counts[m] / n - 0.25) < 0.02

    def test_positions_in_range_without_replacement(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            pos = sample_mask(7, rng)
            assert all(0 <= p < 7 for p in pos)
            assert 1 <= len(pos) <= 7


class TestMaskedSequence:
    def test_mask_position_must_hold_mask_id(self):
        with pytest.raises(ValueError):
            MaskedSequence((5, 6, 7), frozenset({1}), mask_id=99)

    def test_out_of_range_position(self):
        with pytest.raises(ValueError):
            MaskedSequence((99,), frozenset({3}), mask_id=99)

    def test_apply_mask(self):
        seq = apply_mask([4, 5, 6], [0, 2], mask_id=9)
        assert seq.ids == (9, 5, 9)
        assert seq.mask_positions == frozenset({0, 2})


class TestMaskedCe:
    def test_perfect_prediction_zero_loss(self):
        logits = Tensor(np.array([[100.0, 0.0, 0.0]]))
        loss = masked_ce(logits, [0], [0], None)
        assert float(loss.values) < 1e-12

    def test_uniform_logits_log_vocab(self):
        V = 11
        logits = Tensor(np.zeros((3, V)))
        loss = masked_ce(logits, [4, 5, 6], [0, 1, 2], None)
        assert abs(float(loss.values) - math.log(V)) < 1e-12

    def test_smoothed_target_matches_direct_summation(self):
        rng = np.random.default_rng(23)
        V = 12
        logits_np = rng.normal(size=(4, V))
        epsilon, n_similar = 0.1, 10

        def smooth(tid):
            q = np.zeros(V)
            q[tid] = 1.0 - epsilon
            others = [i for i in range(V) if i != tid][:n_similar]
            for i in others:
                q[i] = epsilon / n_similar
            return q

        targets = [3, 7, 1, 0]
        positions = [0, 2, 3]
        loss = masked_ce(Tensor(logits_np), targets, positions, smooth)

        logp = logits_np - np.log(np.exp(logits_np).sum(axis=1, keepdims=True))
        expected = -np.mean(
            [sum(smooth(targets[p])[v] * logp[p, v] for v in range(V)) for p in positions]
        )
        assert abs(float(loss.values) - expected) < 1e-10

    def test_empty_mask_error(self):
        with pytest.raises(EmptyMaskError):
            masked_ce(Tensor(np.zeros((2, 3))), [0, 1], [], None)

    def test_gradient(self):
        rng = np.random.default_rng(29)
        logits = Tensor(rng.normal(size=(3, 5)))
        assert ad.grad_check(lambda t: masked_ce(t, [1, 2, 3], [0, 2], None), logits) < 1e-6


class TestMatregLoss:
    def test_identical_matrices(self):
        w = Tensor(np.random.default_rng(1).normal(size=(6, 10)))
        assert abs(float(matreg_loss(w, w).values)) < 1e-12

    def test_negated_matrices(self):
        w = np.random.default_rng(2).normal(size=(6, 10))
        assert abs(float(matreg_loss(Tensor(w), Tensor(-w)).values) - 2.0) < 1e-12

    def test_orthogonal_columns(self):
        a = np.zeros((4, 3))
        b = np.zeros((4, 3))
        a[0, :] = 1.0
        b[1, :] = 1.0
        assert abs(float(matreg_loss(Tensor(a), Tensor(b)).values) - 1.0) < 1e-15

    def test_scale_invariance_exact_for_power_of_two(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        base = float(matreg_loss(Tensor(a), Tensor(b)).values)
        for c in (2.0, 0.5, 4.0):
            assert float(matreg_loss(Tensor(c * a), Tensor(b)).values) == base

    def test_scale_invariance_general(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        base = float(matreg_loss(Tensor(a), Tensor(b)).values)
        assert abs(float(matreg_loss(Tensor(1.7 * a), Tensor(b)).values) - base) < 1e-12

    def test_range(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            v = float(matreg_loss(Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))).values)
            assert 0.0 <= v <= 2.0

    def test_zero_column_scores_flat(self):
        a = np.random.default_rng(6).normal(size=(4, 3))
        b = a.copy()
        a[:, 1] = 0.0
        with pytest.warns(RuntimeWarning, match="zero-norm"):
            v = float(matreg_loss(Tensor(a), Tensor(b)).values)
        # two aligned columns (cos 1) plus one dead column (cos 0)
        assert abs(v - 1.0 / 3.0) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(7)
        b = Tensor(rng.normal(size=(4, 6)))
        assert ad.grad_check(lambda t: matreg_loss(t, b), Tensor(rng.normal(size=(4, 6)))) < 1e-6

    def test_descent_reduces_loss_ninety_percent(self):
        rng = np.random.default_rng(8)
        w_a = Tensor(rng.normal(size=(16, 40)))
        w_b = Tensor(rng.normal(size=(16, 40)))
        initial = float(matreg_loss(w_a, w_b).values)
        lr = 40.0  # the 1/|V| factor shrinks per-column gradients
        for _ in range(100):
            w_a.grad = None
            loss = matreg_loss(w_a, w_b)
            backward(loss)
            w_a.values = w_a.values - lr * w_a.grad
        final = float(matreg_loss(w_a, w_b).values)
        assert final <= 0.1 * initial


class TestCombinedLoss:
    def test_reference_arithmetic(self):
        cfg = LossConfig(alpha=0.3, beta=0.0)
        total = combined_loss(Tensor(1.0), Tensor(2.0), Tensor(2.0), None, cfg)
        assert abs(float(total.values) - 3.1) < 1e-12

    def test_alpha_one_keeps_ctc_only(self):
        cfg = LossConfig(alpha=1.0)
        total = combined_loss(Tensor(5.0), None, None, None, cfg)
        assert float(total.values) == 5.0

    def test_beta_zero_drops_regularizer(self):
        cfg = LossConfig(alpha=0.5, beta=0.0)
        total = combined_loss(Tensor(2.0), Tensor(2.0), Tensor(2.0), Tensor(1000.0), cfg)
        assert abs(float(total.values) - 3.0) < 1e-12

    def test_beta_weighting(self):
        cfg = LossConfig(alpha=0.3, beta=1e-4)
        total = combined_loss(Tensor(0.0), None, None, Tensor(2.0), cfg)
        assert abs(float(total.values) - 2e-4) < 1e-18

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=1.5)
        with pytest.raises(ValueError):
            LossConfig(beta=-1.0)
        with pytest.raises(ValueError):
            LossConfig(smoothing="banana")
