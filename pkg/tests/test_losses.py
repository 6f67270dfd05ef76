import itertools
import math

import numpy as np
import pytest
import torch

from conftest import enumerate_ctc_neg_log_prob
from decred.losses import (
    InfeasibleTargetError,
    LossConfig,
    batch_ctc_loss,
    composite_loss,
    ctc_loss,
    decred_loss,
    masked_smoothed_ce,
)


def _random_log_probs(T, V, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((T, V))
    return torch.log_softmax(torch.from_numpy(logits), dim=-1)


class TestCtcOracle:
    def test_worked_uniform_case(self):
        # uniform per-frame distribution over 3 classes (blank + 2 labels),
        # 3 frames, 2-label target: five admissible paths of mass (1/3)^3
        lp = torch.full((3, 3), -math.log(3.0), dtype=torch.float64)
        loss = ctc_loss(lp, torch.tensor([1, 2]))
        assert abs(loss.item() - (-math.log(5.0 / 27.0))) < 1e-9

    def test_exhaustive_small_grid(self):
        # every feasible case with up to 4 frames, 4 classes, 3 labels,
        # against brute-force enumeration over all V^T frame paths
        V = 4
        labels = [1, 2, 3]
        targets = [()]
        for n in (1, 2, 3):
            targets += list(itertools.product(labels, repeat=n))
        for T in (1, 2, 3, 4):
            for seed in (0, 1):
                lp = _random_log_probs(T, V, seed=100 * T + seed)
                lp_np = lp.numpy()
                for y in targets:
                    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
                    tgt = torch.tensor(y, dtype=torch.long)
                    if len(y) + repeats > T:
                        with pytest.raises(InfeasibleTargetError):
                            ctc_loss(lp, tgt)
                        continue
                    got = ctc_loss(lp, tgt).item()
                    want = enumerate_ctc_neg_log_prob(lp_np, y)
                    assert abs(got - want) < 1e-6, (T, seed, y)

    def test_blank_in_target_rejected(self):
        lp = _random_log_probs(4, 4, seed=0)
        with pytest.raises(ValueError):
            ctc_loss(lp, torch.tensor([1, 0, 2]))

    def test_single_frame_single_label(self):
        lp = _random_log_probs(1, 4, seed=3)
        loss = ctc_loss(lp, torch.tensor([2]))
        assert abs(loss.item() + lp[0, 2].item()) < 1e-12


class TestBatchCtc:
    def test_matches_per_utterance(self):
        rng = np.random.default_rng(7)
        V = 6
        lens = [5, 3, 7, 4]
        targets = [torch.tensor(t) for t in ([2, 3], [5], [2, 2, 4], [3, 5, 3])]
        T_max = max(lens)
        lp = torch.full((len(lens), T_max, V), 0.0, dtype=torch.float64)
        for b, T in enumerate(lens):
            lp[b, :T] = torch.log_softmax(torch.from_numpy(rng.standard_normal((T, V))), dim=-1)
        batched = batch_ctc_loss(lp, torch.tensor(lens), targets)
        singles = [ctc_loss(lp[b, :T], targets[b]) for b, T in enumerate(lens)]
        want = torch.stack(singles).sum() / len(lens)
        assert abs(batched.item() - want.item()) < 1e-10

    def test_infeasible_item_rejected(self):
        lp = torch.log_softmax(torch.zeros(2, 3, 4, dtype=torch.float64), dim=-1)
        with pytest.raises(InfeasibleTargetError):
            batch_ctc_loss(lp, torch.tensor([3, 2]), [torch.tensor([1, 2]), torch.tensor([1, 1])])

    def test_gradient_flows_only_to_active_frames(self):
        lp = torch.log_softmax(
            torch.randn(1, 5, 4, dtype=torch.float64).requires_grad_(True), dim=-1
        )
        loss = batch_ctc_loss(lp, torch.tensor([3]), [torch.tensor([1, 2])])
        (g,) = torch.autograd.grad(loss, lp)
        assert g[0, 3:].abs().max().item() == 0.0
        assert g[0, :3].abs().max().item() > 0.0


class TestMaskedSmoothedCe:
    def test_uniform_logits_log_vocab(self):
        V = 7
        logits = torch.zeros(5, V, dtype=torch.float64)
        targets = torch.tensor([5, 6, 5, 6, 5])
        s, n = masked_smoothed_ce(logits, targets, smoothing=0.0)
        assert int(n) == 5
        assert abs(s.item() / 5 - math.log(V)) < 1e-12

    def test_mask_and_pad_excluded(self):
        V = 6
        logits = torch.randn(4, V, dtype=torch.float64)
        targets = torch.tensor([5, 4, 1, 5])  # MASK=4 and PAD=1 skipped
        s, n = masked_smoothed_ce(logits, targets, smoothing=0.0)
        assert int(n) == 2
        logp = torch.log_softmax(logits, dim=-1)
        want = -(logp[0, 5] + logp[3, 5])
        assert abs(s.item() - want.item()) < 1e-12

    def test_all_masked_warns_and_zero(self):
        logits = torch.randn(3, 6, dtype=torch.float64)
        targets = torch.tensor([4, 4, 1])
        with pytest.warns(UserWarning):
            s, n = masked_smoothed_ce(logits, targets, smoothing=0.1)
        assert s.item() == 0.0
        assert int(n) == 0

    def test_smoothing_formula(self):
        V = 5
        logits = torch.randn(3, V, dtype=torch.float64)
        targets = torch.tensor([2, 3, 3])  # avoid MASK/PAD ids
        smoothing = 0.2
        s, n = masked_smoothed_ce(logits, targets, smoothing=smoothing)
        logp = torch.log_softmax(logits, dim=-1)
        want = 0.0
        for i, t in enumerate(targets.tolist()):
            nll = -logp[i, t]
            off = -(logp[i].sum() - logp[i, t]) / (V - 1)
            want += (1 - smoothing) * nll + smoothing * off
        assert abs(s.item() - want.item()) < 1e-12

    def test_masked_positions_get_zero_gradient(self):
        logits = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
        targets = torch.tensor([5, 4, 5, 1])
        s, n = masked_smoothed_ce(logits, targets, smoothing=0.1)
        (s / n).backward()
        assert logits.grad[1].abs().max().item() == 0.0
        assert logits.grad[3].abs().max().item() == 0.0
        assert logits.grad[0].abs().max().item() > 0.0


class TestLossConfig:
    def test_betas_must_sum_to_one(self):
        with pytest.raises(ValueError):
            LossConfig(betas={2: 0.5, 4: 0.6})

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(betas={2: -0.1, 4: 1.1})

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=1.5)

    def test_smoothing_range(self):
        with pytest.raises(ValueError):
            LossConfig(label_smoothing=1.0)


class TestDecredLoss:
    def _taps(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        return {
            2: torch.randn(2, 5, 8, generator=g, dtype=torch.float64),
            4: torch.randn(2, 5, 8, generator=g, dtype=torch.float64),
        }

    def test_beta_weighted_sum(self):
        taps = self._taps()
        targets = torch.randint(5, 8, (2, 5))
        cfg = LossConfig(alpha=0.3, betas={2: 0.4, 4: 0.6}, label_smoothing=0.1)
        loss, per_tap = decred_loss(taps, targets, cfg)
        want = 0.4 * per_tap[2] + 0.6 * per_tap[4]
        assert abs(loss.item() - want.item()) < 1e-12

    def test_zero_beta_tap_skipped(self):
        taps = self._taps()
        targets = torch.randint(5, 8, (2, 5))
        cfg = LossConfig(betas={2: 0.0, 4: 1.0})
        loss, per_tap = decred_loss(taps, targets, cfg)
        assert 2 not in per_tap
        only_last, _ = decred_loss({4: taps[4]}, targets, LossConfig(betas={4: 1.0}))
        assert loss.item() == only_last.item()

    def test_missing_tap_rejected(self):
        taps = self._taps()
        targets = torch.randint(5, 8, (2, 5))
        with pytest.raises(ValueError):
            decred_loss(taps, targets, LossConfig(betas={3: 1.0}))


class TestCompositeLoss:
    def test_mix(self):
        ctc = torch.tensor(2.0)
        dec = torch.tensor(4.0)
        assert composite_loss(ctc, dec, 0.25).item() == pytest.approx(0.25 * 2 + 0.75 * 4)

    def test_endpoints(self):
        ctc = torch.tensor(3.0)
        dec = torch.tensor(5.0)
        assert composite_loss(ctc, dec, 1.0).item() == 3.0
        assert composite_loss(ctc, dec, 0.0).item() == 5.0

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            composite_loss(torch.tensor(1.0), torch.tensor(1.0), -0.1)


class TestLossGradients:
    """Finite-difference checks for each loss in isolation (64-bit)."""

    def _fd_check(self, loss_fn, param, eps=1e-6, tol=1e-4):
        from decred.model import grad_check

        err = grad_check(loss_fn, [("p", param)], eps=eps, max_entries=6)
        assert err < tol, err

    def test_ctc_loss_gradient(self):
        torch.manual_seed(0)
        p = torch.nn.Parameter(torch.randn(5, 4, dtype=torch.float64))
        target = torch.tensor([1, 2, 1])

        def loss_fn():
            return ctc_loss(torch.log_softmax(p, dim=-1), target)

        self._fd_check(loss_fn, p)

    def test_batch_ctc_loss_gradient(self):
        torch.manual_seed(1)
        p = torch.nn.Parameter(torch.randn(2, 4, 5, dtype=torch.float64))
        targets = [torch.tensor([2, 3]), torch.tensor([1])]

        def loss_fn():
            return batch_ctc_loss(torch.log_softmax(p, dim=-1), torch.tensor([4, 3]), targets)

        self._fd_check(loss_fn, p)

    def test_masked_ce_gradient(self):
        torch.manual_seed(2)
        p = torch.nn.Parameter(torch.randn(6, 7, dtype=torch.float64))
        targets = torch.tensor([5, 6, 4, 5, 1, 6])

        def loss_fn():
            s, n = masked_smoothed_ce(p, targets, smoothing=0.1)
            return s / n

        self._fd_check(loss_fn, p)

    def test_composite_gradient(self):
        torch.manual_seed(3)
        p = torch.nn.Parameter(torch.randn(4, 5, dtype=torch.float64))
        target = torch.tensor([2, 3])
        ce_targets = torch.tensor([2, 3, 1, 4])
        cfg = LossConfig(alpha=0.3, betas={1: 1.0}, label_smoothing=0.1)

        def loss_fn():
            ctc = ctc_loss(torch.log_softmax(p, dim=-1), target)
            dec, _ = decred_loss({1: p}, ce_targets, cfg)
            return composite_loss(ctc, dec, cfg.alpha)

        self._fd_check(loss_fn, p)
