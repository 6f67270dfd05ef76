"""Training objectives: log-space CTC forward loss, masked label-smoothed
cross-entropy, the multi-tap decoder loss and the composite objective."""

import warnings
from dataclasses import dataclass, field

import torch

from .data import BLANK_ID, PAD_ID, MASK_ID

NEG_INF = -1e30  # I/O sentinel only; never fed into log-sum-exp chains


class InfeasibleTargetError(ValueError):
    """Target cannot be aligned to the available frames (|y| + repeats > T')."""


@dataclass
class LossConfig:
    alpha: float = 0.3
    betas: dict[int, float] = field(default_factory=lambda: {2: 0.4, 4: 0.6})
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0,1)")
        if any(b < 0 for b in self.betas.values()):
            raise ValueError("all betas must be >= 0")
        total = sum(self.betas.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"betas must sum to 1 (got {total})")


def ctc_loss(log_probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Negative log marginal over all blank-augmented alignments.

    log_probs: (T', V) normalized per frame; target: (N,) label ids with no
    blank/PAD/BOS/EOS. Standard 2N+1-state forward recursion in log space.
    """
    T = log_probs.size(0)
    y = target.tolist()
    if any(t == BLANK_ID for t in y):
        raise ValueError("target must not contain blank")
    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
    if len(y) + repeats > T:
        raise InfeasibleTargetError(f"target length {len(y)} (+{repeats} repeats) exceeds {T} frames")

    S = 2 * len(y) + 1
    labels = [BLANK_ID] * S
    labels[1::2] = y
    lab = torch.tensor(labels, device=log_probs.device)

    # unreachable states carry a finite sentinel: exact -inf makes the
    # logsumexp backward produce NaN, while exp(NEG_INF - x) underflows to an
    # exact zero in both value and gradient
    neg = log_probs.new_tensor(NEG_INF)

    # alpha[s]: log prob of emitting labels[:s+1] pattern by current frame
    alpha = log_probs.new_full((S,), NEG_INF)
    alpha[0] = log_probs[0, BLANK_ID]
    if S > 1:
        alpha[1] = log_probs[0, lab[1]]
    for t in range(1, T):
        stay = alpha
        prev1 = torch.cat([neg.view(1), alpha[:-1]])
        cand = torch.stack([stay, prev1])
        if S > 2:
            prev2 = torch.cat([neg.expand(2), alpha[:-2]])
            # skip transition allowed only into a non-blank differing from labels[s-2]
            skip_ok = (lab[2:] != BLANK_ID) & (lab[2:] != lab[:-2])
            prev2 = torch.where(
                torch.cat([torch.zeros(2, dtype=torch.bool, device=lab.device), skip_ok]),
                prev2,
                neg.expand(S),
            )
            cand = torch.cat([cand, prev2.unsqueeze(0)])
        alpha = torch.logsumexp(cand, dim=0) + log_probs[t, lab]
        alpha = torch.clamp(alpha, min=NEG_INF)
    total = torch.logsumexp(alpha[-2:], dim=0) if S > 1 else alpha[-1]
    return -total


def masked_smoothed_ce(
    logits: torch.Tensor,
    targets: torch.Tensor,
    smoothing: float = 0.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Label-smoothed cross-entropy over next-token targets.

    logits: (..., V); targets: (...) ids aligned with positions. Positions
    whose target is MASK or PAD contribute nothing and are excluded from the
    count. Returns (summed loss, counted positions); callers divide to get
    the mean so batches can be pooled with a stable denominator.
    """
    V = logits.size(-1)
    logp = torch.log_softmax(logits, dim=-1)
    counted = (targets != MASK_ID) & (targets != PAD_ID)
    n = counted.sum()
    if n.item() == 0:
        warnings.warn("masked_smoothed_ce: all positions masked; loss defined as 0")
        return logits.sum() * 0.0, n
    safe_targets = targets.masked_fill(~counted, 0)
    nll = -logp.gather(-1, safe_targets.unsqueeze(-1)).squeeze(-1)
    if smoothing > 0.0:
        smooth = -(logp.sum(-1) - logp.gather(-1, safe_targets.unsqueeze(-1)).squeeze(-1)) / (V - 1)
        per_pos = (1.0 - smoothing) * nll + smoothing * smooth
    else:
        per_pos = nll
    return (per_pos * counted.to(per_pos.dtype)).sum(), n


def decred_loss(
    tap_logits: dict[int, torch.Tensor],
    targets: torch.Tensor,
    cfg: LossConfig,
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Beta-weighted sum of per-tap smoothed cross-entropies (mean per counted
    position). Taps with beta 0 are skipped. Returns (loss, per-tap means)."""
    if not set(cfg.betas) <= set(tap_logits):
        missing = set(cfg.betas) - set(tap_logits)
        raise ValueError(f"betas reference unavailable taps: {sorted(missing)}")
    total = None
    per_tap = {}
    for d, beta in sorted(cfg.betas.items()):
        if beta == 0.0:
            continue
        s, n = masked_smoothed_ce(tap_logits[d], targets, cfg.label_smoothing)
        mean = s / n.clamp(min=1)
        per_tap[d] = mean
        total = beta * mean if total is None else total + beta * mean
    if total is None:
        raise ValueError("all betas are zero")
    return total, per_tap


def composite_loss(ctc: torch.Tensor, decred: torch.Tensor, alpha: float) -> torch.Tensor:
    """alpha-weighted mix of the CTC and attention-side losses."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    return alpha * ctc + (1.0 - alpha) * decred


def batch_ctc_loss(log_probs: torch.Tensor, enc_lens: torch.Tensor, targets: list[torch.Tensor]) -> torch.Tensor:
    """Per-utterance CTC losses summed and divided by batch size.

    Vectorized over the batch with one lattice sweep per frame; agrees with
    per-utterance ctc_loss (which stays as the oracle-checked reference).
    """
    B = len(targets)
    device = log_probs.device
    tgt_lens = [t.numel() for t in targets]
    for b, tgt in enumerate(targets):
        y = tgt.tolist()
        if any(c == BLANK_ID for c in y):
            raise ValueError("target must not contain blank")
        repeats = sum(1 for a, c in zip(y, y[1:]) if a == c)
        if len(y) + repeats > int(enc_lens[b]):
            raise InfeasibleTargetError(
                f"batch item {b}: target length {len(y)} (+{repeats} repeats) exceeds {int(enc_lens[b])} frames"
            )

    S_max = 2 * max(tgt_lens) + 1
    lab = torch.full((B, S_max), BLANK_ID, dtype=torch.long, device=device)
    for b, tgt in enumerate(targets):
        lab[b, 1 : 2 * tgt_lens[b] : 2] = tgt
    skip_ok = torch.zeros(B, S_max, dtype=torch.bool, device=device)
    skip_ok[:, 2:] = (lab[:, 2:] != BLANK_ID) & (lab[:, 2:] != lab[:, :-2])
    s_index = torch.arange(S_max, device=device).unsqueeze(0)
    s_lens = torch.tensor([2 * n + 1 for n in tgt_lens], device=device).unsqueeze(1)
    valid_state = s_index < s_lens

    T_max = log_probs.size(1)
    emit = log_probs.gather(2, lab.unsqueeze(1).expand(B, T_max, S_max))  # (B, T, S)

    neg = log_probs.new_tensor(NEG_INF)
    alpha = log_probs.new_full((B, S_max), NEG_INF)
    alpha[:, 0] = emit[:, 0, 0]
    if S_max > 1:
        alpha[:, 1] = emit[:, 0, 1]
    alpha = torch.where(valid_state, alpha, neg)
    for t in range(1, T_max):
        prev1 = torch.cat([neg.expand(B, 1), alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg.expand(B, 2), alpha[:, :-2]], dim=1)
        prev2 = torch.where(skip_ok, prev2, neg.expand(B, S_max))
        new_alpha = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        new_alpha = torch.clamp(new_alpha, min=NEG_INF)
        active = (t < enc_lens.to(device)).unsqueeze(1)
        alpha = torch.where(active & valid_state, new_alpha, alpha)

    final_idx = torch.stack([s_lens.squeeze(1) - 1, (s_lens.squeeze(1) - 2).clamp(min=0)], dim=1)
    final = alpha.gather(1, final_idx)
    # a single-state lattice (empty target) has no second final state
    final = torch.where(
        torch.tensor([[True, n > 0] for n in tgt_lens], device=device), final, neg.expand(B, 2)
    )
    total = torch.logsumexp(final, dim=1)
    return -total.sum() / B
