"""Word error rate, bootstrap confidence intervals and pairwise bootstrap
significance testing."""

from dataclasses import dataclass

import numpy as np


@dataclass
class ScoredUtterance:
    id: str
    ref_words: int
    substitutions: int
    deletions: int
    insertions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / max(self.ref_words, 1)


@dataclass
class BootstrapResult:
    wer: float
    ci_low: float
    ci_high: float
    B: int
    alpha: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "ci": [self.ci_low, self.ci_high],
            "B": self.B,
            "alpha": self.alpha,
            "seed": self.seed,
        }


def edit_counts(ref: list[str], hyp: list[str]) -> tuple[int, int, int]:
    """Minimal (substitutions, deletions, insertions) via uniform-cost DP."""
    R, H = len(ref), len(hyp)
    # cell = (total, S, D, I) for ref[:i] vs hyp[:j]
    prev = [(j, 0, 0, j) for j in range(H + 1)]
    for i in range(1, R + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, H + 1):
            if ref[i - 1] == hyp[j - 1]:
                best = prev[j - 1]
            else:
                t, s, d, ins = prev[j - 1]
                best = (t + 1, s + 1, d, ins)
            t, s, d, ins = prev[j]
            if t + 1 < best[0]:
                best = (t + 1, s, d + 1, ins)
            t, s, d, ins = cur[j - 1]
            if t + 1 < best[0]:
                best = (t + 1, s, d, ins + 1)
            cur.append(best)
        prev = cur
    _, S, D, I = prev[H]
    return S, D, I


def score_utterance(utt_id: str, ref: str, hyp: str) -> ScoredUtterance:
    rw, hw = ref.split(), hyp.split()
    S, D, I = edit_counts(rw, hw)
    return ScoredUtterance(id=utt_id, ref_words=len(rw), substitutions=S, deletions=D, insertions=I)


def corpus_wer(refs: dict[str, str], hyps: dict[str, str]) -> tuple[float, list[ScoredUtterance]]:
    """Corpus WER = total errors / total reference words, plus the per-
    utterance breakdown. refs and hyps must cover the same ids."""
    if set(refs) != set(hyps):
        missing = set(refs) ^ set(hyps)
        raise ValueError(f"ref/hyp id mismatch: {sorted(missing)[:5]}")
    scored = [score_utterance(i, refs[i], hyps[i]) for i in sorted(refs)]
    total_err = sum(s.errors for s in scored)
    total_ref = sum(s.ref_words for s in scored)
    return total_err / max(total_ref, 1), scored


def _resample_wer(errors: np.ndarray, ref_words: np.ndarray, idx: np.ndarray) -> float:
    return float(errors[idx].sum() / max(ref_words[idx].sum(), 1))


def bootstrap_ci(scored: list[ScoredUtterance], B: int = 1000, alpha: float = 0.05, seed: int = 0) -> BootstrapResult:
    """Percentile bootstrap over utterances; each resample draws its own RNG
    from (seed, index) so resamples are order-independent and parallelizable."""
    if not scored:
        raise ValueError("empty utterance list")
    if B < 1:
        raise ValueError("B must be >= 1")
    errors = np.array([s.errors for s in scored], dtype=np.int64)
    ref_words = np.array([s.ref_words for s in scored], dtype=np.int64)
    n = len(scored)
    stats = np.empty(B)
    for b in range(B):
        rng = np.random.default_rng([seed, b])
        idx = rng.integers(0, n, n)
        stats[b] = _resample_wer(errors, ref_words, idx)
    point = float(errors.sum() / max(ref_words.sum(), 1))
    lo = float(np.percentile(stats, 100 * alpha / 2))
    hi = float(np.percentile(stats, 100 * (1 - alpha / 2)))
    return BootstrapResult(wer=point, ci_low=lo, ci_high=hi, B=B, alpha=alpha, seed=seed)


def paired_bootstrap(scored_a: list[ScoredUtterance], scored_b: list[ScoredUtterance], B: int = 1000, seed: int = 0) -> float:
    """Probability that system A is not better than system B, estimated by
    joint resampling of matched utterances. Ties count half."""
    ids_a = [s.id for s in scored_a]
    ids_b = [s.id for s in scored_b]
    if sorted(ids_a) != sorted(ids_b):
        raise ValueError("paired bootstrap requires identical utterance ids")
    a = {s.id: s for s in scored_a}
    b = {s.id: s for s in scored_b}
    ids = sorted(ids_a)
    err_a = np.array([a[i].errors for i in ids], dtype=np.int64)
    err_b = np.array([b[i].errors for i in ids], dtype=np.int64)
    ref_a = np.array([a[i].ref_words for i in ids], dtype=np.int64)
    ref_b = np.array([b[i].ref_words for i in ids], dtype=np.int64)
    n = len(ids)
    worse = 0.0
    for k in range(B):
        rng = np.random.default_rng([seed, k])
        idx = rng.integers(0, n, n)
        delta = _resample_wer(err_a, ref_a, idx) - _resample_wer(err_b, ref_b, idx)
        if delta > 0:
            worse += 1.0
        elif delta == 0:
            worse += 0.5
    return (worse + 1.0) / (B + 1.0)


def macro_wer(corpus_wers: list[float]) -> float:
    """Unweighted mean of per-dataset corpus WERs."""
    if not corpus_wers:
        raise ValueError("no datasets")
    return float(np.mean(corpus_wers))
