"""Auto-regressive search: greedy and beam decoding with joint CTC/attention
scoring, last-layer / weighted-sum / early-exit logit fusion, and decode-time
benchmarking."""

import time
from dataclasses import dataclass

import numpy as np
import torch

from .data import BLANK_ID, PAD_ID, BOS_ID, EOS_ID, MASK_ID
from .model import Model


@dataclass
class DecodeConfig:
    lambda_weight: float = 0.3
    fusion: str = "last_layer"  # last_layer | weighted_sum | early_exit
    early_exit_layer: int | None = None
    beam_width: int = 1
    max_len_ratio: float = 1.0
    min_max_len: int = 8  # absolute floor on the output cap
    candidate_k: int = 8  # attention top-K pruned before CTC prefix scoring

    def __post_init__(self):
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ValueError("lambda must be in [0,1]")
        if self.fusion not in ("last_layer", "weighted_sum", "early_exit"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.fusion == "early_exit" and self.early_exit_layer is None:
            raise ValueError("early_exit fusion requires early_exit_layer")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


class FusionWeights:
    """Per-tap vocabulary-sized mixing vectors for weighted-sum fusion."""

    def __init__(self, vectors: dict[int, torch.Tensor]):
        self.vectors = {d: v.detach().clone() for d, v in vectors.items()}

    @classmethod
    def one_hot(cls, taps: tuple[int, ...], vocab_size: int, hot_tap: int) -> "FusionWeights":
        return cls(
            {d: torch.ones(vocab_size) if d == hot_tap else torch.zeros(vocab_size) for d in taps}
        )

    def to_dict(self) -> dict:
        return {str(d): v.tolist() for d, v in self.vectors.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionWeights":
        return cls({int(k): torch.tensor(v, dtype=torch.float32) for k, v in d.items()})


def fuse_logits(tap_logits: dict[int, torch.Tensor], cfg: DecodeConfig, last_layer: int, v: FusionWeights | None) -> torch.Tensor:
    """Combine tap logits into one logit tensor according to the fusion mode.

    weighted-sum with a one-hot v degenerates bitwise to the corresponding
    single-tap mode (0*x + 1*y == y in IEEE arithmetic for finite logits).
    """
    if cfg.fusion == "last_layer":
        return tap_logits[last_layer]
    if cfg.fusion == "early_exit":
        if cfg.early_exit_layer not in tap_logits:
            raise ValueError(f"no tap at layer {cfg.early_exit_layer}")
        return tap_logits[cfg.early_exit_layer]
    if v is None:
        raise ValueError("weighted_sum fusion requires fusion weights")
    total = None
    for d in sorted(tap_logits):
        if d not in v.vectors:
            raise ValueError(f"missing fusion weights for tap {d}")
        term = v.vectors[d].to(tap_logits[d].dtype) * tap_logits[d]
        total = term if total is None else total + term
    return total


def fuse_step(tap_logits: dict[int, torch.Tensor], cfg: DecodeConfig, last_layer: int, v: FusionWeights | None = None) -> torch.Tensor:
    """Log-distribution over the vocabulary for one decoding position."""
    return torch.log_softmax(fuse_logits(tap_logits, cfg, last_layer, v), dim=-1)


@dataclass
class CtcPrefixState:
    """Forward variables of one prefix: log-probs that frames 0..t emit the
    prefix exactly, split by whether frame t is the final non-blank label
    (r_n) or a trailing blank (r_b); psi is the prefix log-probability."""

    last_token: int
    r_n: np.ndarray  # (T,)
    r_b: np.ndarray  # (T,)
    psi: float


class CtcPrefixScorer:
    """Incremental prefix scoring over one utterance's CTC log-probs
    (float64, frames x vocab), Hori-style two-component recursion."""

    def __init__(self, log_probs: np.ndarray):
        self.x = np.asarray(log_probs, dtype=np.float64)
        self.T, self.V = self.x.shape
        self.blank = self.x[:, BLANK_ID]

    def initial_state(self) -> CtcPrefixState:
        r_b = np.cumsum(self.blank)
        r_n = np.full(self.T, -np.inf)
        return CtcPrefixState(last_token=-1, r_n=r_n, r_b=r_b, psi=0.0)

    def step(self, state: CtcPrefixState):
        """Score all candidate extensions of the state's prefix at once.

        Returns (scores, r_n_all, r_b_all, psi_all): scores[c] is the
        incremental log prefix probability of appending c; scores[EOS] is
        the completed-sequence score of the prefix itself. Blank and PAD
        are -inf.
        """
        T, V = self.T, self.V
        x = self.x
        empty = state.last_token == -1

        # log_phi[t, c]: prefix ended before frame t+1 emits its new label c
        with np.errstate(invalid="ignore"):
            base = np.logaddexp(state.r_b, state.r_n)
        log_phi = np.repeat(base[:, None], V, axis=1)
        if state.last_token >= 0:
            log_phi[:, state.last_token] = state.r_b

        r_n_all = np.full((T, V), -np.inf)
        psi_terms = np.full((T, V), -np.inf)
        r_n_all[0] = x[0] if empty else -np.inf
        psi_terms[0] = r_n_all[0]
        for t in range(1, T):
            r_n_all[t] = np.logaddexp(r_n_all[t - 1], log_phi[t - 1]) + x[t]
            psi_terms[t] = log_phi[t - 1] + x[t]
        with np.errstate(invalid="ignore"):
            psi_all = _logsumexp_axis0(psi_terms)

        r_b_all = np.full((T, V), -np.inf)
        for t in range(1, T):
            r_b_all[t] = np.logaddexp(r_b_all[t - 1], r_n_all[t - 1]) + self.blank[t]

        scores = psi_all - state.psi
        scores[BLANK_ID] = -np.inf
        scores[PAD_ID] = -np.inf
        # EOS closes the hypothesis: completed-sequence probability of the prefix
        completed = np.logaddexp(state.r_n[-1], state.r_b[-1]) if not empty else state.r_b[-1]
        scores[EOS_ID] = completed - state.psi
        return scores, r_n_all, r_b_all, psi_all

    def select(self, scores_ctx, token: int, state: CtcPrefixState) -> CtcPrefixState:
        _, r_n_all, r_b_all, psi_all = scores_ctx
        return CtcPrefixState(
            last_token=token,
            r_n=r_n_all[:, token].copy(),
            r_b=r_b_all[:, token].copy(),
            psi=float(psi_all[token]),
        )


def _logsumexp_axis0(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=0)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), m + np.log(np.sum(np.exp(a - shift), axis=0)), m)


@dataclass
class Hypothesis:
    tokens: list[int]  # BOS-prefixed
    attn_logp: float = 0.0
    ctc_logp: float = 0.0
    ctc_state: CtcPrefixState | None = None
    joint_logp: float = 0.0
    finished: bool = False
    n_steps: int = 0

    def text_tokens(self) -> list[int]:
        toks = self.tokens[1:]
        if toks and toks[-1] == EOS_ID:
            toks = toks[:-1]
        return toks


_FORBIDDEN = (BLANK_ID, PAD_ID, BOS_ID, MASK_ID)


def _decoder_upto(cfg: DecodeConfig, model_D: int) -> int | None:
    if cfg.fusion == "early_exit":
        return cfg.early_exit_layer
    if cfg.fusion == "last_layer":
        return model_D
    return None  # weighted_sum needs all taps


@torch.no_grad()
def beam_decode(model: Model, enc: torch.Tensor, enc_len: int, cfg: DecodeConfig, v: FusionWeights | None = None) -> list[Hypothesis]:
    """Beam search over joint scores; returns the n-best finished hypotheses
    sorted by joint log-probability (descending)."""
    model.eval()
    D = model.cfg.D
    lam = cfg.lambda_weight
    upto = _decoder_upto(cfg, D)
    max_len = max(cfg.min_max_len, int(cfg.max_len_ratio * enc_len))

    scorer = None
    if lam > 0.0:
        ctc_lp = model.ctc_log_probs(enc[:, :enc_len])[0].double().cpu().numpy()
        scorer = CtcPrefixScorer(ctc_lp)

    init = Hypothesis(tokens=[BOS_ID], ctc_state=scorer.initial_state() if scorer else None)
    active = [init]
    pool: list[Hypothesis] = []
    k = max(cfg.candidate_k, cfg.beam_width)

    for step in range(max_len):
        tokens = torch.tensor([h.tokens for h in active], dtype=torch.long)
        enc_b = enc[:, :enc_len].expand(len(active), -1, -1)
        enc_lens = torch.full((len(active),), enc_len, dtype=torch.long)
        hidden = model.decoder_hidden(tokens, enc_b, enc_lens, upto_layer=upto)
        taps = model.tap_logits(hidden)
        candidates = []
        for i, hyp in enumerate(active):
            logp = fuse_step({d: t[i, -1] for d, t in taps.items()}, cfg, D, v)
            attn = logp.double().cpu().numpy()
            allowed = attn.copy()
            allowed[list(_FORBIDDEN)] = -np.inf
            top = np.argsort(-allowed)[:k]
            if scorer is not None:
                ctx = scorer.step(hyp.ctc_state)
                ctc_scores = ctx[0]
            for c in top:
                c = int(c)
                if not np.isfinite(allowed[c]):
                    continue
                attn_logp = hyp.attn_logp + float(attn[c])
                if scorer is not None:
                    if not np.isfinite(ctc_scores[c]):
                        continue
                    ctc_logp = hyp.ctc_logp + float(ctc_scores[c])
                else:
                    ctc_logp = 0.0
                joint = lam * ctc_logp + (1.0 - lam) * attn_logp
                new_state = None
                if scorer is not None and c != EOS_ID:
                    new_state = scorer.select(ctx, c, hyp.ctc_state)
                candidates.append(
                    Hypothesis(
                        tokens=hyp.tokens + [c],
                        attn_logp=attn_logp,
                        ctc_logp=ctc_logp,
                        ctc_state=new_state,
                        joint_logp=joint,
                        finished=(c == EOS_ID),
                        n_steps=step + 1,
                    )
                )
        candidates.sort(key=lambda h: -h.joint_logp)
        selected = candidates[: cfg.beam_width]
        active = []
        for h in selected:
            (pool if h.finished else active).append(h)
        if not active:
            break
        if pool and max(p.joint_logp for p in pool) >= max(a.joint_logp for a in active):
            break

    if not pool:
        # length cap hit with nothing finished: close the actives as-is
        for h in active:
            h.finished = False
            pool.append(h)
    pool.sort(key=lambda h: -h.joint_logp)
    return pool


@torch.no_grad()
def greedy_decode(model: Model, enc: torch.Tensor, enc_len: int, cfg: DecodeConfig, v: FusionWeights | None = None) -> list[int]:
    """Joint greedy search: beam of width 1 over the same scoring."""
    from dataclasses import replace

    g_cfg = replace(cfg, beam_width=1)
    best = beam_decode(model, enc, enc_len, g_cfg, v)[0]
    return best.text_tokens()


@torch.no_grad()
def greedy_decode_batch(
    model: Model,
    feats_list: list[np.ndarray],
    cfg: DecodeConfig,
    v: FusionWeights | None = None,
    batch_size: int = 64,
) -> list[list[int]]:
    """Lockstep greedy decoding of many utterances; one decoder forward per
    step for a whole batch. Scoring matches greedy_decode."""
    model.eval()
    D = model.cfg.D
    lam = cfg.lambda_weight
    upto = _decoder_upto(cfg, D)
    results: list[list[int]] = []

    for start in range(0, len(feats_list), batch_size):
        chunk = feats_list[start : start + batch_size]
        B = len(chunk)
        T = max(f.shape[0] for f in chunk)
        feats = torch.zeros(B, T, chunk[0].shape[1])
        lens = torch.zeros(B, dtype=torch.long)
        for i, f in enumerate(chunk):
            feats[i, : f.shape[0]] = torch.from_numpy(np.ascontiguousarray(f, dtype=np.float32))
            lens[i] = f.shape[0]
        enc, enc_lens = model.encode(feats, lens)

        scorers: list[CtcPrefixScorer | None] = [None] * B
        states: list[CtcPrefixState | None] = [None] * B
        if lam > 0.0:
            ctc_lp = model.ctc_log_probs(enc).double().cpu().numpy()
            for i in range(B):
                scorers[i] = CtcPrefixScorer(ctc_lp[i, : int(enc_lens[i])])
                states[i] = scorers[i].initial_state()

        prefixes = [[BOS_ID] for _ in range(B)]
        attn_cum = [0.0] * B
        ctc_cum = [0.0] * B
        done = [False] * B
        caps = [max(cfg.min_max_len, int(cfg.max_len_ratio * int(enc_lens[i]))) for i in range(B)]
        k = cfg.candidate_k

        for step in range(max(caps)):
            active = [i for i in range(B) if not done[i] and step < caps[i]]
            for i in range(B):
                if not done[i] and step >= caps[i]:
                    done[i] = True
            if not active:
                break
            tokens = torch.tensor([prefixes[i] for i in active], dtype=torch.long)
            hidden = model.decoder_hidden(tokens, enc[active], enc_lens[active], upto_layer=upto)
            taps = model.tap_logits(hidden)
            step_logits = {d: t[:, -1] for d, t in taps.items()}
            logp = fuse_step(step_logits, cfg, D, v).double().cpu().numpy()
            for row, i in enumerate(active):
                allowed = logp[row].copy()
                allowed[list(_FORBIDDEN)] = -np.inf
                top = np.argsort(-allowed)[:k]
                if lam > 0.0:
                    ctx = scorers[i].step(states[i])
                    joint = [
                        lam * (ctc_cum[i] + ctx[0][c]) + (1 - lam) * (attn_cum[i] + allowed[c])
                        for c in top
                    ]
                else:
                    joint = [attn_cum[i] + allowed[c] for c in top]
                best = int(top[int(np.argmax(joint))])
                attn_cum[i] += float(allowed[best])
                if lam > 0.0:
                    ctc_cum[i] += float(ctx[0][best])
                    if best != EOS_ID:
                        states[i] = scorers[i].select(ctx, best, states[i])
                prefixes[i].append(best)
                if best == EOS_ID:
                    done[i] = True

        for i in range(B):
            toks = prefixes[i][1:]
            if toks and toks[-1] == EOS_ID:
                toks = toks[:-1]
            results.append(toks)
    return results


@torch.no_grad()
def decode_utterance(model: Model, features: np.ndarray, cfg: DecodeConfig, v: FusionWeights | None = None) -> Hypothesis:
    model.eval()
    feats = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32)).unsqueeze(0)
    lens = torch.tensor([features.shape[0]], dtype=torch.long)
    enc, enc_lens = model.encode(feats, lens)
    return beam_decode(model, enc, int(enc_lens[0]), cfg, v)[0]


def bench_decode(model: Model, utterances, tokenizer, cfg: DecodeConfig, v: FusionWeights | None = None, model_name: str = "model"):
    """Time per-utterance decoding and score WER; one report row per call."""
    from .evaluate import corpus_wer

    if not utterances:
        return []
    times = []
    refs, hyps = {}, {}
    for u in utterances:
        t0 = time.perf_counter()
        hyp = decode_utterance(model, u.features, cfg, v)
        times.append(time.perf_counter() - t0)
        refs[u.id] = u.transcript
        hyps[u.id] = tokenizer.decode(hyp.text_tokens())
    wer, _ = corpus_wer(refs, hyps)
    fusion = cfg.fusion if cfg.fusion != "early_exit" else f"early_exit_{cfg.early_exit_layer}"
    return [
        {
            "model": model_name,
            "fusion": fusion,
            "lambda": cfg.lambda_weight,
            "beam": cfg.beam_width,
            "mean_sec": float(np.mean(times)),
            "macro_wer": wer,
        }
    ]
