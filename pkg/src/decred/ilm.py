"""Zero-attention internal language model probing: next-token distributions
with cross-attention context zeroed out, and corpus perplexity reports."""

import math
from dataclasses import dataclass

import torch

from .data import BOS_ID, EOS_ID, Tokenizer
from .model import Model


@dataclass
class IlmReport:
    dataset: str
    tokens: int
    nll: float
    ppl: float
    per_utt: list[dict]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "tokens": self.tokens,
            "nll": self.nll,
            "ppl": self.ppl,
            "per_utt": self.per_utt,
        }


@torch.no_grad()
def ilm_next_logprobs(model: Model, prefix: torch.Tensor, tap: int | None = None) -> torch.Tensor:
    """Log-distribution over the vocabulary given the token prefix alone.

    Every cross-attention output is replaced by zero before its residual
    connection, so no encoder state is consulted. By default the final
    classifier is probed; a tap index selects an auxiliary classifier.
    """
    model.eval()
    if prefix.dim() == 1:
        prefix = prefix.unsqueeze(0)
    if int(prefix[0, 0]) != BOS_ID:
        raise ValueError("prefix must start with BOS")
    d = tap if tap is not None else model.cfg.D
    hidden = model.decoder_hidden(prefix, None, None, zero_cross=True, upto_layer=d)
    logits = model.tap_logits({d: hidden[d]})[d]
    return torch.log_softmax(logits[0, -1], dim=-1)


@torch.no_grad()
def ilm_perplexity(model: Model, corpus: list[tuple[str, str]], tokenizer: Tokenizer, dataset_name: str = "corpus", tap: int | None = None) -> IlmReport:
    """Teacher-forced zero-attention perplexity over (id, text) pairs.

    BOS conditions but is never predicted; EOS is a prediction target, so an
    utterance of k tokens contributes k+1 scored positions.
    """
    if not corpus:
        raise ValueError("empty corpus")
    model.eval()
    d = tap if tap is not None else model.cfg.D
    total_nll = 0.0
    total_tokens = 0
    per_utt = []
    for utt_id, text in corpus:
        ids = tokenizer.encode(text)
        inputs = torch.tensor([[BOS_ID] + ids], dtype=torch.long)
        targets = torch.tensor(ids + [EOS_ID], dtype=torch.long)
        hidden = model.decoder_hidden(inputs, None, None, zero_cross=True, upto_layer=d)
        logits = model.tap_logits({d: hidden[d]})[d][0]
        logp = torch.log_softmax(logits, dim=-1)
        nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1).sum().item()
        n = targets.numel()
        per_utt.append({"id": utt_id, "tokens": n, "nll": nll})
        total_nll += nll
        total_tokens += n
    return IlmReport(
        dataset=dataset_name,
        tokens=total_tokens,
        nll=total_nll,
        ppl=math.exp(total_nll / total_tokens),
        per_utt=per_utt,
    )
