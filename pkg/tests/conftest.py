import itertools

import numpy as np
import pytest
import torch

from decred.data import BLANK_ID, SynthSpec, synth_generate
from decred.model import ModelConfig, build_model

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth_generate(SynthSpec(vocab_size=8, n_utts=12, len_range=(2, 5), feat_dim=12), seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    cfg = ModelConfig(vocab_size=tiny_dataset.tokenizer.vocab_size, feat_dim=12)
    model = build_model(cfg, seed=1)
    model.eval()
    return model


def collapse(path):
    out, prev = [], None
    for p in path:
        if p != prev and p != BLANK_ID:
            out.append(p)
        prev = p
    return tuple(out)


def enumerate_ctc_neg_log_prob(log_probs: np.ndarray, target) -> float:
    """Brute-force CTC oracle: sum path probabilities over every frame-level
    path whose collapse equals the target."""
    T, V = log_probs.shape
    total = -np.inf
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == tuple(target):
            total = np.logaddexp(total, sum(log_probs[t, c] for t, c in enumerate(path)))
    return -total


def label_sequence_log_probs(log_probs: np.ndarray) -> dict:
    """Brute-force map: collapsed label sequence -> total path log-prob."""
    T, V = log_probs.shape
    out = {}
    for path in itertools.product(range(V), repeat=T):
        lab = collapse(path)
        p = sum(log_probs[t, c] for t, c in enumerate(path))
        out[lab] = np.logaddexp(out.get(lab, -np.inf), p)
    return out
