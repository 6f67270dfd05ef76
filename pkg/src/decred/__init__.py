"""Decoder-centric regularized encoder-decoder ASR on a synthetic task:
composite CTC + multi-tap attention training, joint CTC/attention decoding
with logit fusion, zero-attention internal-LM probing, and bootstrap-based
WER evaluation."""

__version__ = "0.1.0"
