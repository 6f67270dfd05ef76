"""Encoder-decoder model: convolutional subsampling, encoder stack (plain or
branch variant), decoder stack with auxiliary classifier taps, CTC head,
checkpointing and finite-difference gradient verification."""

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .utils import derive_seed


@dataclass
class ModelConfig:
    E: int = 2
    D: int = 4
    d_model: int = 64
    d_ff: int = 256
    heads: int = 2
    dropout: float = 0.1
    feat_dim: int = 16
    vocab_size: int = 23  # incl. specials and blank
    taps: tuple[int, ...] = (2, 4)
    encoder_block: str = "plain"  # plain | branch
    max_positions: int = 2048

    def __post_init__(self):
        self.taps = tuple(sorted(self.taps))
        if not self.taps or self.taps[-1] != self.D:
            raise ValueError("taps must include the last decoder layer D")
        if any(t < 1 or t > self.D for t in self.taps):
            raise ValueError("taps must lie in 1..D")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.encoder_block not in ("plain", "branch"):
            raise ValueError(f"unknown encoder_block {self.encoder_block!r}")


def subsampled_length(T: int) -> int:
    """Output length of the two stride-2 kernel-3 padding-1 convolutions."""
    t = (T - 1) // 2 + 1
    return (t - 1) // 2 + 1


def sinusoidal_table(max_len: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(max_len, d_model)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


def _length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(B, max_len) bool, True at padded positions."""
    ar = torch.arange(max_len, device=lengths.device)
    return ar.unsqueeze(0) >= lengths.unsqueeze(1)


class ConvSubsampler(nn.Module):
    """Two 2D convolutions (kernel 3, stride 2, padding 1) over (time, freq),
    then a linear projection to d_model. Padded frames are re-zeroed after
    each conv so batched and single-utterance outputs agree."""

    def __init__(self, feat_dim: int, d_model: int):
        super().__init__()
        self.conv1 = nn.Conv2d(1, d_model, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(d_model, d_model, 3, stride=2, padding=1)
        f1 = (feat_dim - 1) // 2 + 1
        f2 = (f1 - 1) // 2 + 1
        self.proj = nn.Linear(d_model * f2, d_model)

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor):
        # feats: (B, T, F)
        x = feats.unsqueeze(1)  # (B, 1, T, F)
        x = F.relu(self.conv1(x))
        l1 = (lengths - 1) // 2 + 1
        x = x.masked_fill(_length_mask(l1, x.size(2)).unsqueeze(1).unsqueeze(-1), 0.0)
        x = F.relu(self.conv2(x))
        l2 = (l1 - 1) // 2 + 1
        x = x.masked_fill(_length_mask(l2, x.size(2)).unsqueeze(1).unsqueeze(-1), 0.0)
        b, c, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        return self.proj(x), l2


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.w2(self.dropout(F.relu(self.w1(x))))


class EncoderBlock(nn.Module):
    """Post-LN self-attention + feedforward block; the branch variant adds a
    parallel gated depthwise-convolution path merged by concat + projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.variant = cfg.encoder_block
        self.attn = nn.MultiheadAttention(cfg.d_model, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)
        if self.variant == "branch":
            self.gate_in = nn.Linear(cfg.d_model, 2 * cfg.d_model)
            self.dwconv = nn.Conv1d(cfg.d_model, cfg.d_model, 7, padding=3, groups=cfg.d_model)
            self.gate_out = nn.Linear(cfg.d_model, cfg.d_model)
            self.merge = nn.Linear(2 * cfg.d_model, cfg.d_model)

    def forward(self, x, pad_mask):
        x = x.masked_fill(pad_mask.unsqueeze(-1), 0.0)
        a, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        if self.variant == "branch":
            g = F.glu(self.gate_in(x), dim=-1)
            g = g.masked_fill(pad_mask.unsqueeze(-1), 0.0)
            g = self.dwconv(g.transpose(1, 2)).transpose(1, 2)
            g = self.gate_out(g)
            a = self.merge(torch.cat([a, g], dim=-1))
        x = self.norm1(x + self.dropout(a))
        x = self.norm2(x + self.dropout(self.ff(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(cfg.d_model, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(cfg.d_model, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, enc, causal_mask, tgt_pad_mask, mem_pad_mask, zero_cross: bool):
        a, _ = self.self_attn(x, x, x, attn_mask=causal_mask, key_padding_mask=tgt_pad_mask, need_weights=False)
        x = self.norm1(x + self.dropout(a))
        if zero_cross:
            x = self.norm2(x)
        else:
            c, _ = self.cross_attn(x, enc, enc, key_padding_mask=mem_pad_mask, need_weights=False)
            x = self.norm2(x + self.dropout(c))
        x = self.norm3(x + self.dropout(self.ff(x)))
        return x


class Model(nn.Module):
    """Full encoder-decoder with CTC head and tapped decoder classifiers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.subsampler = ConvSubsampler(cfg.feat_dim, cfg.d_model)
        self.encoder = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.E))
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.D))
        self.ctc_proj = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.classifier = nn.Linear(cfg.d_model, cfg.vocab_size)
        # auxiliary taps are bias-free: exactly d_model x V extra parameters each
        self.aux_classifiers = nn.ModuleDict(
            {str(d): nn.Linear(cfg.d_model, cfg.vocab_size, bias=False) for d in cfg.taps if d != cfg.D}
        )
        self.dropout = nn.Dropout(cfg.dropout)
        self.register_buffer("pe", sinusoidal_table(cfg.max_positions, cfg.d_model), persistent=False)

    def encode(self, feats: torch.Tensor, lengths: torch.Tensor):
        """feats (B, T, F) -> encoder frames (B, T', d_model) and lengths."""
        if int(lengths.min()) < 4:
            raise ValueError("utterance too short for 4x subsampling (T >= 4 required)")
        x, enc_lens = self.subsampler(feats, lengths)
        x = self.dropout(x + self.pe[: x.size(1)].to(x.dtype))
        pad_mask = _length_mask(enc_lens, x.size(1))
        for block in self.encoder:
            x = block(x, pad_mask)
        x = x.masked_fill(pad_mask.unsqueeze(-1), 0.0)
        return x, enc_lens

    def ctc_log_probs(self, enc: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.ctc_proj(enc), dim=-1)

    def decoder_hidden(self, tokens, enc, enc_lens, token_lens=None, zero_cross=False, upto_layer=None):
        """Run decoder layers; returns {layer index: hidden states (B, N, d)} for taps.

        tokens are BOS-prefixed inputs; position n predicts token n+1.
        With zero_cross the cross-attention output is replaced by zeros, so
        the result depends on the token prefix alone.
        """
        n = tokens.size(1)
        if n > self.cfg.max_positions:
            raise ValueError(f"prefix length {n} exceeds positional table {self.cfg.max_positions}")
        x = self.embed(tokens) * math.sqrt(self.cfg.d_model)
        x = self.dropout(x + self.pe[:n].to(x.dtype))
        causal = torch.triu(torch.ones(n, n, dtype=torch.bool, device=tokens.device), diagonal=1)
        tgt_pad = None if token_lens is None else _length_mask(token_lens, n)
        mem_pad = None if enc is None else _length_mask(enc_lens, enc.size(1))
        last = upto_layer if upto_layer is not None else self.cfg.D
        hidden = {}
        for i, layer in enumerate(self.decoder[:last], start=1):
            x = layer(x, enc, causal, tgt_pad, mem_pad, zero_cross)
            if i in self.cfg.taps:
                hidden[i] = x
        return hidden

    def tap_logits(self, hidden: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        out = {}
        for d, h in hidden.items():
            if d == self.cfg.D:
                out[d] = self.classifier(h)
            else:
                out[d] = self.aux_classifiers[str(d)](h)
        return out

    def forward(self, feats, feat_lens, tokens, token_lens, zero_cross=False):
        enc, enc_lens = self.encode(feats, feat_lens)
        hidden = self.decoder_hidden(tokens, enc, enc_lens, token_lens, zero_cross=zero_cross)
        return self.tap_logits(hidden), self.ctc_log_probs(enc), enc_lens


def init_parameters(model: Model, seed: int) -> None:
    """Deterministic per-tensor init: each parameter gets its own RNG stream
    keyed by name, so adding/removing a tap never shifts other tensors.
    Weights are uniform scaled by fan-in; biases and LayerNorm offsets zero."""
    for name, p in sorted(model.named_parameters()):
        g = torch.Generator().manual_seed(derive_seed(seed, "init/" + name))
        with torch.no_grad():
            if name.endswith(".bias") or "norm" in name:
                if name.endswith(".weight"):  # LayerNorm scale
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                fan_in = p.shape[-1] if p.dim() == 1 else int(np.prod(p.shape[1:]))
                bound = 1.0 / math.sqrt(max(fan_in, 1))
                p.uniform_(-bound, bound, generator=g)


def build_model(cfg: ModelConfig, seed: int) -> Model:
    model = Model(cfg)
    init_parameters(model, seed)
    return model


def save_checkpoint(model: Model, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for name, p in sorted(model.state_dict().items()):
        arr = np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    manifest = {"config": asdict(model.cfg), "tensors": tensors}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "weights.bin"), "wb") as f:
        for b in blobs:
            f.write(b)


def load_checkpoint(ckpt_dir: str) -> Model:
    with open(os.path.join(ckpt_dir, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    cfg_d = dict(manifest["config"])
    cfg_d["taps"] = tuple(cfg_d["taps"])
    cfg = ModelConfig(**cfg_d)
    model = Model(cfg)
    with open(os.path.join(ckpt_dir, "weights.bin"), "rb") as f:
        blob = f.read()
    state = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model


def grad_check(loss_fn, params: list[tuple[str, torch.Tensor]], eps: float = 1e-5, max_entries: int = 5, seed: int = 0) -> float:
    """Compare reverse-mode gradients with central finite differences on a
    sample of entries per tensor. Inputs must be float64 with dropout off.
    Returns the max relative error (0/0 counts as 0). Entries where both
    estimates sit below finite-difference noise (~machine_eps * |loss| / eps)
    are treated as zero: softmax cancels some bias directions exactly, leaving
    only roundoff on both sides."""
    for _, p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError("non-finite loss in grad_check")
    loss.backward()
    rng = np.random.default_rng(seed)
    noise_floor = 100.0 * np.finfo(np.float64).eps * max(abs(loss.item()), 1.0) / eps
    worst = 0.0
    for name, p in params:
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        n = flat.numel()
        idxs = rng.choice(n, size=min(max_entries, n), replace=False)
        for i in idxs:
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            ad = g.view(-1)[i].item()
            denom = max(abs(fd), abs(ad))
            rel = 0.0 if denom <= noise_floor else abs(fd - ad) / denom
            worst = max(worst, rel)
    return worst
