"""Optimization loop: AdamW with warmup + linear decay, early stopping on
dev WER, checkpointing, and calibration of the logit-fusion weights with the
acoustic model frozen."""

import copy
import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import (
    PAD_ID,
    BOS_ID,
    EOS_ID,
    AugmentConfig,
    Dataset,
    Utterance,
    filter_by_length,
    spec_augment,
    speed_perturb,
)
from .decoding import DecodeConfig, FusionWeights, greedy_decode_batch
from .evaluate import corpus_wer
from .losses import LossConfig, batch_ctc_loss, composite_loss, decred_loss, masked_smoothed_ce
from .model import Model, ModelConfig, build_model, save_checkpoint
from .utils import derive_seed


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    weight_decay: float = 1e-6
    warmup_steps: int = 500
    total_steps: int = 10000
    batch_size: int = 16
    max_epochs: int = 1000
    patience: int = 10
    specaug_delay_steps: int = 300
    seed: int = 0
    eval_every: int = 200
    max_frames: int = 2000
    grad_clip: float = 5.0
    target_dev_wer: float = 0.0  # stop early once dev WER drops this low

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to peak over warmup, then linear decay to zero."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * max(frac, 0.0)


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    best_dev_wer: float
    best_step: int
    stopped_step: int
    step_losses: list[float] = field(default_factory=list)


def _make_batch(utts: list[Utterance], feats_np: list[np.ndarray], tokenizer):
    B = len(utts)
    T = max(f.shape[0] for f in feats_np)
    F = feats_np[0].shape[1]
    feats = torch.zeros(B, T, F)
    feat_lens = torch.zeros(B, dtype=torch.long)
    token_ids = [tokenizer.encode(u.transcript) for u in utts]
    N = max(len(t) for t in token_ids) + 1
    inputs = torch.full((B, N), PAD_ID, dtype=torch.long)
    targets = torch.full((B, N), PAD_ID, dtype=torch.long)
    token_lens = torch.zeros(B, dtype=torch.long)
    ctc_targets = []
    for i, (f, ids) in enumerate(zip(feats_np, token_ids)):
        feats[i, : f.shape[0]] = torch.from_numpy(f)
        feat_lens[i] = f.shape[0]
        inputs[i, : len(ids) + 1] = torch.tensor([BOS_ID] + ids)
        targets[i, : len(ids) + 1] = torch.tensor(ids + [EOS_ID])
        token_lens[i] = len(ids) + 1
        ctc_targets.append(torch.tensor(ids, dtype=torch.long))
    return feats, feat_lens, inputs, targets, token_lens, ctc_targets


def evaluate_dev_wer(model: Model, dev: Dataset, decode_cfg: DecodeConfig | None = None, v: FusionWeights | None = None) -> float:
    cfg = decode_cfg or DecodeConfig(lambda_weight=0.3, fusion="last_layer", beam_width=1)
    model.eval()
    token_lists = greedy_decode_batch(model, [u.features for u in dev.utterances], cfg, v)
    refs = {u.id: u.transcript for u in dev.utterances}
    hyps = {u.id: dev.tokenizer.decode(toks) for u, toks in zip(dev.utterances, token_lists)}
    wer, _ = corpus_wer(refs, hyps)
    return wer


def train(
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    aug_cfg: AugmentConfig,
    train_ds: Dataset,
    dev_ds: Dataset,
    out_dir: str | None = None,
) -> TrainResult:
    """Full training run; every random draw derives from train_cfg.seed, so
    two runs with the same configs produce identical metric logs."""
    seed = train_cfg.seed
    model = build_model(model_cfg, seed)
    # seed the global stream only after module construction: building a model
    # draws default-init values from it, and the number of draws depends on
    # the tap set, which would desynchronize dropout across architectures
    torch.manual_seed(derive_seed(seed, "dropout"))
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.peak_lr, weight_decay=train_cfg.weight_decay)

    utts = filter_by_length(train_ds.utterances, train_cfg.max_frames)
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    aug_rng = np.random.default_rng(derive_seed(seed, "augment"))
    tokenizer = train_ds.tokenizer

    metrics: list[dict] = []
    step_losses: list[float] = []
    best_wer = float("inf")
    best_step = -1
    best_state = None
    bad_evals = 0
    step = 0
    stop = False

    for _epoch in range(train_cfg.max_epochs):
        if stop:
            break
        order = shuffle_rng.permutation(len(utts))
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [utts[i] for i in order[start : start + train_cfg.batch_size]]
            feats_np = []
            for u in batch:
                factor = aug_cfg.speed_factors[aug_rng.integers(0, len(aug_cfg.speed_factors))]
                f = speed_perturb(u.features, factor)
                if step >= train_cfg.specaug_delay_steps:
                    f = spec_augment(f, aug_cfg, aug_rng)
                feats_np.append(f)
            feats, feat_lens, inputs, targets, token_lens, ctc_targets = _make_batch(batch, feats_np, tokenizer)

            model.train()
            tap_logits, ctc_lp, enc_lens = model(feats, feat_lens, inputs, token_lens)
            ctc = batch_ctc_loss(ctc_lp, enc_lens, ctc_targets)
            dec, per_tap = decred_loss(tap_logits, targets, loss_cfg)
            loss = composite_loss(ctc, dec, loss_cfg.alpha)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at step {step} (batch ids: {[u.id for u in batch]})")

            lr = lr_at(step + 1, train_cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            step += 1
            step_losses.append(float(loss.item()))

            if step % train_cfg.eval_every == 0 or step >= train_cfg.total_steps:
                dev_wer = evaluate_dev_wer(model, dev_ds)
                aux_taps = [d for d in sorted(per_tap) if d != model_cfg.D]
                metrics.append(
                    {
                        "step": step,
                        "train_loss": float(loss.item()),
                        "ctc_loss": float(ctc.item()),
                        "ce_final": float(per_tap[model_cfg.D].item()) if model_cfg.D in per_tap else "",
                        "ce_tap": float(per_tap[aux_taps[0]].item()) if aux_taps else "",
                        "dev_wer": dev_wer,
                        "lr": lr,
                    }
                )
                if dev_wer < best_wer:
                    best_wer = dev_wer
                    best_step = step
                    best_state = copy.deepcopy(model.state_dict())
                    bad_evals = 0
                else:
                    bad_evals += 1
                if bad_evals >= train_cfg.patience or dev_wer <= train_cfg.target_dev_wer or step >= train_cfg.total_steps:
                    stop = True
                    break

    if best_state is not None:
        model.load_state_dict(best_state)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(out_dir, "checkpoint_best"))
        write_metrics_csv(metrics, os.path.join(out_dir, "metrics.csv"))
    return TrainResult(
        model=model,
        metrics=metrics,
        best_dev_wer=best_wer,
        best_step=best_step,
        stopped_step=step,
        step_losses=step_losses,
    )


def write_metrics_csv(metrics: list[dict], path: str) -> None:
    cols = ["step", "train_loss", "ctc_loss", "ce_final", "ce_tap", "dev_wer", "lr"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in metrics:
            w.writerow({k: row.get(k, "") for k in cols})


def calibrate_fusion(
    model: Model,
    dev_ds: Dataset,
    steps: int = 200,
    lr: float = 0.05,
    seed: int = 0,
) -> tuple[FusionWeights, dict]:
    """Learn the per-tap mixing vectors on the dev set with the model frozen.

    Initialized to the last-layer one-hot and optimized on teacher-forced dev
    cross-entropy; the final accept/reject decision decodes the dev set, so a
    candidate is only kept if its greedy WER is no worse than the one-hot
    init (which fuses bit-identically to plain last-layer decoding).
    """
    model.eval()
    taps = model.cfg.taps
    V = model.cfg.vocab_size

    # precompute teacher-forced tap logits once; only v is optimized
    per_tap_logits = {d: [] for d in taps}
    all_targets = []
    with torch.no_grad():
        for u in dev_ds.utterances:
            feats = torch.from_numpy(np.ascontiguousarray(u.features, dtype=np.float32)).unsqueeze(0)
            lens = torch.tensor([u.features.shape[0]], dtype=torch.long)
            enc, enc_lens = model.encode(feats, lens)
            ids = dev_ds.tokenizer.encode(u.transcript)
            inputs = torch.tensor([[BOS_ID] + ids], dtype=torch.long)
            hidden = model.decoder_hidden(inputs, enc, enc_lens)
            logits = model.tap_logits(hidden)
            for d in taps:
                per_tap_logits[d].append(logits[d][0])
            all_targets.append(torch.tensor(ids + [EOS_ID], dtype=torch.long))
    stacked = {d: torch.cat(per_tap_logits[d], dim=0) for d in taps}
    targets = torch.cat(all_targets, dim=0)

    v_params = {
        d: torch.nn.Parameter(torch.ones(V) if d == taps[-1] else torch.zeros(V)) for d in taps
    }

    def dev_ce() -> torch.Tensor:
        fused = None
        for d in taps:
            term = v_params[d] * stacked[d]
            fused = term if fused is None else fused + term
        s, n = masked_smoothed_ce(fused, targets, smoothing=0.0)
        return s / n.clamp(min=1)

    init_vectors = {d: p.detach().clone() for d, p in v_params.items()}
    with torch.no_grad():
        initial = float(dev_ce().item())
    best = initial
    best_vectors = init_vectors

    torch.manual_seed(derive_seed(seed, "calibrate"))
    opt = torch.optim.Adam(v_params.values(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        ce = dev_ce()
        ce.backward()
        opt.step()
        with torch.no_grad():
            cur = float(dev_ce().item())
        if cur < best:
            best = cur
            best_vectors = {d: p.detach().clone() for d, p in v_params.items()}

    info = {"ce_before": initial, "ce_after": best, "steps": steps}
    ws_cfg = DecodeConfig(fusion="weighted_sum")
    wer_init = evaluate_dev_wer(model, dev_ds, ws_cfg, FusionWeights(init_vectors))
    wer_cal = evaluate_dev_wer(model, dev_ds, ws_cfg, FusionWeights(best_vectors))
    info["wer_before"] = wer_init
    info["wer_after"] = min(wer_cal, wer_init)
    if wer_cal > wer_init:
        best_vectors = init_vectors
        info["ce_after"] = initial
    return FusionWeights(best_vectors), info
