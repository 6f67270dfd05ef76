"""Command-line entry point: dataset generation, training, decoding,
evaluation, ILM probing, fusion calibration, benchmarking and gradient
checking. One config file drives everything; flags override via dotted
paths (e.g. --set decode.lambda_weight=0)."""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np
import torch

from . import data as D
from .data import AugmentConfig, SynthSpec, Dataset, load_dataset, synth_generate, write_dataset
from .decoding import DecodeConfig, FusionWeights, bench_decode, decode_utterance
from .evaluate import bootstrap_ci, corpus_wer, paired_bootstrap
from .ilm import ilm_perplexity
from .losses import LossConfig, batch_ctc_loss, composite_loss, decred_loss
from .model import ModelConfig, build_model, grad_check, load_checkpoint
from .trainer import TrainConfig, calibrate_fusion, train
from .utils import derive_seed


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "decode": DecodeConfig,
    "synth": SynthSpec,
}


def _build_section(cls, payload: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    coerced = dict(payload)
    for f in fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    if cls is LossConfig and "betas" in coerced:
        coerced["betas"] = {int(k): float(v) for k, v in coerced["betas"].items()}
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


class RunConfig:
    def __init__(self, raw: dict):
        self.raw = raw
        for key, cls in _SECTIONS.items():
            setattr(self, key, _build_section(cls, raw.get(key, {})))
        self.paths = raw.get("paths", {})

    @classmethod
    def load(cls, path: str, overrides: list[str]) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"--set expects key=value, got {ov!r}")
            key, val = ov.split("=", 1)
            try:
                parsed = json.loads(val)
            except json.JSONDecodeError:
                parsed = val
            node = raw
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = parsed
        return cls(raw)

    def resolved(self) -> dict:
        out = {k: asdict(getattr(self, k)) for k in _SECTIONS}
        out["loss"]["betas"] = {str(k): v for k, v in out["loss"]["betas"].items()}
        out["paths"] = self.paths
        return out


def _write_run_json(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump({"config": cfg.resolved(), "seed": cfg.train.seed}, f, indent=2, sort_keys=True)


def cmd_gen_data(args) -> int:
    spec_kwargs = {}
    if args.vocab_size is not None:
        spec_kwargs["vocab_size"] = args.vocab_size
    if args.feat_dim is not None:
        spec_kwargs["feat_dim"] = args.feat_dim
    if args.noise_sigma is not None:
        spec_kwargs["noise_sigma"] = args.noise_sigma
    n_total = args.n_train + args.n_dev + args.n_test
    spec = SynthSpec(n_utts=n_total, **spec_kwargs)
    ds = synth_generate(spec, args.seed)
    splits = {
        "train": ds.utterances[: args.n_train],
        "dev": ds.utterances[args.n_train : args.n_train + args.n_dev],
        "test": ds.utterances[args.n_train + args.n_dev :],
    }
    os.makedirs(args.out, exist_ok=True)
    for name, utts in splits.items():
        if utts:
            write_dataset(Dataset(utterances=utts, tokenizer=ds.tokenizer), args.out, name)
    with open(os.path.join(args.out, "gen.json"), "w", encoding="utf-8") as f:
        json.dump({"seed": args.seed, "spec": asdict(spec), "splits": {k: len(v) for k, v in splits.items()}}, f, indent=2, sort_keys=True)
    return 0


def _load_model_cfg(cfg: RunConfig, tokenizer) -> ModelConfig:
    d = asdict(cfg.model)
    d["vocab_size"] = tokenizer.vocab_size
    return ModelConfig(**d)


def cmd_train(args, cfg: RunConfig) -> int:
    train_ds = load_dataset(cfg.paths["train_manifest"])
    dev_ds = load_dataset(cfg.paths["dev_manifest"])
    out_dir = cfg.paths["out_dir"]
    _write_run_json(cfg, out_dir)
    model_cfg = _load_model_cfg(cfg, train_ds.tokenizer)
    result = train(model_cfg, cfg.loss, cfg.train, cfg.augment, train_ds, dev_ds, out_dir=out_dir)
    print(f"best dev WER {result.best_dev_wer:.4f} at step {result.best_step} (stopped at {result.stopped_step})")
    return 0


def _load_fusion_weights(path: str | None) -> FusionWeights | None:
    if path is None:
        return None
    with open(path, encoding="utf-8") as f:
        return FusionWeights.from_dict(json.load(f)["vectors"])


def cmd_decode(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.manifest)
    v = _load_fusion_weights(args.fusion_weights)
    out_dir = cfg.paths.get("out_dir", ".")
    _write_run_json(cfg, out_dir)
    out_path = args.out or os.path.join(out_dir, "decode.jsonl")
    with open(out_path, "w", encoding="utf-8") as f:
        for u in ds.utterances:
            hyp = decode_utterance(model, u.features, cfg.decode, v)
            rec = {
                "id": u.id,
                "text": ds.tokenizer.decode(hyp.text_tokens()),
                "joint_logp": hyp.joint_logp,
                "attn_logp": hyp.attn_logp,
                "ctc_logp": hyp.ctc_logp,
                "n_steps": hyp.n_steps,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {out_path}")
    return 0


def _read_hyps(path: str) -> dict[str, str]:
    hyps = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            hyps[rec["id"]] = rec["text"]
    return hyps


def cmd_eval(args, cfg: RunConfig) -> int:
    refs_ds = load_dataset(args.refs)
    refs = {u.id: u.transcript for u in refs_ds.utterances}
    hyps = _read_hyps(args.hyps)
    wer, scored = corpus_wer(refs, hyps)
    res = bootstrap_ci(scored, B=args.B, alpha=args.alpha, seed=args.seed)
    report = res.to_dict()
    if args.pair:
        hyps_b = _read_hyps(args.pair)
        _, scored_b = corpus_wer(refs, hyps_b)
        report["p_value"] = paired_bootstrap(scored, scored_b, B=args.B, seed=args.seed)
    out_path = args.out or "eval.json"
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(json.dumps(report if not report.get("per_utt") else report, sort_keys=True))
    return 0


def cmd_ilm_ppl(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.manifest)
    corpus = [(u.id, u.transcript) for u in ds.utterances]
    report = ilm_perplexity(model, corpus, ds.tokenizer, dataset_name=os.path.basename(args.manifest))
    out_path = args.out or "ilm.json"
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    print(f"ppl {report.ppl:.2f} over {report.tokens} tokens")
    return 0


def cmd_calibrate(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.ckpt)
    dev_ds = load_dataset(cfg.paths["dev_manifest"])
    v, info = calibrate_fusion(model, dev_ds, steps=args.steps, seed=cfg.train.seed)
    out_path = args.out or "fusion_weights.json"
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump({"vectors": v.to_dict(), "info": info}, f, indent=2, sort_keys=True)
    print(f"dev CE {info['ce_before']:.4f} -> {info['ce_after']:.4f}")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    from dataclasses import replace

    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.manifest)
    v = _load_fusion_weights(args.fusion_weights)
    rows = []
    configs = [cfg.decode]
    if args.all_fusions:
        configs = [replace(cfg.decode, fusion="last_layer", early_exit_layer=None)]
        for d in model.cfg.taps:
            if d != model.cfg.D:
                configs.append(replace(cfg.decode, fusion="early_exit", early_exit_layer=d))
        if v is not None:
            configs.append(replace(cfg.decode, fusion="weighted_sum", early_exit_layer=None))
    for dc in configs:
        rows.extend(bench_decode(model, ds.utterances, ds.tokenizer, dc, v, model_name=os.path.basename(args.ckpt)))
    out_path = args.out or "bench.csv"
    with open(out_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["model", "fusion", "lambda", "beam", "mean_sec", "macro_wer"])
        w.writeheader()
        for r in rows:
            w.writerow(r)
    print(f"wrote {out_path} ({len(rows)} rows)")
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    torch.manual_seed(0)
    spec = SynthSpec(n_utts=2, len_range=(2, 3), vocab_size=4, feat_dim=6, noise_sigma=0.05)
    ds = synth_generate(spec, seed=5)
    model_cfg = ModelConfig(
        E=1, D=2, d_model=16, d_ff=32, heads=2, dropout=0.0, feat_dim=6,
        vocab_size=ds.tokenizer.vocab_size, taps=(1, 2), encoder_block=cfg.model.encoder_block,
    )
    model = build_model(model_cfg, seed=5).double()
    model.eval()
    loss_cfg = LossConfig(alpha=0.3, betas={1: 0.4, 2: 0.6}, label_smoothing=0.1)

    from .trainer import _make_batch

    feats, feat_lens, inputs, targets, token_lens, ctc_targets = _make_batch(
        ds.utterances, [u.features for u in ds.utterances], ds.tokenizer
    )
    feats = feats.double()

    def loss_fn():
        tap_logits, ctc_lp, enc_lens = model(feats, feat_lens, inputs, token_lens)
        ctc = batch_ctc_loss(ctc_lp, enc_lens, ctc_targets)
        dec, _ = decred_loss(tap_logits, targets, loss_cfg)
        return composite_loss(ctc, dec, loss_cfg.alpha)

    params = list(model.named_parameters())
    err = grad_check(loss_fn, params, eps=1e-6, max_entries=2)
    ok = err < 1e-3
    print(f"max relative gradient error: {err:.3e} ({'OK' if ok else 'FAIL'} at 1e-3)")
    return 0 if ok else 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="decred", description=__doc__)
    parser.add_argument("--threads", type=int, default=1, help="torch thread cap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-dev", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--feat-dim", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)

    for name in ("train", "decode", "eval", "ilm-ppl", "calibrate", "bench", "grad-check"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", default=[], dest="overrides")
        if name in ("decode", "ilm-ppl", "bench"):
            p.add_argument("--ckpt", required=True)
            p.add_argument("--manifest", required=True)
        if name == "calibrate":
            p.add_argument("--ckpt", required=True)
            p.add_argument("--steps", type=int, default=200)
        if name in ("decode", "bench"):
            p.add_argument("--fusion-weights", default=None)
        if name == "bench":
            p.add_argument("--all-fusions", action="store_true")
        if name == "eval":
            p.add_argument("--refs", required=True)
            p.add_argument("--hyps", required=True)
            p.add_argument("--pair", default=None)
            p.add_argument("--B", type=int, default=1000)
            p.add_argument("--alpha", type=float, default=0.05)
            p.add_argument("--seed", type=int, default=0)
        if name in ("decode", "eval", "ilm-ppl", "calibrate", "bench"):
            p.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    torch.set_num_threads(args.threads)

    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "decode": cmd_decode,
        "eval": cmd_eval,
        "ilm-ppl": cmd_ilm_ppl,
        "calibrate": cmd_calibrate,
        "bench": cmd_bench,
        "grad-check": cmd_grad_check,
    }
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        cfg = RunConfig.load(args.config, args.overrides)
        return handlers[args.command](args, cfg)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
