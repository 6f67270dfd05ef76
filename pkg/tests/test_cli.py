import json
import os

import pytest

from decred.cli import RunConfig, main


def _dir_bytes(root):
    out = {}
    for dirpath, _, filenames in os.walk(root):
        for fn in filenames:
            p = os.path.join(dirpath, fn)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def _write_config(path, extra=None):
    raw = {"model": {"feat_dim": 16}, "paths": {}}
    if extra:
        raw.update(extra)
    with open(path, "w") as f:
        json.dump(raw, f)
    return str(path)


class TestRunConfig:
    def test_overrides_applied(self, tmp_path):
        cfg_path = _write_config(tmp_path / "c.json")
        cfg = RunConfig.load(cfg_path, ["decode.lambda_weight=0.5", "train.seed=7"])
        assert cfg.decode.lambda_weight == 0.5
        assert cfg.train.seed == 7

    def test_string_override_unquoted(self, tmp_path):
        cfg_path = _write_config(tmp_path / "c.json")
        cfg = RunConfig.load(cfg_path, ["decode.fusion=last_layer"])
        assert cfg.decode.fusion == "last_layer"

    def test_unknown_key_rejected(self, tmp_path):
        cfg_path = _write_config(tmp_path / "c.json")
        with pytest.raises(ValueError):
            RunConfig.load(cfg_path, ["model.nonsense=1"])

    def test_betas_keys_coerced(self, tmp_path):
        cfg_path = _write_config(tmp_path / "c.json", {"loss": {"betas": {"2": 0.4, "4": 0.6}}})
        cfg = RunConfig.load(cfg_path, [])
        assert cfg.loss.betas == {2: 0.4, 4: 0.6}

    def test_resolved_round_trips_through_json(self, tmp_path):
        cfg_path = _write_config(tmp_path / "c.json")
        cfg = RunConfig.load(cfg_path, [])
        assert json.loads(json.dumps(cfg.resolved()))["model"]["feat_dim"] == 16


class TestGenData:
    ARGS = ["gen-data", "--n-train", "6", "--n-dev", "2", "--n-test", "2",
            "--vocab-size", "4", "--seed", "3"]

    def test_writes_splits(self, tmp_path):
        out = tmp_path / "data"
        assert main(self.ARGS + ["--out", str(out)]) == 0
        for name in ("train", "dev", "test"):
            assert (out / f"{name}.jsonl").exists()
        assert (out / "gen.json").exists()
        assert (out / "vocab.json").exists()

    def test_byte_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(self.ARGS + ["--out", str(a)]) == 0
        assert main(self.ARGS + ["--out", str(b)]) == 0
        assert _dir_bytes(a) == _dir_bytes(b)

    def test_seed_changes_content(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(self.ARGS + ["--out", str(a)]) == 0
        args = [x for x in self.ARGS]
        args[args.index("3")] = "4"
        assert main(args + ["--out", str(b)]) == 0
        assert _dir_bytes(a) != _dir_bytes(b)


class TestExitCodes:
    def test_invalid_config_value(self, tmp_path):
        cfg_path = _write_config(tmp_path / "c.json")
        rc = main(["grad-check", "--config", cfg_path, "--set", "loss.alpha=2.0"])
        assert rc == 1

    def test_missing_config_file(self, tmp_path):
        rc = main(["train", "--config", str(tmp_path / "missing.json")])
        assert rc == 1

    def test_malformed_override(self, tmp_path):
        cfg_path = _write_config(tmp_path / "c.json")
        rc = main(["grad-check", "--config", cfg_path, "--set", "nonsense"])
        assert rc == 1


class TestGradCheckCommand:
    def test_passes(self, tmp_path):
        cfg_path = _write_config(tmp_path / "c.json")
        assert main(["grad-check", "--config", cfg_path]) == 0


class TestEvalCommand:
    def test_eval_with_pair(self, tmp_path):
        data = tmp_path / "data"
        assert main(["gen-data", "--out", str(data), "--n-train", "0", "--n-dev", "4",
                     "--n-test", "0", "--vocab-size", "4", "--seed", "1"]) == 0
        refs_manifest = str(data / "dev.jsonl")

        from decred.data import load_dataset

        ds = load_dataset(refs_manifest)
        hyps_a = tmp_path / "a.jsonl"
        hyps_b = tmp_path / "b.jsonl"
        with open(hyps_a, "w") as f:
            for u in ds.utterances:
                f.write(json.dumps({"id": u.id, "text": u.transcript}) + "\n")
        with open(hyps_b, "w") as f:
            for u in ds.utterances:
                f.write(json.dumps({"id": u.id, "text": ""}) + "\n")
        cfg_path = _write_config(tmp_path / "c.json")
        out = tmp_path / "eval.json"
        rc = main(["eval", "--config", cfg_path, "--refs", refs_manifest,
                   "--hyps", str(hyps_a), "--pair", str(hyps_b), "--B", "50",
                   "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["wer"] == 0.0
        B = 50
        assert report["p_value"] == pytest.approx(1 / (B + 1))
