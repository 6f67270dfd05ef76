"""Synthetic dataset generation, manifests, character tokenization and
feature-space augmentation (time/frequency masking, speed perturbation)."""

import json
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

MASK_WORD = "[MASK]"
FEATURE_MAGIC = b"FBNK"

# token ids, fixed across the project
BLANK_ID = 0
PAD_ID = 1
BOS_ID = 2
EOS_ID = 3
MASK_ID = 4
N_SPECIALS = 5

_SPECIAL_NAMES = ["<blank>", "<pad>", "<bos>", "<eos>", MASK_WORD]

# alphabet used for synthetic symbols; single characters, no whitespace
_SYMBOL_POOL = "abcdefghijklmnopqrstuvwxyz0123456789"

_MASKABLE = re.compile(r"^\[.*\]$|.*-$")


def mask_transform(transcript: str) -> str:
    """Replace bracketed tags and hyphen-terminated fragments with [MASK].

    Token count and whitespace structure are preserved; applying the
    transform twice gives the same result ([MASK] itself matches the
    bracket pattern).
    """
    out = []
    for tok in transcript.split(" "):
        out.append(MASK_WORD if tok and _MASKABLE.match(tok) else tok)
    return " ".join(out)


class Tokenizer:
    """Character tokenizer with blank/PAD/BOS/EOS/MASK specials.

    The vocabulary is ``specials + ' ' + symbols``; ``encode`` maps the
    literal word ``[MASK]`` to the MASK id and every other character to its
    own id. Blank (id 0) never appears in encoded text; it exists only for
    the CTC output layer.
    """

    def __init__(self, symbols: str):
        if " " in symbols or len(set(symbols)) != len(symbols):
            raise ValueError("symbols must be unique non-space characters")
        self.symbols = symbols
        self._chars = " " + symbols
        self._char_to_id = {c: N_SPECIALS + i for i, c in enumerate(self._chars)}
        self._id_to_char = {v: k for k, v in self._char_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return N_SPECIALS + len(self._chars)

    @property
    def space_id(self) -> int:
        return self._char_to_id[" "]

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        i = 0
        while i < len(text):
            if text.startswith(MASK_WORD, i):
                ids.append(MASK_ID)
                i += len(MASK_WORD)
                continue
            c = text[i]
            if c not in self._char_to_id:
                raise ValueError(f"character {c!r} not in vocabulary")
            ids.append(self._char_to_id[c])
            i += 1
        return ids

    def decode(self, ids: list[int]) -> str:
        parts = []
        for t in ids:
            if t == MASK_ID:
                parts.append(MASK_WORD)
            elif t in self._id_to_char:
                parts.append(self._id_to_char[t])
            elif t in (BOS_ID, EOS_ID, PAD_ID, BLANK_ID):
                continue
            else:
                raise ValueError(f"unknown token id {t}")
        return "".join(parts)

    def vocab_manifest(self) -> dict:
        return {
            "specials": {name: i for i, name in enumerate(_SPECIAL_NAMES)},
            "symbols": self.symbols,
            "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_vocab_manifest(cls, d: dict) -> "Tokenizer":
        return cls(d["symbols"])


@dataclass
class AugmentConfig:
    n_freq_masks: int = 2
    max_freq_width: int = 2
    n_time_masks: int = 2
    max_time_width: int = 10
    specaug_delay_steps: int = 300
    speed_factors: tuple[float, ...] = (0.9, 1.0, 1.1)

    def __post_init__(self):
        if self.max_freq_width < 0 or self.max_time_width < 0:
            raise ValueError("mask widths must be >= 0")
        if any(f <= 0 for f in self.speed_factors):
            raise ValueError("speed factors must be > 0")


@dataclass
class SynthSpec:
    vocab_size: int = 16
    n_utts: int = 1000
    len_range: tuple[int, int] = (3, 10)
    frames_per_token_range: tuple[int, int] = (10, 16)
    feat_dim: int = 16
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.len_range[0] < 1:
            raise ValueError("len_range minimum must be >= 1")
        if not 1 <= self.vocab_size <= len(_SYMBOL_POOL):
            raise ValueError(f"vocab_size must be in [1, {len(_SYMBOL_POOL)}]")


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, F) float32
    transcript: str


@dataclass
class Dataset:
    utterances: list[Utterance]
    tokenizer: Tokenizer
    prototypes: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    """Generate a toy dataset where each symbol has a fixed prototype
    feature segment; utterance features are concatenated prototypes plus
    Gaussian noise. Fully determined by (spec, seed)."""
    rng = np.random.default_rng(seed)
    symbols = _SYMBOL_POOL[: spec.vocab_size]
    lo, hi = spec.frames_per_token_range
    prototypes = {}
    for s in symbols:
        n = int(rng.integers(lo, hi + 1))
        prototypes[s] = rng.standard_normal((n, spec.feat_dim)).astype(np.float32)

    utts = []
    for i in range(spec.n_utts):
        n_tok = int(rng.integers(spec.len_range[0], spec.len_range[1] + 1))
        toks = [symbols[j] for j in rng.integers(0, len(symbols), n_tok)]
        feats = np.concatenate([prototypes[t] for t in toks], axis=0)
        if spec.noise_sigma > 0:
            feats = feats + rng.normal(0.0, spec.noise_sigma, feats.shape).astype(np.float32)
        utts.append(Utterance(id=f"utt{i:06d}", features=feats.astype(np.float32), transcript=" ".join(toks)))
    return Dataset(utterances=utts, tokenizer=Tokenizer(symbols), prototypes=prototypes)


def spec_augment(features: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero out random time and frequency spans. Returns a new array."""
    out = features.copy()
    T, F = out.shape
    for _ in range(cfg.n_time_masks):
        w = int(rng.integers(0, min(cfg.max_time_width, T) + 1))
        t0 = int(rng.integers(0, T - w + 1))
        out[t0 : t0 + w, :] = 0.0
    for _ in range(cfg.n_freq_masks):
        w = int(rng.integers(0, min(cfg.max_freq_width, F) + 1))
        f0 = int(rng.integers(0, F - w + 1))
        out[:, f0 : f0 + w] = 0.0
    return out


def speed_perturb(features: np.ndarray, factor: float) -> np.ndarray:
    """Resample along time by linear interpolation; T' = round(T / factor)."""
    if factor <= 0:
        raise ValueError("speed factor must be > 0")
    T = features.shape[0]
    T2 = max(1, int(round(T / factor)))
    if T2 == T:
        return features.copy()
    if T2 == 1:
        pos = np.zeros(1)
    else:
        pos = np.linspace(0.0, T - 1, T2)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, T - 1)
    w = (pos - i0).astype(np.float32)[:, None]
    return ((1.0 - w) * features[i0] + w * features[i1]).astype(np.float32)


def filter_by_length(utts: list[Utterance], max_frames: int) -> list[Utterance]:
    return [u for u in utts if u.features.shape[0] <= max_frames]


def write_features(path: str, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    T, F = arr.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", T, F))
        f.write(arr.tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        T, F = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(T * F * 4), dtype="<f4")
    return data.reshape(T, F).copy()


def write_dataset(ds: Dataset, out_dir: str, split: str) -> str:
    """Write features and a JSONL manifest; returns the manifest path."""
    feat_dir = os.path.join(out_dir, "feats", split)
    os.makedirs(feat_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, f"{split}.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as mf:
        for u in ds.utterances:
            fpath = os.path.join(feat_dir, f"{u.id}.fbank")
            write_features(fpath, u.features)
            rec = {"id": u.id, "feats": os.path.relpath(fpath, out_dir), "text": u.transcript}
            mf.write(json.dumps(rec, sort_keys=True) + "\n")
    vocab_path = os.path.join(out_dir, "vocab.json")
    with open(vocab_path, "w", encoding="utf-8") as vf:
        json.dump(ds.tokenizer.vocab_manifest(), vf, indent=2, sort_keys=True)
    return manifest_path


def load_dataset(manifest_path: str) -> Dataset:
    root = os.path.dirname(os.path.abspath(manifest_path))
    with open(os.path.join(root, "vocab.json"), encoding="utf-8") as vf:
        tok = Tokenizer.from_vocab_manifest(json.load(vf))
    utts = []
    with open(manifest_path, encoding="utf-8") as mf:
        for line in mf:
            rec = json.loads(line)
            feats = read_features(os.path.join(root, rec["feats"]))
            utts.append(Utterance(id=rec["id"], features=feats, transcript=rec["text"]))
    return Dataset(utterances=utts, tokenizer=tok)
