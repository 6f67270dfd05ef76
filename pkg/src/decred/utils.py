"""Shared helpers: seed derivation and torch determinism setup."""

import hashlib

import torch


def derive_seed(root_seed: int, consumer: str) -> int:
    """Derive an independent 63-bit seed for a named consumer of randomness.

    All stochastic components (init, shuffling, augmentation, bootstrap, ...)
    draw their seed through this function so that adding or removing one
    consumer never perturbs the streams of the others.
    """
    h = hashlib.blake2b(consumer.encode("utf-8"), digest_size=8, key=root_seed.to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little") & 0x7FFFFFFFFFFFFFFF


def seeded_generator(root_seed: int, consumer: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root_seed, consumer))
    return g
