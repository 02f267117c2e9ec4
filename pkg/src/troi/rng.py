"""Seeded RNG streams keyed by (seed, purpose-tag)."""
import json
import zlib

import numpy as np


def stream(seed: int, tag: str) -> np.random.Generator:
    """Independent generator for one purpose; stable across processes."""
    ss = np.random.SeedSequence([int(seed) % 2 ** 64, zlib.crc32(tag.encode("utf-8"))])
    return np.random.Generator(np.random.PCG64(ss))


def dump_state(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def load_state(state: str) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = json.loads(state)
    return np.random.Generator(bg)
