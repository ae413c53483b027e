"""Named random substreams derived from the single run seed."""
import zlib

import numpy as np
import torch

STREAMS = ("init", "train", "synth", "shapley")


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent numpy generator for ``(seed, name, *extra)``."""
    return np.random.default_rng([int(seed), _stream_key(name), *map(int, extra)])


def derived_seed(seed: int, name: str, *extra: int) -> int:
    return int(substream(seed, name, *extra).integers(0, 2**63 - 1))


def torch_generator(seed: int, name: str, *extra: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derived_seed(seed, name, *extra))
    return gen
