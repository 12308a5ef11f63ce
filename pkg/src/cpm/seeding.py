"""Named random substreams derived from one master seed.

substream seed = first 8 bytes of blake2b("{master}/{label}/{index}"),
read little-endian. Every consumer (dataset records, weight init, training
batches, sampling trials) draws from its own labeled stream.
"""

import hashlib
import os

import numpy as np


def substream_seed(master: int, label: str, index: int = 0) -> int:
    digest = hashlib.blake2b(f"{int(master)}/{label}/{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(master: int, label: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(substream_seed(master, label, index))


def master_seed(default: int) -> int:
    """``CPM_SEED`` in the environment overrides the configured master seed."""
    env = os.environ.get("CPM_SEED")
    return int(env) if env not in (None, "") else int(default)
