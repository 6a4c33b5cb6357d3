"""Deterministic random streams.

Every random draw in a simulation comes from a stream derived from
``(global_seed, round, client, stage)``. Streams never depend on the order
in which clients are processed, so results are identical whether clients run
sequentially or concurrently, and a run resumed from a checkpoint replays the
same draws.
"""

from __future__ import annotations

import zlib

import numpy as np

SERVER = -1


def stage_code(stage: str) -> int:
    return zlib.crc32(stage.encode("utf-8"))


def derive_stream(seed: int, round_index: int, client_id: int, stage: str) -> np.random.Generator:
    # SeedSequence entropy must be non-negative; shift client ids so SERVER maps to 0.
    entropy = [int(seed), int(round_index), int(client_id) + 1, stage_code(stage)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, round_index: int, client_id: int, stage: str) -> int:
    """A 63-bit integer seed, e.g. the noise seed the server broadcasts."""
    return int(derive_stream(seed, round_index, client_id, stage).integers(0, 2**63 - 1))
