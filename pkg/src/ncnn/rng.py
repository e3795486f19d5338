"""Named random substreams derived from one integer seed."""

import zlib

import numpy as np


def _code(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed(seed: int, *keys) -> int:
    """Stable 32-bit seed for the substream ``(seed, *keys)``.

    ``derive_seed(7, "init", 3)`` is independent of ``derive_seed(7, "augment", 3)``
    and identical across processes and platforms.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(_code(k) for k in keys)])
    return int(ss.generate_state(1)[0])


def substream(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
