import hashlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """
    Derive a sub-seed from the top-level seed and a sequence of labels.
    The same (seed, labels) always gives the same sub-seed, independent of call order.
    """
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def make_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
