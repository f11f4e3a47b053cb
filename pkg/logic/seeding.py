import hashlib

import numpy as np


def derive_seed(master_seed: int, entity_kind: str, entity_id=0, round_: int = 0) -> int:
    """Deterministic 64-bit sub-seed for one entity in one round.

    The same (master_seed, kind, id, round) always maps to the same seed, no
    matter in which order or on which thread entities are processed.
    """
    key = f"{int(master_seed)}|{entity_kind}|{entity_id}|{int(round_)}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def derive_rng(master_seed: int, entity_kind: str, entity_id=0, round_: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, entity_kind, entity_id, round_))
