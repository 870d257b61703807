"""Per-module seed derivation from the single global seed.

``derive_seed(seed, tag, *indices)`` hashes the global seed, a module tag and
any integer indices with SHA-256 and keeps the low 63 bits, so every random
stream in a run is fixed by the global seed alone and independent streams do
not overlap.
"""

import hashlib


def derive_seed(seed, tag, *indices):
    key = ":".join([str(int(seed)), str(tag)] + [str(int(i)) for i in indices])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
