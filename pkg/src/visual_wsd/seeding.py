"""Pinned pseudo-random streams.

Every random draw in the package goes through `make_rng`, which builds a numpy
`Generator` on the Philox 4x64 counter-based bit generator. The 128-bit Philox
key is the first 16 bytes (little endian) of SHA-256 over the parts joined by
the unit separator, so streams depend only on the parts and are identical
across processes and platforms.
"""

import hashlib

import numpy as np

_SEPARATOR = b"\x1f"


def _to_bytes(part: object) -> bytes:
    if isinstance(part, bytes):
        return part
    return str(part).encode("utf-8")


def derive_key(*parts: object) -> int:
    """Return a 128-bit integer key derived from `parts`."""
    digest = hashlib.sha256(_SEPARATOR.join(_to_bytes(p) for p in parts)).digest()
    return int.from_bytes(digest[:16], "little")


def make_rng(*parts: object) -> np.random.Generator:
    """Return a Philox-backed generator keyed by `parts` (seed plus a purpose tag)."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))
