"""Deterministic random streams.

Every random draw in the package comes from a named Philox stream derived
from a single integer seed. Philox is counter-based, so streams are cheap
to create, independent by construction, and their state serializes to a
pair of integers (counter position is captured by the generator state).

``stream(seed, *labels)`` derives a child key by hashing the seed together
with the label path, so ``stream(7, "init")`` and ``stream(7, "shuffle",
"epoch", 3)`` never collide and never depend on call order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_KEY_BYTES = 16  # Philox4x64 key width


def _derive_key(seed: int, labels: tuple) -> int:
    h = hashlib.blake2b(digest_size=_KEY_BYTES)
    h.update(str(int(seed)).encode("ascii"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *labels) -> np.random.Generator:
    """Return a fresh Generator for the (seed, labels) path.

    Calling twice with the same arguments gives two generators that produce
    identical sequences.
    """
    return np.random.Generator(np.random.Philox(key=_derive_key(seed, labels)))


def state_to_text(gen: np.random.Generator) -> str:
    """Serialize a Philox generator's full state to one printable token."""
    st = gen.bit_generator.state
    if st["bit_generator"] != "Philox":
        raise ValueError(f"not a Philox generator: {st['bit_generator']}")
    fields = [
        ",".join(str(int(v)) for v in st["state"]["counter"]),
        ",".join(str(int(v)) for v in st["state"]["key"]),
        str(int(st["buffer_pos"])),
        ",".join(str(int(v)) for v in st["buffer"]),
        str(int(st["has_uint32"])),
        str(int(st["uinteger"])),
    ]
    return ";".join(fields)


def state_from_text(text: str) -> np.random.Generator:
    """Rebuild a generator from ``state_to_text`` output."""
    parts = text.split(";")
    if len(parts) != 6:
        raise ValueError("malformed generator state token")
    counter, key, buffer_pos, buffer, has_uint32, uinteger = parts
    gen = np.random.Generator(np.random.Philox(key=0))
    gen.bit_generator.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array([int(v) for v in counter.split(",")], dtype=np.uint64),
            "key": np.array([int(v) for v in key.split(",")], dtype=np.uint64),
        },
        "buffer_pos": int(buffer_pos),
        "buffer": np.array([int(v) for v in buffer.split(",")], dtype=np.uint64),
        "has_uint32": int(has_uint32),
        "uinteger": int(uinteger),
    }
    return gen
