"""Seeded, hierarchical random streams.

A stream is a master seed plus a key path such as ("plan", epoch, layer).
The path is hashed together with the seed, so each (seed, key) pair always
yields the same sequence and distinct keys yield independent generators.
"""

from __future__ import annotations

import hashlib
import numbers
from dataclasses import dataclass
from typing import Any, Tuple

import numpy as np


def _encode_component(component: Any) -> str:
    """Type-tagged, length-prefixed text for one key component.

    ("a/b",) and ("a", "b") or 1 and "1" must never hash alike; numpy and
    Python integers of equal value must.
    """
    if isinstance(component, (bool, np.bool_)):
        tag, text = "b", str(bool(component))
    elif isinstance(component, numbers.Integral):
        tag, text = "i", str(int(component))
    elif isinstance(component, numbers.Real):
        tag, text = "f", repr(float(component))
    else:
        tag, text = type(component).__name__, str(component)
    return f"{tag}:{len(text)}:{text};"


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_key: Tuple[Any, ...] = ()

    def derive(self, *components: Any) -> "RngStream":
        """Child stream whose key extends this one."""
        return RngStream(self.seed, self.stream_key + tuple(components))

    def substream_seed(self) -> int:
        path = "".join(_encode_component(c) for c in self.stream_key)
        combined = f"{self.seed & 0xFFFFFFFFFFFFFFFF:016x}|{path}"
        return int(hashlib.sha256(combined.encode()).hexdigest()[:16], 16)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.substream_seed()))


__all__ = ["RngStream"]
