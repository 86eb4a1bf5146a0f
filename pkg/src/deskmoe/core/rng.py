"""Named, splittable counter-based random streams.

Each stream is a Philox generator whose key is derived from the root seed and
a path of names, so ``streams.get("init", "layers.0.wq")`` yields the same
draws no matter which other streams were used before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *names: str) -> int:
    path = "/".join([str(int(seed)), *map(str, names)])
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, *names: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *names)))


class RngStreams:
    """Registry of named streams rooted at one seed; state is serialisable."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._live: dict[str, np.random.Generator] = {}

    def get(self, *names: str) -> np.random.Generator:
        key = "/".join(names)
        if key not in self._live:
            self._live[key] = stream(self.seed, *names)
        return self._live[key]

    def split(self, *names: str) -> "RngStreams":
        return RngStreams(derive_key(self.seed, *names) & 0x7FFF_FFFF_FFFF_FFFF)

    def state_dict(self) -> dict:
        return {"seed": self.seed, "streams": {k: _to_json(g.bit_generator.state) for k, g in self._live.items()}}

    @classmethod
    def from_state(cls, state: dict) -> "RngStreams":
        out = cls(state["seed"])
        for key, st in state["streams"].items():
            g = stream(out.seed, *key.split("/"))
            g.bit_generator.state = _from_json(st)
            out._live[key] = g
        return out


def _to_json(obj):
    if isinstance(obj, dict):
        return {k: _to_json(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": [int(v) for v in obj.tolist()], "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_json(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_json(v) for k, v in obj.items()}
    return obj
