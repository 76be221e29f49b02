"""Named parameter tensors with trainable flags, plus content hashing."""

import hashlib

import numpy as np


class ParamSet:
    """Ordered map name -> (array, trainable). Names are hierarchical."""

    def __init__(self):
        self._entries = {}

    def add(self, name, value, trainable=True):
        if name in self._entries:
            raise ValueError(f"duplicate parameter {name!r}")
        self._entries[name] = [np.asarray(value, dtype=np.float64), trainable]

    def __getitem__(self, name):
        return self._entries[name][0]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        for name, (arr, trainable) in self._entries.items():
            yield name, arr, trainable

    def trainable(self, name):
        return self._entries[name][1]

    def set_trainable(self, name, flag):
        self._entries[name][1] = flag

    def freeze_all(self):
        for entry in self._entries.values():
            entry[1] = False

    def copy(self):
        out = ParamSet()
        for name, arr, trainable in self.items():
            out.add(name, arr.copy(), trainable)
        return out


def hash_arrays(named_arrays):
    """SHA-256 digest over (name, shape, little-endian payload) tuples."""
    h = hashlib.sha256()
    for name, arr in named_arrays:
        h.update(name.encode("utf-8"))
        h.update(np.asarray(arr.shape, dtype="<u4").tobytes())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.digest()
