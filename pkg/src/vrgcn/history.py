"""Persistent per-layer activation history for control-variate estimators.

One array of shape (num_nodes, dim_l) per stored layer, zero-initialized,
with a per-row initialization flag. Reads of cold rows deliberately return
zeros: with an all-zero history the control-variate aggregation collapses to
plain neighbor sampling, which is exactly the intended cold-start behavior.
"""

from __future__ import annotations

import struct

import numpy as np

_MAGIC = b"VRGCNH01"


class HistoryStore:
    def __init__(self, num_nodes, layer_dims):
        """`layer_dims` maps layer index -> activation width at that layer."""
        self.num_nodes = int(num_nodes)
        self.layer_dims = {int(l): int(d) for l, d in dict(layer_dims).items()}
        self._data = {l: np.zeros((self.num_nodes, d))
                      for l, d in self.layer_dims.items()}
        self._initialized = {l: np.zeros(self.num_nodes, dtype=bool)
                             for l in self.layer_dims}
        self.epoch = 0

    @property
    def layers(self):
        return sorted(self.layer_dims)

    def num_values(self):
        """Total stored floats; the memory footprint is exactly this, there is
        no lazy allocation or copy-on-write."""
        return sum(arr.size for arr in self._data.values())

    def read_rows(self, layer, nodes, counter=None):
        nodes = np.asarray(nodes, dtype=np.int64)
        if counter is not None:
            counter.record_history_rows(layer, nodes)
        return self._data[layer][nodes].copy()

    def read_full(self, layer, counter=None):
        if counter is not None:
            counter.record_history_rows(layer, np.arange(self.num_nodes))
        return self._data[layer].copy()

    def write_rows(self, layer, nodes, values):
        nodes = np.asarray(nodes, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (nodes.size, self.layer_dims[layer]):
            raise ValueError(
                f"layer {layer}: expected {(nodes.size, self.layer_dims[layer])}, "
                f"got {values.shape}")
        self._data[layer][nodes] = values
        self._initialized[layer][nodes] = True

    def initialized_mask(self, layer):
        return self._initialized[layer].copy()

    def all_initialized(self):
        return all(mask.all() for mask in self._initialized.values())

    def save(self, path):
        """Binary checkpoint: magic, V, layer count, (index, dim) pairs, then
        row-major float64 payload per layer, all little-endian. Row flags are
        not part of the format; checkpoints are meant for post-warm-up state.
        """
        layers = self.layers
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<qq", self.num_nodes, len(layers)))
            for l in layers:
                fh.write(struct.pack("<qq", l, self.layer_dims[l]))
            for l in layers:
                fh.write(self._data[l].astype("<f8").tobytes())
        return path

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(8) != _MAGIC:
                raise ValueError(f"{path}: not a history checkpoint")
            num_nodes, num_layers = struct.unpack("<qq", fh.read(16))
            dims = {}
            for _ in range(num_layers):
                l, d = struct.unpack("<qq", fh.read(16))
                dims[l] = d
            store = cls(num_nodes, dims)
            for l in sorted(dims):
                payload = fh.read(8 * num_nodes * dims[l])
                arr = np.frombuffer(payload, dtype="<f8").reshape(num_nodes, dims[l])
                store._data[l] = arr.astype(np.float64)
                store._initialized[l][:] = True
        return store
