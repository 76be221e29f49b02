"""Normalization statistics state machine.

Each normalization layer carries source statistics (mu_s, var_s), a frozen
affine pair (gamma, beta), and post-deployment moving statistics
(mu_run, var_run). The mode decides which statistics a forward pass uses:

  SOURCE_FROZEN  - fixed source stats; batch-composition invariant.
  TARGET_BATCH   - per-batch statistics of the current input; running
                   stats untouched.
  MOVING_UPDATE  - exponentially updates mu_run/var_run from the batch,
                   then normalizes with the updated running stats.
  TRAIN          - internal pretraining mode: batch statistics for the
                   forward, source stats accumulated as a side effect.
"""

import copy
from enum import Enum

import numpy as np


class NormMode(Enum):
    SOURCE_FROZEN = "source-frozen"
    TARGET_BATCH = "target-batch"
    MOVING_UPDATE = "moving-update"
    TRAIN = "train"


PUBLIC_MODES = (NormMode.SOURCE_FROZEN, NormMode.TARGET_BATCH, NormMode.MOVING_UPDATE)


class NormLayer:
    """State for one BN (or GN) layer; arrays are float64, length C."""

    def __init__(self, channels, kind="bn", groups=1, momentum=0.1):
        self.kind = kind
        self.groups = groups
        self.momentum = momentum
        self.mode = NormMode.SOURCE_FROZEN
        self.affine_trainable = False
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.mu_s = np.zeros(channels)
        self.var_s = np.ones(channels)
        self.mu_run = np.zeros(channels)
        self.var_run = np.ones(channels)

    @property
    def channels(self):
        return self.gamma.shape[0]


class NormTable:
    """Ordered name -> NormLayer map for one model instance."""

    def __init__(self):
        self.layers = {}

    def add(self, name, layer):
        if name in self.layers:
            raise ValueError(f"duplicate norm layer {name!r}")
        self.layers[name] = layer

    def __getitem__(self, name):
        return self.layers[name]

    def __iter__(self):
        return iter(self.layers.items())

    def set_mode(self, mode):
        """Switch every layer atomically; TRAIN is reserved for pretraining."""
        mode = NormMode(mode)
        if mode not in PUBLIC_MODES:
            raise ValueError(f"{mode} is not a public statistics mode")
        for layer in self.layers.values():
            layer.mode = mode

    def snapshot(self):
        return copy.deepcopy(self.layers)

    def restore(self, snap):
        """In-place restore: array identities survive so optimizer refs stay valid."""
        if set(snap) != set(self.layers):
            raise ValueError("norm table snapshot does not match layer set")
        for name, saved in snap.items():
            layer = self.layers[name]
            if layer.channels != saved.channels:
                raise ValueError(f"channel mismatch restoring {name!r}")
            for field in ("gamma", "beta", "mu_s", "var_s", "mu_run", "var_run"):
                getattr(layer, field)[...] = getattr(saved, field)
            layer.mode = saved.mode
            layer.momentum = saved.momentum
            layer.affine_trainable = saved.affine_trainable

    def set_affine_trainable(self, flag):
        for layer in self.layers.values():
            layer.affine_trainable = flag

    def affine_param_group(self):
        """(name, array) refs of every BN affine tensor, for the optimizer."""
        params = {}
        for name, layer in self.layers.items():
            if layer.kind != "bn":
                raise ValueError(f"affine group requested on non-BN layer {name!r}")
            params[f"{name}.gamma"] = layer.gamma
            params[f"{name}.beta"] = layer.beta
        return params

    def reset_running_to_source(self):
        for layer in self.layers.values():
            layer.mu_run = layer.mu_s.copy()
            layer.var_run = layer.var_s.copy()
