"""Residual adapter ("buffer") modules attached at backbone insertion points.

Each buffer is a parallel branch added onto a frozen activation:

  design 1: h + alpha * Conv1x1(h)
  design 2: h + alpha * Conv3x3(h)
  design 3: h + alpha * Norm(Conv3x3(h))   (target-batch stats, own affine)
  design 4: h + alpha * Conv1x1(h) + beta * Conv3x3(h)

The branch parameters (phi) are the only trainable tensors in @Buffer runs;
attaching never touches the backbone and detaching restores the frozen
forward exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .model import STAGE_LETTERS, he_uniform
from .norm import NormLayer, NormMode
from .params import hash_arrays

PLACEMENT_POINTS = {"i": "conv", "ii": "norm", "iii": "relu"}


@dataclass
class BufferSpec:
    design: int = 4                      # 1..4
    placement: str = "iii"               # i | ii | iii
    stages: tuple = ("a",)               # subset of a/b/c
    alpha_init: float = 1e-3
    beta_init: float = 1e-3
    trainable_scales: bool = True

    def validate(self):
        if self.design not in (1, 2, 3, 4):
            raise ValueError(f"unknown buffer design {self.design}")
        if self.placement not in PLACEMENT_POINTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        bad = [s for s in self.stages if s not in STAGE_LETTERS]
        if bad or not self.stages:
            raise ValueError(f"invalid stage selection {self.stages}")


class Buffer:
    """One attached buffer: parameter dict phi plus optional internal norm."""

    def __init__(self, point, spec, phi, norm=None):
        self.point = point
        self.spec = spec
        self.phi = phi  # name -> ndarray (all trainable)
        self.norm = norm

    def forward(self, graph, h):
        spec = self.spec
        pre = f"{self.point}.buffer"
        leaf = lambda key: graph.leaf(self.phi[f"{pre}.{key}"],
                                      trainable=True, name=f"{pre}.{key}")
        alpha = graph.leaf(self.phi[f"{pre}.alpha"], trainable=spec.trainable_scales,
                           name=f"{pre}.alpha")
        branch = None
        if spec.design in (1, 4):
            c1 = ops.conv2d(graph, h, leaf("conv1.weight"), leaf("conv1.bias"),
                            stride=1, padding=0)
            branch = ops.scale(graph, c1, alpha)
        if spec.design in (2, 3, 4):
            c3 = ops.conv2d(graph, h, leaf("conv3.weight"), leaf("conv3.bias"),
                            stride=1, padding=1)
            if spec.design == 3:
                gamma = graph.leaf(self.phi[f"{pre}.norm.gamma"], trainable=True,
                                   name=f"{pre}.norm.gamma")
                beta_n = graph.leaf(self.phi[f"{pre}.norm.beta"], trainable=True,
                                    name=f"{pre}.norm.beta")
                c3 = ops.batchnorm2d(graph, c3, self.norm, gamma, beta_n)
            if spec.design == 4:
                beta = graph.leaf(self.phi[f"{pre}.beta"], trainable=spec.trainable_scales,
                                  name=f"{pre}.beta")
                branch = ops.add(graph, branch, ops.scale(graph, c3, beta))
            else:
                branch = ops.scale(graph, c3, alpha)
        # zero scales give h + 0*branch == h bitwise, while the scale
        # coefficients still receive nonzero gradients through the branch
        return ops.add(graph, h, branch)


class BufferBank:
    def __init__(self, spec, buffers):
        self.spec = spec
        self.buffers = buffers

    def param_refs(self):
        refs = {}
        for buf in self.buffers:
            refs.update(buf.phi)
        return refs

    def hash_phi(self):
        return hash_arrays(sorted(self.param_refs().items()))


def _init_buffer(point, spec, channels, rng):
    pre = f"{point}.buffer"
    phi = {}
    if spec.design in (1, 4):
        phi[f"{pre}.conv1.weight"] = he_uniform(rng, (channels, channels, 1, 1), channels)
        phi[f"{pre}.conv1.bias"] = np.zeros(channels)
    if spec.design in (2, 3, 4):
        phi[f"{pre}.conv3.weight"] = he_uniform(rng, (channels, channels, 3, 3), channels * 9)
        phi[f"{pre}.conv3.bias"] = np.zeros(channels)
    phi[f"{pre}.alpha"] = np.asarray(float(spec.alpha_init))
    norm = None
    if spec.design == 4:
        phi[f"{pre}.beta"] = np.asarray(float(spec.beta_init))
    if spec.design == 3:
        phi[f"{pre}.norm.gamma"] = np.ones(channels)
        phi[f"{pre}.norm.beta"] = np.zeros(channels)
        norm = NormLayer(channels)
        norm.mode = NormMode.TARGET_BATCH
    return Buffer(point, spec, phi, norm)


def attach_buffers(model, spec, seed):
    """Create buffers at every selected insertion point and register the bank."""
    spec.validate()
    rng = np.random.default_rng(seed)
    kind = PLACEMENT_POINTS[spec.placement]
    buffers = []
    for letter in sorted(spec.stages):
        s = STAGE_LETTERS.index(letter)
        if s >= model.cfg.stages:
            raise ValueError(f"stage {letter!r} not present in a {model.cfg.stages}-stage model")
        channels = model.cfg.stage_channels(s)
        for b in range(model.cfg.blocks_per_stage):
            point = f"stage{s}.block{b}.{kind}"
            buffers.append(_init_buffer(point, spec, channels, rng))
    bank = BufferBank(spec, buffers)
    model.bank = bank
    return bank


def detach_buffers(model, bank):
    if model.bank is not bank:
        raise ValueError("bank is not attached to this model")
    model.bank = None
    return model


# ------------------------------------------------------- bank serialization

def serialize_bank_tensors(bank):
    spec = bank.spec
    stages_mask = [1.0 if s in spec.stages else 0.0 for s in STAGE_LETTERS]
    placement_code = float(("i", "ii", "iii").index(spec.placement))
    tensors = [("__bufcfg__", np.array([spec.design, placement_code, *stages_mask,
                                        spec.alpha_init, spec.beta_init,
                                        float(spec.trainable_scales)]))]
    for name, arr in sorted(bank.param_refs().items()):
        tensors.append((name, np.asarray(arr)))
    return tensors


def bank_from_tensors(model, table):
    cfgarr = table["__bufcfg__"]
    spec = BufferSpec(
        design=int(cfgarr[0]),
        placement=("i", "ii", "iii")[int(cfgarr[1])],
        stages=tuple(s for s, flag in zip(STAGE_LETTERS, cfgarr[2:5]) if flag),
        alpha_init=float(cfgarr[5]),
        beta_init=float(cfgarr[6]),
        trainable_scales=bool(cfgarr[7]),
    )
    bank = attach_buffers(model, spec, seed=0)
    for name, arr in bank.param_refs().items():
        if name not in table:
            raise ValueError(f"missing buffer tensor {name!r} in checkpoint")
        arr[...] = table[name]
    return bank
