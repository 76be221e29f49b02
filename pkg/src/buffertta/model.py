"""Frozen staged CNN backbone: construction, forward, source pretraining.

Architecture: `stages` stages of `blocks_per_stage` blocks; each block is
conv3x3 -> norm -> relu and exposes three named insertion points
(<prefix>.conv / .norm / .relu). Every stage ends with 2x2 average pooling;
the head is global average pooling followed by a linear classifier.
"""

import copy
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Graph
from .norm import NormLayer, NormMode, NormTable
from .params import ParamSet, hash_arrays

STAGE_LETTERS = "abc"


@dataclass
class BackboneConfig:
    stages: int = 3
    blocks_per_stage: int = 2
    base_channels: int = 16
    norm_kind: str = "bn"  # "bn" | "gn"
    groups: int = 4
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)

    def stage_channels(self, s):
        return self.base_channels * (2 ** s)


def he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Backbone:
    def __init__(self, cfg, params, norms):
        self.cfg = cfg
        self.params = params
        self.norms = norms
        self.bank = None  # set by buffers.attach_buffers
        # source-preprocessing statistics, baked in by pretraining
        self.prep_mean = np.zeros(cfg.input_shape[0])
        self.prep_std = np.ones(cfg.input_shape[0])

    # ------------------------------------------------------------ structure

    def block_names(self):
        for s in range(self.cfg.stages):
            for b in range(self.cfg.blocks_per_stage):
                yield s, b, f"stage{s}.block{b}"

    def insertion_points(self):
        for _, _, prefix in self.block_names():
            for kind in ("conv", "norm", "relu"):
                yield f"{prefix}.{kind}"

    # ------------------------------------------------------------- forward

    def forward(self, graph, x, capture=None, bank=None):
        """Build the forward graph; returns the logits node.

        capture: optional dict collecting activation values by insertion
        point name (plus 'stage{s}.out'). bank overrides self.bank.
        """
        if bank is None:
            bank = self.bank
        cfg = self.cfg
        if x.value.ndim != 4 or x.value.shape[1:] != cfg.input_shape:
            raise ValueError(f"expected input N x {cfg.input_shape}, got {x.value.shape}")
        buffers = {} if bank is None else {buf.point: buf for buf in bank.buffers}
        h = x
        for s in range(cfg.stages):
            for b in range(cfg.blocks_per_stage):
                prefix = f"stage{s}.block{b}"
                h = self._block(graph, h, prefix, capture, buffers)
            h = ops.avgpool2d(graph, h, 2)
            if capture is not None:
                capture[f"stage{s}.out"] = h.value
        h = ops.global_avg_pool(graph, h)
        w = graph.leaf(self.params["head.weight"],
                       trainable=self.params.trainable("head.weight"), name="head.weight")
        bb = graph.leaf(self.params["head.bias"],
                        trainable=self.params.trainable("head.bias"), name="head.bias")
        return ops.linear(graph, h, w, bb)

    def _block(self, graph, h, prefix, capture, buffers):
        cfg = self.cfg
        wname, bname = f"{prefix}.conv.weight", f"{prefix}.conv.bias"
        w = graph.leaf(self.params[wname], trainable=self.params.trainable(wname), name=wname)
        b = graph.leaf(self.params[bname], trainable=self.params.trainable(bname), name=bname)
        h = ops.conv2d(graph, h, w, b, stride=1, padding=1)
        h = self._maybe_buffer(graph, h, f"{prefix}.conv", buffers, capture)

        layer = self.norms[f"{prefix}.norm"]
        gamma = beta = None
        if layer.affine_trainable:
            gamma = graph.leaf(layer.gamma, trainable=True, name=f"{prefix}.norm.gamma")
            beta = graph.leaf(layer.beta, trainable=True, name=f"{prefix}.norm.beta")
        if cfg.norm_kind == "bn":
            h = ops.batchnorm2d(graph, h, layer, gamma, beta)
        else:
            h = ops.groupnorm(graph, h, layer.groups, gamma, beta,
                              gamma_arr=layer.gamma, beta_arr=layer.beta)
        h = self._maybe_buffer(graph, h, f"{prefix}.norm", buffers, capture)

        h = ops.relu(graph, h)
        h = self._maybe_buffer(graph, h, f"{prefix}.relu", buffers, capture)
        return h

    def _maybe_buffer(self, graph, h, point, buffers, capture):
        if capture is not None:
            capture[point] = h.value
        buf = buffers.get(point)
        if buf is not None:
            h = buf.forward(graph, h)
            if capture is not None:
                capture[f"{point}.buffered"] = h.value
        return h

    def logits(self, x, capture=None, bank=None, check_finite=True):
        """Convenience non-training forward; returns a plain ndarray."""
        g = Graph(check_finite=check_finite)
        return self.forward(g, g.constant(x), capture=capture, bank=bank).value

    # ----------------------------------------------------------- utilities

    def theta_arrays(self):
        """Backbone parameters theta: conv/linear tensors plus norm affine."""
        for name, arr, _ in self.params.items():
            yield name, arr
        for name, layer in self.norms:
            yield f"{name}.gamma", layer.gamma
            yield f"{name}.beta", layer.beta

    def norm_stat_arrays(self):
        for name, layer in self.norms:
            yield f"{name}.mu_s", layer.mu_s
            yield f"{name}.var_s", layer.var_s
            yield f"{name}.mu_run", layer.mu_run
            yield f"{name}.var_run", layer.var_run

    def hash_params(self):
        """32-byte digest of theta only (no buffers, no running statistics)."""
        return hash_arrays(self.theta_arrays())

    def hash_source_norm_state(self):
        arrays = []
        for name, layer in self.norms:
            arrays += [(f"{name}.gamma", layer.gamma), (f"{name}.beta", layer.beta),
                       (f"{name}.mu_s", layer.mu_s), (f"{name}.var_s", layer.var_s)]
        return hash_arrays(arrays)

    def freeze_backbone(self):
        self.params.freeze_all()
        self.norms.set_affine_trainable(False)

    def clone(self):
        bank = self.bank
        self.bank = None
        try:
            out = copy.deepcopy(self)
        finally:
            self.bank = bank
        return out

    def standardize(self, images):
        """Apply the baked-in source-channel standardization to [*,3,H,W]."""
        return (images - self.prep_mean[:, None, None]) / self.prep_std[:, None, None]


def build_backbone(cfg, seed):
    """Deterministic He-uniform initialization from the seed."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    norms = NormTable()
    in_ch = cfg.input_shape[0]
    for s in range(cfg.stages):
        out_ch = cfg.stage_channels(s)
        for b in range(cfg.blocks_per_stage):
            prefix = f"stage{s}.block{b}"
            fan_in = in_ch * 9
            params.add(f"{prefix}.conv.weight", he_uniform(rng, (out_ch, in_ch, 3, 3), fan_in))
            params.add(f"{prefix}.conv.bias", np.zeros(out_ch))
            norms.add(f"{prefix}.norm",
                      NormLayer(out_ch, kind=cfg.norm_kind,
                                groups=cfg.groups if cfg.norm_kind == "gn" else 1))
            in_ch = out_ch
    feat = cfg.stage_channels(cfg.stages - 1)
    params.add("head.weight", he_uniform(rng, (cfg.num_classes, feat), feat))
    params.add("head.bias", np.zeros(cfg.num_classes))
    return Backbone(cfg, params, norms)


class PretrainDiverged(RuntimeError):
    pass


def pretrain_source(model, dataset, epochs=4, lr=1e-3, batch_size=64, seed=0,
                    log=None):
    """Adam cross-entropy training on the labeled source set.

    Uses batch statistics for normalization while accumulating source moving
    statistics (momentum 0.1); bakes channel standardization stats into the
    model; freezes everything at the end.
    """
    from .engine import AdamOptimizer  # local import avoids a cycle

    images = np.stack([img.pixels for img in dataset])
    labels = np.array([img.label for img in dataset], dtype=np.int64)
    model.prep_mean = images.mean(axis=(0, 2, 3))
    model.prep_std = images.std(axis=(0, 2, 3)) + 1e-8
    data = model.standardize(images)

    for layer in model.norms.layers.values():
        layer.mode = NormMode.TRAIN
    for name in model.params:
        model.params.set_trainable(name, True)
    model.norms.set_affine_trainable(True)

    rng = np.random.default_rng(seed)
    opt = AdamOptimizer(lr=lr)
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        nb = 0
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            g = Graph(check_finite=False)
            x = g.constant(data[idx])
            logits = model.forward(g, x)
            loss = ops.cross_entropy(g, logits, labels[idx])
            if not np.isfinite(loss.value):
                raise PretrainDiverged(f"loss became non-finite at epoch {epoch}")
            grads = g.backward(loss)
            opt.step(_pretrain_param_refs(model), grads)
            epoch_loss += float(loss.value)
            nb += 1
        if log is not None:
            log(f"epoch {epoch}: mean loss {epoch_loss / max(1, nb):.4f}")

    model.freeze_backbone()
    model.norms.set_mode(NormMode.SOURCE_FROZEN)
    model.norms.reset_running_to_source()
    return model


def _pretrain_param_refs(model):
    refs = {name: model.params[name] for name in model.params}
    for name, layer in model.norms:
        refs[f"{name}.gamma"] = layer.gamma
        refs[f"{name}.beta"] = layer.beta
    return refs


def evaluate_error(model, images, labels, batch_size=128, bank=None):
    """Classification error of the current model state on standardized data."""
    wrong = 0
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits = model.logits(xb, bank=bank, check_finite=False)
        wrong += int((logits.argmax(axis=1) != yb).sum())
    return wrong / len(images)
