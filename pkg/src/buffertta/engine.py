"""Online test-time adaptation loop: objectives, parameter groups, Adam.

One engine instance owns one model instance and consumes its stream
sequentially. The returned logits of each step are computed before the
optimizer update (pre-update prediction, the online TTA convention).
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Graph
from .norm import NormMode

PARAM_GROUPS = ("buffer", "bn", "bn+buffer")
OBJECTIVES = ("tent", "eata")


@dataclass
class AdaptConfig:
    objective: str = "tent"
    param_group: str = "buffer"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    eata_fisher_lambda: float = 1.0
    eata_margin: float = 0.4
    eata_fisher_samples: int = 2000
    eata_weighting: bool = True
    batch_size: int = 16
    seed: int = 0

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.param_group not in PARAM_GROUPS:
            raise ValueError(f"unknown param group {self.param_group!r}")
        if self.lr <= 0 or self.eata_margin < 0 or self.eata_fisher_lambda < 0:
            raise ValueError("lr must be > 0, margin and lambda >= 0")


class AdamOptimizer:
    """Standard Adam with bias correction; eps = 1e-8."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """Update params (name -> ndarray, modified in place) with grads."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            p[...] = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class EataState:
    fisher: dict            # phi name -> ndarray, elementwise >= 0
    anchors: dict           # phi name -> ndarray, values at attach time
    threshold: float        # d * ln(num_classes)


def tent_loss(graph, logits):
    """Mean Shannon entropy of the softmax prediction over the batch."""
    probs = ops.softmax(graph, logits)
    return ops.mean_all(graph, ops.entropy(graph, probs, validate=False))


def eata_loss(graph, logits, cfg, state, params):
    """Filtered, proximity-weighted entropy plus the Fisher anchor penalty.

    Returns (loss node, mask, weights). Samples with entropy >= threshold
    contribute no gradient; with weighting disabled the entropy term is the
    plain masked mean.
    """
    probs = ops.softmax(graph, logits)
    ent = ops.entropy(graph, probs, validate=False)
    h = ent.value
    mask = h < state.threshold
    if cfg.eata_weighting:
        weights = np.where(mask, np.exp(state.threshold - h), 0.0)
    else:
        weights = mask.astype(np.float64)
    denom = max(1, int(mask.sum()))
    loss = ops.weighted_row_mean(graph, ent, weights, denom)

    lam = cfg.eata_fisher_lambda
    if lam > 0 and state.fisher:
        reg_parents = []
        reg_val = 0.0
        for name, node in params.items():
            f = state.fisher.get(name)
            if f is None:
                continue
            diff = node.value - state.anchors[name]
            reg_val += float((f * diff * diff).sum())

            def vjp(dy, f=f, diff=diff):
                return float(dy) * 2.0 * f * diff

            reg_parents.append((node, vjp))
        reg = graph.op(np.asarray(lam * reg_val),
                       [(n, (lambda dy, fn=fn: lam * fn(dy))) for n, fn in reg_parents],
                       "fisher_penalty")
        loss = graph.op(loss.value + reg.value,
                        [(loss, lambda dy: dy), (reg, lambda dy: dy)], "eata_total")
    return loss, mask, weights


class AdaptEngine:
    """Runs Algorithm-style online updates on one model + buffer bank."""

    def __init__(self, model, cfg, bank=None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.bank = bank if bank is not None else model.bank
        if "buffer" in cfg.param_group and self.bank is None:
            raise ValueError(f"param group {cfg.param_group!r} requires attached buffers")
        if cfg.param_group in ("bn", "bn+buffer"):
            model.norms.set_affine_trainable(True)
        else:
            model.norms.set_affine_trainable(False)
        self.opt = AdamOptimizer(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                                 weight_decay=cfg.weight_decay)
        self.eata_state = None
        self.skips = 0
        model.norms.set_mode(NormMode.TARGET_BATCH)

    def param_refs(self):
        refs = {}
        if "buffer" in self.cfg.param_group:
            refs.update(self.bank.param_refs())
        if "bn" in self.cfg.param_group:
            refs.update(self.model.norms.affine_param_group())
        return refs

    def _loss(self, graph, logits, leaf_nodes):
        if self.cfg.objective == "tent":
            return tent_loss(graph, logits)
        if self.eata_state is None:
            raise RuntimeError("EATA requires estimate_fisher() before streaming")
        loss, _, _ = eata_loss(graph, logits, self.cfg, self.eata_state, leaf_nodes)
        return loss

    def step(self, batch):
        """One online step; returns (pre-update logits, loss value, skipped)."""
        graph = Graph(check_finite=False)
        x = graph.constant(batch)
        logits = self.model.forward(graph, x, bank=self.bank)
        leaf_nodes = {n.name: n for n in graph.trainable_leaves}
        loss = self._loss(graph, logits, leaf_nodes)
        if not np.all(np.isfinite(loss.value)):
            self.skips += 1
            return logits.value, float("nan"), True
        grads = graph.backward(loss)
        self.opt.step(self.param_refs(), grads)
        return logits.value, float(loss.value), False

    def estimate_fisher(self, source_images, rng=None, warn=None):
        """Diagonal Fisher of phi (or BN affine) from clean source samples.

        F_j = mean over samples of the squared gradient of the cross-entropy
        against the model's own argmax prediction; anchors are current values.
        """
        n_req = self.cfg.eata_fisher_samples
        n = min(n_req, len(source_images))
        if n < n_req and warn is not None:
            warn(f"fisher: requested {n_req} samples, only {n} available")
        refs = self.param_refs()
        fisher = {name: np.zeros_like(arr) for name, arr in refs.items()}
        for i in range(n):
            graph = Graph(check_finite=False)
            x = graph.constant(source_images[i:i + 1])
            logits = self.model.forward(graph, x, bank=self.bank)
            pred = logits.value.argmax(axis=1)
            loss = ops.cross_entropy(graph, logits, pred)
            grads = graph.backward(loss)
            for name in fisher:
                g = grads.get(name)
                if g is not None:
                    fisher[name] += g * g
        for name in fisher:
            fisher[name] /= max(1, n)
        anchors = {name: arr.copy() for name, arr in refs.items()}
        threshold = self.cfg.eata_margin * np.log(self.model.cfg.num_classes)
        self.eata_state = EataState(fisher=fisher, anchors=anchors, threshold=threshold)
        return self.eata_state
