"""Experiment orchestration: scenarios, arms, probes, sweeps, metrics CSV."""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .buffers import BufferSpec, attach_buffers
from .data import (CORRUPTION_KINDS, DEFAULT_ORDER, CorruptionSpec, StreamPlan,
                   build_stream, generate_source, images_labels)
from .engine import AdaptConfig, AdaptEngine
from .model import evaluate_error
from .norm import NormMode

CSV_COLUMNS = ("run_id", "arm", "step", "domain", "bs", "loss", "batch_err",
               "cum_err", "src_err", "skips", "theta_hash", "ms")

SCENARIOS = ("single", "continual", "mixed", "forgetting",
             "ablation-module", "ablation-placement", "ablation-alpha")


@dataclass
class ExperimentConfig:
    scenario: str = "single"
    arms: tuple = ("source", "tent@buffer", "tent@bn")
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    buffer: BufferSpec = field(default_factory=BufferSpec)
    domains: tuple = ("gaussian_noise",)
    severity: int = 5
    samples_per_domain: int = 2000
    probe_every: int = 20
    probe_protocol: str = "moving"
    probe_size: int = 256
    probe_batch: int = 64
    target_pool: int = 2048
    source_pool: int = 1024
    out_dir: str = "runs"
    run_id: str = "exp"
    seed: int = 0

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario: unknown value {self.scenario!r}")
        if not self.arms:
            raise ValueError("arms: at least one method arm is required")
        for arm in self.arms:
            parse_arm(arm)
        bad = [d for d in self.domains if d not in CORRUPTION_KINDS and d != "clean"]
        if bad:
            raise ValueError(f"domains: unknown corruption kinds {bad}")
        self.adapt.validate()
        self.buffer.validate()


@dataclass
class MetricsRecord:
    run_id: str
    arm: str
    step: int
    domain: str
    bs: int
    loss: float
    batch_err: float
    cum_err: float
    src_err: float  # NaN when no probe ran at this step
    skips: int
    theta_hash: str
    ms: float


def parse_arm(arm):
    """'source' or '<objective>@<group>' e.g. tent@buffer, eata@bn+buffer."""
    if arm == "source":
        return None, None
    if "@" not in arm:
        raise ValueError(f"arm {arm!r}: expected 'source' or 'objective@group'")
    objective, group = arm.split("@", 1)
    if objective not in ("tent", "eata") or group not in ("buffer", "bn", "bn+buffer"):
        raise ValueError(f"arm {arm!r}: unknown objective or parameter group")
    return objective, group


# -------------------------------------------------------------- data setup

def make_stream_plan(cfg):
    domains = []
    kinds = DEFAULT_ORDER if cfg.scenario in ("continual", "mixed", "forgetting") \
        else cfg.domains
    for kind in kinds:
        spec = None if kind == "clean" else CorruptionSpec(kind, cfg.severity, seed=cfg.seed)
        domains.append((f"{kind}-s{cfg.severity}" if spec else "clean",
                        spec, cfg.samples_per_domain))
    shuffle = "mixed" if cfg.scenario == "mixed" else "sequential"
    return StreamPlan(domains=domains, shuffle=shuffle,
                      batch_size=cfg.adapt.batch_size, seed=cfg.seed)


def experiment_data(cfg, num_classes):
    """(target pool, standardized-ready source probe images+labels sources)."""
    target_pool = generate_source(cfg.target_pool, num_classes, seed=cfg.seed + 90001)
    probe_set = generate_source(cfg.probe_size, num_classes, seed=cfg.seed + 70001)
    fisher_set = generate_source(cfg.source_pool, num_classes, seed=cfg.seed + 50001)
    return target_pool, probe_set, fisher_set


# ------------------------------------------------------------------ probes

def forgetting_probe(model, probe_images, probe_labels, protocol="moving",
                     batch_size=64, bank=None):
    """Source error of the adapted model, side-effect free on its trajectory.

    moving: refresh mu_run/var_run from the (unlabeled) probe batches and
    evaluate with those running statistics, then restore the snapshot.
    fixed: evaluate with each probe batch's own statistics; no state change.
    """
    if len(probe_images) == 0:
        raise ValueError("probe set is empty")
    norms = model.norms
    snap = norms.snapshot()
    try:
        if protocol == "moving":
            norms.set_mode(NormMode.MOVING_UPDATE)
        elif protocol == "fixed":
            norms.set_mode(NormMode.TARGET_BATCH)
        else:
            raise ValueError(f"unknown probe protocol {protocol!r}")
        return evaluate_error(model, probe_images, probe_labels,
                              batch_size=batch_size, bank=bank)
    finally:
        norms.restore(snap)


def feature_stats(model, batch, layer_name, bank=None):
    """Per-channel (mean, variance) over (N,H,W) at a named capture point."""
    capture = {}
    model.logits(batch, capture=capture, bank=bank, check_finite=False)
    if layer_name not in capture:
        raise ValueError(f"unknown layer {layer_name!r}; "
                         f"available: {sorted(capture)}")
    act = capture[layer_name]
    mean = act.mean(axis=(0, 2, 3))
    var = act.var(axis=(0, 2, 3))
    return [(c, float(mean[c]), float(var[c])) for c in range(act.shape[1])]


# --------------------------------------------------------------- arm runner

def _walltime_enabled():
    return os.environ.get("BTTA_WALLTIME", "0") == "1"


def run_arm(base_model, arm, cfg, target_pool, probe=None):
    """Consume the stream once with a fresh model copy; returns records."""
    objective, group = parse_arm(arm)
    model = base_model.clone()
    prep = (model.prep_mean, model.prep_std)
    probe_images = probe_labels = None
    if probe is not None:
        probe_images, probe_labels = probe

    engine = None
    bank = None
    if arm == "source":
        model.norms.set_mode(NormMode.SOURCE_FROZEN)
    else:
        if "buffer" in group:
            bank = attach_buffers(model, replace(cfg.buffer), seed=cfg.seed)
        acfg = replace(cfg.adapt, objective=objective, param_group=group, seed=cfg.seed)
        engine = AdaptEngine(model, acfg, bank=bank)
        if objective == "eata":
            fisher_imgs = generate_source(min(cfg.adapt.eata_fisher_samples, cfg.source_pool),
                                          model.cfg.num_classes, seed=cfg.seed + 50001)
            fx, _ = images_labels(fisher_imgs)
            engine.estimate_fisher(model.standardize(fx))

    records = []
    seen = 0
    wrong = 0
    plan = make_stream_plan(cfg)
    probing = cfg.scenario == "forgetting" and probe_images is not None
    for step, (xb, yb, domain) in enumerate(build_stream(plan, target_pool, prep=prep)):
        t0 = time.perf_counter() if _walltime_enabled() else 0.0
        if engine is None:
            logits = model.logits(xb, check_finite=False)
            loss = float("nan")
            skips = 0
        else:
            logits, loss, _ = engine.step(xb)
            skips = engine.skips
        batch_wrong = int((logits.argmax(axis=1) != yb).sum())
        seen += len(yb)
        wrong += batch_wrong
        src_err = float("nan")
        if probing and step % cfg.probe_every == 0:
            src_err = forgetting_probe(model, probe_images, probe_labels,
                                       protocol=cfg.probe_protocol,
                                       batch_size=cfg.probe_batch, bank=bank)
        ms = (time.perf_counter() - t0) * 1e3 if _walltime_enabled() else 0.0
        records.append(MetricsRecord(
            run_id=cfg.run_id, arm=arm, step=step, domain=domain, bs=len(yb),
            loss=loss, batch_err=batch_wrong / len(yb), cum_err=wrong / seen,
            src_err=src_err, skips=skips,
            theta_hash=model.hash_params().hex(), ms=ms))
    return records


def run_experiment(cfg, base_model):
    """Run every arm on the shared stream plan; returns (records, csv_path)."""
    cfg.validate()
    num_classes = base_model.cfg.num_classes
    target_pool, probe_set, _ = experiment_data(cfg, num_classes)
    probe = None
    if cfg.scenario == "forgetting":
        imgs, labels = images_labels(probe_set)
        probe = (base_model.standardize(imgs), labels)

    threads = int(os.environ.get("BTTA_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_arm, base_model, arm, cfg, target_pool, probe)
                       for arm in cfg.arms]
            per_arm = [f.result() for f in futures]
    else:
        per_arm = [run_arm(base_model, arm, cfg, target_pool, probe) for arm in cfg.arms]

    records = [rec for arm_records in per_arm for rec in arm_records]
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"{cfg.run_id}_metrics.csv")
    write_metrics_csv(records, path)
    return records, path


# ------------------------------------------------------------------ sweeps

ALPHA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
STAGE_SUBSETS = (("a",), ("b",), ("c",), ("a", "b"), ("a", "c"), ("b", "c"),
                 ("a", "b", "c"))


def _sweep_cell(base_model, cfg, spec, first_block_only=False):
    """Mean target error of tent@buffer for one buffer configuration."""
    model = base_model.clone()
    bank = attach_buffers(model, spec, seed=cfg.seed)
    if first_block_only:
        bank.buffers = bank.buffers[:1]
    engine = AdaptEngine(model, replace(cfg.adapt, objective="tent",
                                        param_group="buffer", seed=cfg.seed), bank=bank)
    plan = make_stream_plan(cfg)
    prep = (model.prep_mean, model.prep_std)
    seen = wrong = 0
    step0_err = float("nan")
    target_pool = generate_source(cfg.target_pool, model.cfg.num_classes,
                                  seed=cfg.seed + 90001)
    for step, (xb, yb, _) in enumerate(build_stream(plan, target_pool, prep=prep)):
        logits, _, _ = engine.step(xb)
        batch_wrong = int((logits.argmax(axis=1) != yb).sum())
        if step == 0:
            step0_err = batch_wrong / len(yb)
        seen += len(yb)
        wrong += batch_wrong
    return step0_err, wrong / max(1, seen)


def sweep_module_design(cfg, base_model):
    """4 designs x 3 placements grid (shared stream and seed)."""
    rows = []
    for design in (1, 2, 3, 4):
        for placement in ("i", "ii", "iii"):
            spec = replace(cfg.buffer, design=design, placement=placement)
            step0, err = _sweep_cell(base_model, cfg, spec)
            rows.append({"design": design, "placement": placement,
                         "step0_err": step0, "err": err})
    return rows


def sweep_placement(cfg, base_model):
    """7 nonempty stage subsets with the base design."""
    rows = []
    for stages in STAGE_SUBSETS:
        spec = replace(cfg.buffer, stages=stages)
        step0, err = _sweep_cell(base_model, cfg, spec)
        rows.append({"stages": "+".join(stages), "step0_err": step0, "err": err})
    return rows


def sweep_alpha(cfg, base_model, grid=ALPHA_GRID, batch_sizes=None):
    """Alpha grid plus an alpha=0 control row, per batch size.

    Buffers sit only after the very first activation for this sweep.
    """
    if not grid:
        raise ValueError("alpha grid is empty")
    batch_sizes = batch_sizes or (cfg.adapt.batch_size,)
    rows = []
    for bs in batch_sizes:
        bcfg = replace(cfg, adapt=replace(cfg.adapt, batch_size=bs))
        for alpha in (0.0, *grid):
            spec = replace(cfg.buffer, design=4, placement="iii", stages=("a",),
                           alpha_init=alpha, beta_init=alpha)
            step0, err = _sweep_cell(base_model, bcfg, spec, first_block_only=True)
            rows.append({"bs": bs, "alpha": alpha, "step0_err": step0, "err": err})
    return rows


def write_sweep_csv(rows, path):
    if not rows:
        raise ValueError("no sweep rows to write")
    cols = list(rows[0])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")


# --------------------------------------------------------------------- CSV

def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def write_metrics_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in records:
            fh.write(",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS) + "\n")


def write_feature_stats_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("channel,mean,var\n")
        for c, m, v in rows:
            fh.write(f"{c},{m:.6f},{v:.6f}\n")
