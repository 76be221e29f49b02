"""Command line interface: pretrain | adapt | sweep | probe | stats | report."""

import argparse
import sys
from dataclasses import replace


from .buffers import BufferSpec
from .checkpoint import load_checkpoint, save_checkpoint
from .config import as_list, get_typed, load_config
from .data import generate_source, images_labels
from .engine import AdaptConfig
from .harness import (ExperimentConfig, feature_stats, forgetting_probe,
                      run_experiment, sweep_alpha, sweep_module_design,
                      sweep_placement, write_feature_stats_csv, write_sweep_csv)
from .model import BackboneConfig, build_backbone, evaluate_error, pretrain_source
from .report import render_report


def _add_common_adapt_flags(p):
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--bs", type=int, default=16, help="adaptation batch size")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--alpha-init", type=float, default=1e-3)
    p.add_argument("--samples-per-domain", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--config", help="flat key=value config file; flags win")


def _experiment_config(args, scenario, arms):
    spec = BufferSpec(alpha_init=args.alpha_init, beta_init=args.alpha_init)
    if args.bs >= 16:
        spec = replace(spec, stages=("a", "b"))
    adapt = AdaptConfig(lr=args.lr, batch_size=args.bs, seed=args.seed)
    cfg = ExperimentConfig(scenario=scenario, arms=tuple(arms), adapt=adapt,
                           buffer=spec, samples_per_domain=args.samples_per_domain,
                           out_dir=args.out_dir, seed=args.seed,
                           run_id=f"{scenario}_s{args.seed}")
    if getattr(args, "config", None):
        cfg = _apply_config_file(cfg, load_config(args.config))
    return cfg


def _apply_config_file(cfg, kv):
    adapt = replace(
        cfg.adapt,
        lr=get_typed(kv, "adapt.lr", cfg.adapt.lr, float),
        batch_size=get_typed(kv, "adapt.batch_size", cfg.adapt.batch_size, int),
        eata_margin=get_typed(kv, "adapt.eata_margin", cfg.adapt.eata_margin, float),
        eata_fisher_lambda=get_typed(kv, "adapt.eata_fisher_lambda",
                                     cfg.adapt.eata_fisher_lambda, float),
        eata_fisher_samples=get_typed(kv, "adapt.eata_fisher_samples",
                                      cfg.adapt.eata_fisher_samples, int),
    )
    buffer = replace(
        cfg.buffer,
        design=get_typed(kv, "buffer.design", cfg.buffer.design, int),
        placement=kv.get("buffer.placement", cfg.buffer.placement),
        stages=tuple(get_typed(kv, "buffer.stages", cfg.buffer.stages, as_list)),
        alpha_init=get_typed(kv, "buffer.alpha_init", cfg.buffer.alpha_init, float),
        beta_init=get_typed(kv, "buffer.beta_init", cfg.buffer.beta_init, float),
    )
    return replace(
        cfg, adapt=adapt, buffer=buffer,
        domains=tuple(get_typed(kv, "stream.order", cfg.domains, as_list)),
        samples_per_domain=get_typed(kv, "stream.samples_per_domain",
                                     cfg.samples_per_domain, int),
        probe_every=get_typed(kv, "probe.every", cfg.probe_every, int),
        probe_size=get_typed(kv, "probe.size", cfg.probe_size, int),
        probe_protocol=kv.get("probe.protocol", cfg.probe_protocol),
    )


def cmd_pretrain(args):
    cfg = BackboneConfig(norm_kind=args.norm)
    model = build_backbone(cfg, seed=args.seed)
    data = generate_source(args.samples, cfg.num_classes, seed=args.seed)
    holdout = generate_source(512, cfg.num_classes, seed=args.seed + 1)
    pretrain_source(model, data, epochs=args.epochs, lr=args.lr, seed=args.seed,
                    log=lambda msg: print(msg, file=sys.stderr))
    hx, hy = images_labels(holdout)
    err = evaluate_error(model, model.standardize(hx), hy)
    print(f"held-out clean error: {err:.4f}")
    save_checkpoint(model, args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_adapt(args):
    model, _ = load_checkpoint(args.ckpt)
    arms = ["source"] + [m.strip() for m in args.method.split(",")]
    cfg = _experiment_config(args, args.scenario, arms)
    records, path = run_experiment(cfg, model)
    print(f"wrote {len(records)} records to {path}")
    for arm in cfg.arms:
        final = [r for r in records if r.arm == arm][-1]
        print(f"  {arm}: final cumulative error {final.cum_err:.4f}")
    return 0


def cmd_sweep(args):
    model, _ = load_checkpoint(args.ckpt)
    cfg = _experiment_config(args, "single", ["tent@buffer"])
    if args.kind == "module":
        rows = sweep_module_design(cfg, model)
    elif args.kind == "placement":
        rows = sweep_placement(cfg, model)
    else:
        bss = tuple(int(b) for b in args.batch_sizes.split(","))
        rows = sweep_alpha(cfg, model, batch_sizes=bss)
    write_sweep_csv(rows, args.out)
    print(f"wrote {len(rows)} sweep cells to {args.out}")
    return 0


def cmd_probe(args):
    model, bank = load_checkpoint(args.ckpt)
    probe_set = generate_source(args.probe_size, model.cfg.num_classes,
                                seed=args.seed + 70001)
    imgs, labels = images_labels(probe_set)
    err = forgetting_probe(model, model.standardize(imgs), labels,
                           protocol=args.protocol, bank=bank)
    print(f"source error ({args.protocol} protocol): {err:.4f}")
    return 0


def cmd_stats(args):
    model, bank = load_checkpoint(args.ckpt)
    batch_set = generate_source(args.batch, model.cfg.num_classes, seed=args.seed)
    imgs, _ = images_labels(batch_set)
    rows = feature_stats(model, model.standardize(imgs), args.layer, bank=bank)
    write_feature_stats_csv(rows, args.out)
    print(f"wrote {len(rows)} channel rows to {args.out}")
    return 0


def cmd_report(args):
    text = render_report(args.csv, svg_path=args.svg)
    print(text, end="")
    if args.svg:
        print(f"wrote plot to {args.svg}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="buffertta",
                                description="Test-time adaptation with buffer adapters")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="train the source backbone")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples", type=int, default=4096)
    sp.add_argument("--epochs", type=int, default=4)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--norm", choices=("bn", "gn"), default="bn")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="run an adaptation experiment")
    _add_common_adapt_flags(sp)
    sp.add_argument("--method", default="tent@buffer",
                    help="comma list, e.g. tent@buffer,tent@bn,eata@bn+buffer")
    sp.add_argument("--scenario", default="single",
                    choices=("single", "continual", "mixed", "forgetting"))
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("sweep", help="ablation sweeps")
    _add_common_adapt_flags(sp)
    sp.add_argument("--kind", choices=("module", "placement", "alpha"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--batch-sizes", default="16", help="alpha sweep only")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("probe", help="source-error forgetting probe")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--protocol", choices=("moving", "fixed"), default="moving")
    sp.add_argument("--probe-size", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("stats", help="per-channel feature statistics")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--layer", required=True)
    sp.add_argument("--batch", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("report", help="render a metrics CSV")
    sp.add_argument("csv")
    sp.add_argument("--svg", help="also write an SVG line plot")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
