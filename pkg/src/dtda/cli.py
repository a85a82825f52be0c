"""Command-line entry point: ``dtda {synth,train,eval,protocol,ablate,report}``.

Exit codes: 0 success, 2 configuration error, 3 input/format error,
4 training divergence, 5 target leakage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, load_config, to_dict, with_seed
from .datagen import load_dataset, save_dataset, synthesize
from .distill import Teachers, train, write_loss_csv
from .errors import ConfigError, DTDAError, InputError
from .metrics import evaluate, records_from_arrays, write_report, write_roc, write_scores
from .models import ArchConfig, read_checkpoint, save_checkpoint, init_student, load_checkpoint
from .pretrain import train_domain_classifier, train_teacher_generative, train_teacher_perceptual
from .protocols import (ABLATION_ORDER, LeakageAudit, ProtocolSpec, VARIANTS, effective_configs,
                        ordering_report, render_table, run_ablation_matrix, run_protocol,
                        summary_from_runs, write_summary)

log = logging.getLogger("dtda")


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo_config(cfg: RunConfig, out: Path, **extra):
    _write_json(out / "config.json", {**to_dict(cfg), **extra})


def _dataset(args, cfg):
    return load_dataset(args.dataset) if args.dataset else synthesize(cfg.data)


def _out(args, cfg, default_sub=""):
    return Path(args.output) if args.output else Path(cfg.output_dir) / default_sub


# --------------------------------------------------------------------------- #
# commands

def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out(args, cfg, "data")
    ds = synthesize(cfg.data)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples ({cfg.data.num_domains} domains) to {out}")
    return 0


def _target_and_sources(args, cfg, domains):
    target = args.target_domain if args.target_domain is not None else cfg.protocol.target_domain
    if target is None:
        return None, list(domains)
    if target not in domains:
        raise InputError(f"target domain {target} not in dataset domains {list(domains)}")
    return target, [d for d in domains if d != target]


def _aux(path: Path, kind, build):
    """Reuse a frozen auxiliary checkpoint when resuming, else train it."""
    if path.exists():
        return load_checkpoint(path, kind=kind)
    model = build()
    save_checkpoint(model, path, extra={"report": model.report})
    return model


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out(args, cfg, "train")
    ds = _dataset(args, cfg)
    target, sources = _target_and_sources(args, cfg, ds.domains)
    train_set = ds.select_domains(sources)
    flags = VARIANTS[args.variant]
    kd, attack = effective_configs(flags, cfg.kd, cfg.attack)
    arch = ArchConfig.for_spec(ds.spec, cfg.arch.widths, cfg.arch.norm)
    _echo_config(cfg, out, variant=args.variant, target_domain=target, source_domains=sources,
                 effective={"kd": to_dict(kd), "attack": to_dict(attack)})
    ck = out / "checkpoints"
    if not args.resume:
        for stale in ck.glob("*.ckpt"):
            stale.unlink()
    audit = LeakageAudit()
    kw = dict(opt=cfg.pretrain, arch=arch, seed=cfg.seed, holdout=cfg.protocol.holdout, on_batch=audit)
    dc = tp = tg = None
    if attack.epsilon > 0:
        dc = _aux(ck / "domain_classifier.ckpt", "domain_classifier",
                  lambda: train_domain_classifier(train_set, **kw))
    if kd.lambda1 > 0:
        tp = _aux(ck / "teacher_perceptual.ckpt", "teacher_perceptual",
                  lambda: train_teacher_perceptual(train_set, **kw))
    if kd.lambda2 > 0:
        tg = _aux(ck / "teacher_generative.ckpt", "teacher_generative",
                  lambda: train_teacher_generative(train_set, **kw))
    student = init_student(arch, cfg.seed)
    # a divergence propagates as exit 4; the last completed epoch stays on disk
    student, state = train(student, Teachers(tp, tg), dc, train_set, cfg.optim, attack, kd,
                           cfg.seed, on_batch=audit, checkpoint_path=ck / "student.ckpt",
                           resume=args.resume, max_epochs=args.max_epochs)
    write_loss_csv(state.history, out / "loss.csv")
    if target is not None:
        _write_json(out / "leakage.json",
                    audit.check(ds.select_domains([target]).sample_ids))
    print(f"trained {args.variant} student for {state.epoch} epochs ({state.step} steps); "
          f"final L_sum {state.history[-1]['L_sum']:.4f}; outputs in {out}")
    return 0


def _render_roc(records, path: Path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("--render needs matplotlib (pip install matplotlib)") from None
    from .metrics import roc
    fpr, tpr, _ = roc(records)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr)
    ax.plot([0, 1], [0, 1], ls=":", c="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise InputError("eval needs --checkpoint")
    ck = read_checkpoint(args.checkpoint, kind="student")
    ds = _dataset(args, cfg)
    ck.model.arch.check_dataset(ds.spec)
    target = args.target_domain if args.target_domain is not None else cfg.protocol.target_domain
    if target is not None:
        if target not in ds.domains:
            raise InputError(f"target domain {target} not in dataset domains {ds.domains}")
        ds = ds.select_domains([target])
    out = _out(args, cfg, "eval")
    scores = ck.model.live_probability(torch.from_numpy(ds.images.copy()))
    records = records_from_arrays(scores, ds.liveness, ds.domain_id, ds.sample_ids)
    report = evaluate(records, threshold=args.threshold)
    write_scores(records, out / "scores.csv")
    write_report(report, out / "metrics.json")
    write_roc(records, out / "roc.csv")
    if args.render:
        _render_roc(records, out / "roc.png")
    print(f"HTER {report.hter:.2f}  AUC {report.auc:.2f}  APCER {report.apcer:.2f}  "
          f"BPCER {report.bpcer:.2f}  ACER {report.acer:.2f}  ({report.threshold_source} "
          f"threshold {report.threshold_used:.6g}); outputs in {out}")
    return 0


def _protocol_inputs(args, cfg):
    seeds = (args.seed,) if args.seed is not None else tuple(cfg.protocol.seeds)
    cfg = replace(cfg, protocol=replace(cfg.protocol, seeds=seeds))
    if args.dataset:
        data = load_dataset(args.dataset)
    elif cfg.protocol.resample_data:
        data = cfg.data
    else:
        data = synthesize(cfg.data)
    return cfg, data


def _leakage_report(result, out: Path):
    report = {f"D{r.target}/{r.variant}/{r.seed}": r.leakage for r in result.runs}
    _write_json(out / "leakage.json", report)
    empty = all(not v["intersection"] for v in report.values())
    print(f"leakage audit: {len(report)} runs, all intersections empty: {empty}")


def cmd_protocol(args, cfg: RunConfig) -> int:
    cfg, data = _protocol_inputs(args, cfg)
    spec = ProtocolSpec.from_run_config(cfg, args.variant)
    out = _out(args, cfg)
    _echo_config(cfg, out / spec.kind, variant=spec.name)
    result = run_protocol(spec, data, out_dir=out, jobs=args.jobs, deterministic=args.deterministic)
    if args.audit:
        _leakage_report(result, out / spec.kind)
    print(render_table(result.summary()), end="")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    cfg, data = _protocol_inputs(args, cfg)
    spec = ProtocolSpec.from_run_config(cfg, "full")
    out = _out(args, cfg)
    _echo_config(cfg, out / spec.kind, variants=list(ABLATION_ORDER))
    result = run_ablation_matrix(data, spec, out_dir=out, jobs=args.jobs,
                                 deterministic=args.deterministic)
    summary = result.summary()
    table = render_table(summary)
    (out / spec.kind / "ablation.txt").write_text(table)
    _write_json(out / spec.kind / "ordering.json", ordering_report(summary))
    if args.audit:
        _leakage_report(result, out / spec.kind)
    print(table, end="")
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    runs = Path(args.runs) if args.runs else Path(cfg.output_dir) / cfg.protocol.kind
    summary = summary_from_runs(runs)
    out = Path(args.output) if args.output else runs
    write_summary(summary, out)
    print(render_table(summary), end="")
    if {"baseline", "dual", "full"} <= set(summary["variants"]):
        o = ordering_report(summary)
        print(f"ordering full >= dual >= baseline: {o['ordered']} (gap {o['gap']:+.2f} AUC, "
              f"{o['seeds_ordered']}/{len(o['per_seed'])} seeds)")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "protocol": cmd_protocol, "ablate": cmd_ablate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (see configs/default.yaml)")
    common.add_argument("--seed", type=int, help="seed for data synthesis and training")
    common.add_argument("--deterministic", action="store_true",
                        help="deterministic torch kernels, single-threaded")
    common.add_argument("--jobs", type=int, default=1, help="parallel protocol cells")
    common.add_argument("--output", help="output directory")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="dtda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate and save a synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train auxiliaries and one student")
    p.add_argument("--dataset", help="dataset directory (default: synthesise from config)")
    p.add_argument("--variant", choices=list(VARIANTS), default="full")
    p.add_argument("--target-domain", type=int, help="held-out domain excluded from training")
    p.add_argument("--resume", action="store_true", help="continue from the last epoch checkpoint")
    p.add_argument("--max-epochs", type=int, help="stop after this many epochs (resumable)")

    p = sub.add_parser("eval", parents=[common], help="score a dataset with a student checkpoint")
    p.add_argument("--checkpoint", help="student checkpoint")
    p.add_argument("--dataset", help="dataset directory (default: synthesise from config)")
    p.add_argument("--target-domain", type=int)
    p.add_argument("--threshold", type=float, help="fixed threshold (default: EER point)")
    p.add_argument("--render", action="store_true", help="also write roc.png")

    for name, helptext in (("protocol", "run one variant over every protocol cell"),
                           ("ablate", "run the five-variant ablation matrix")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--dataset", help="fixed dataset directory (default: synthesise per seed)")
        p.add_argument("--audit", action="store_true", help="write the leakage report")
        if name == "protocol":
            p.add_argument("--variant", choices=list(VARIANTS))

    p = sub.add_parser("report", parents=[common], help="rebuild summary and table from run files")
    p.add_argument("--runs", help="protocol directory, e.g. runs/leave_one_out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1 (got {args.jobs})")
        if args.deterministic:
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(1)
        cfg = load_config(args.config)
        if args.seed is not None and args.command not in ("protocol", "ablate"):
            cfg = with_seed(cfg, args.seed)
        return COMMANDS[args.command](args, cfg)
    except DTDAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
