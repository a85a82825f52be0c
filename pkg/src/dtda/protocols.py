"""Cross-domain evaluation protocols and the ablation matrix.

A *cell* is one (target, seed) pair. Inside a cell the domain classifier and
both teachers are trained once on the source rows and shared by every
variant, so a variant's result does not depend on which other variants ran
beside it.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ArchSection, PROTOCOL_KINDS, config_digest, to_dict
from .daa import AttackConfig, domain_confusion_report
from .datagen import Dataset, SynthSpec, split, synthesize
from .distill import KDConfig, Teachers, train, write_loss_csv
from .errors import ConfigError, InputError, LeakageError
from .metrics import (MetricsReport, evaluate, format_rate, read_report, records_from_arrays,
                      write_report, write_scores)
from .models import ArchConfig, OptimConfig, init_student, save_checkpoint
from .pretrain import train_domain_classifier, train_teacher_generative, train_teacher_perceptual

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantFlags:
    use_fr_teacher: bool = False
    use_fa_teacher: bool = False
    use_daa: bool = False


VARIANTS = {
    "baseline": VariantFlags(False, False, False),
    "perceptual": VariantFlags(True, False, False),
    "generative": VariantFlags(False, True, False),
    "dual": VariantFlags(True, True, False),
    "full": VariantFlags(True, True, True),
}
ABLATION_ORDER = ("baseline", "perceptual", "generative", "dual", "full")


def variant_flags(name: str) -> VariantFlags:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANTS)}") from None


def effective_configs(flags: VariantFlags, kd: KDConfig, attack: AttackConfig):
    """Flags switch loss terms and the attack on or off one-to-one."""
    kd = replace(kd, lambda1=kd.lambda1 if flags.use_fr_teacher else 0.0,
                 lambda2=kd.lambda2 if flags.use_fa_teacher else 0.0)
    attack = attack if flags.use_daa else replace(attack, epsilon=0.0)
    return kd, attack


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str = "leave_one_out"
    source_domains: tuple = ()
    target_domain: Optional[int] = None
    variant_flags: VariantFlags = VariantFlags()
    seeds: tuple = (0,)
    arch: ArchSection = ArchSection()
    attack: AttackConfig = AttackConfig()
    kd: KDConfig = KDConfig()
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=15, batch_size=32))
    pretrain: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=30, batch_size=32))
    holdout: float = 0.2
    intra_train_fraction: float = 0.8
    name: str = "full"

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ConfigError(f"ProtocolSpec.kind: expected one of {PROTOCOL_KINDS} (got {self.kind!r})")
        if self.kind == "intra" and self.variant_flags.use_daa:
            # a single domain leaves nothing for the domain classifier to separate
            object.__setattr__(self, "variant_flags", replace(self.variant_flags, use_daa=False))
        if self.kind != "intra" and self.target_domain is not None \
                and self.target_domain in self.source_domains:
            raise ConfigError(f"ProtocolSpec: target domain {self.target_domain} is also a source")
        if not self.seeds:
            raise ConfigError("ProtocolSpec.seeds: need at least one seed")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError(f"ProtocolSpec.holdout: must lie in [0, 1) (got {self.holdout})")

    @classmethod
    def from_run_config(cls, cfg, variant: str = None) -> "ProtocolSpec":
        p = cfg.protocol
        name = variant or p.variant
        return cls(kind=p.kind, source_domains=tuple(p.source_domains), target_domain=p.target_domain,
                   variant_flags=variant_flags(name), seeds=tuple(p.seeds), arch=cfg.arch,
                   attack=cfg.attack, kd=cfg.kd, optim=cfg.optim, pretrain=cfg.pretrain,
                   holdout=p.holdout, intra_train_fraction=p.intra_train_fraction, name=name)


@dataclass(frozen=True)
class Cell:
    kind: str
    sources: tuple
    target: int
    seed: int


def _sources_for(kind, target, domains, explicit):
    if kind == "intra":
        return (target,)
    if explicit:
        return tuple(explicit)
    others = [d for d in domains if d != target]
    return tuple(others if kind == "leave_one_out" else others[:2])


def expand_cells(spec: ProtocolSpec, domains) -> list:
    """All (target, seed) cells. Leave-one-out over 4 domains gives 4 per seed."""
    domains = sorted(domains)
    if spec.target_domain is not None:
        targets = [spec.target_domain]
    elif spec.kind != "intra" and spec.source_domains:
        targets = [d for d in domains if d not in spec.source_domains]
    else:
        targets = domains
    cells = []
    for seed in spec.seeds:
        for t in targets:
            if t not in domains:
                raise InputError(f"target domain {t} not present in dataset (domains {domains})")
            sources = _sources_for(spec.kind, t, domains, spec.source_domains)
            missing = set(sources) - set(domains)
            if missing:
                raise InputError(f"source domains {sorted(missing)} not present in dataset")
            if spec.kind != "intra" and t in sources:
                raise ConfigError(f"target domain {t} is also a source")
            if not sources:
                raise ConfigError(f"no source domains left for target {t}")
            cells.append(Cell(spec.kind, sources, t, seed))
    return cells


class LeakageAudit:
    """Records every sample id handed to any training step."""

    def __init__(self):
        self.seen = set()
        self.batches = 0

    def __call__(self, ids):
        self.seen.update(ids)
        self.batches += 1

    def check(self, held_out_ids) -> dict:
        overlap = sorted(self.seen & set(held_out_ids))
        report = {"seen": len(self.seen), "held_out": len(set(held_out_ids)),
                  "batches": self.batches, "intersection": overlap}
        if overlap:
            raise LeakageError(f"{len(overlap)} held-out samples reached training, e.g. {overlap[:3]}")
        return report


@dataclass
class RunRecord:
    protocol: str
    variant: str
    target: int
    seed: int
    sources: tuple
    metrics: MetricsReport
    config_hash: str
    scores_path: str = None
    checkpoint_paths: dict = field(default_factory=dict)
    leakage: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("protocol", "variant", "target", "seed", "config_hash",
                                           "scores_path", "checkpoint_paths", "leakage", "flags")}
        d["sources"] = list(self.sources)
        d["metrics"] = self.metrics.to_dict()
        return d


@dataclass
class ProtocolResult:
    spec: ProtocolSpec
    runs: list

    def summary(self) -> dict:
        return aggregate([self])


def split_cell(cell: Cell, data: Dataset, spec: ProtocolSpec):
    """(training rows, evaluation rows) for one cell."""
    if cell.kind == "intra":
        pool = data.select_domains([cell.target])
        return split(pool, spec.intra_train_fraction, cell.seed)
    return data.select_domains(cell.sources), data.select_domains([cell.target])


def cell_config(cell: Cell, spec: ProtocolSpec, variant: str, data_spec: SynthSpec) -> dict:
    flags = VARIANTS[variant] if variant in VARIANTS else spec.variant_flags
    if cell.kind == "intra":
        flags = replace(flags, use_daa=False)
    kd, attack = effective_configs(flags, spec.kd, spec.attack)
    return {
        "protocol": cell.kind, "variant": variant, "target_domain": cell.target,
        "source_domains": list(cell.sources), "seed": cell.seed, "variant_flags": to_dict(flags),
        "data": to_dict(data_spec), "arch": to_dict(spec.arch), "attack": to_dict(attack),
        "kd": to_dict(kd), "optim": to_dict(spec.optim), "pretrain": to_dict(spec.pretrain),
        "holdout": spec.holdout, "intra_train_fraction": spec.intra_train_fraction,
    }


def _train_auxiliaries(train_set, spec, arch, seed, need_dc, need_fr, need_fa, audit):
    kw = dict(opt=spec.pretrain, arch=arch, seed=seed, holdout=spec.holdout, on_batch=audit)
    dc = train_domain_classifier(train_set, **kw) if need_dc else None
    tp = train_teacher_perceptual(train_set, **kw) if need_fr else None
    tg = train_teacher_generative(train_set, **kw) if need_fa else None
    return dc, tp, tg


def run_cell(cell: Cell, spec: ProtocolSpec, variants, data, out_dir=None) -> list:
    """Train and score every variant in ``variants`` for one cell.

    ``data`` is a Dataset, or a SynthSpec to be synthesised with ``seed=cell.seed``.
    """
    if isinstance(data, SynthSpec):
        data = synthesize(replace(data, seed=cell.seed))
    train_set, eval_set = split_cell(cell, data, spec)
    arch = ArchConfig.for_spec(data.spec, spec.arch.widths, spec.arch.norm)
    flags = {v: VARIANTS.get(v, spec.variant_flags) for v in variants}
    if cell.kind == "intra":
        flags = {v: replace(f, use_daa=False) for v, f in flags.items()}
    need_dc = any(f.use_daa for f in flags.values()) and spec.attack.epsilon > 0
    need_fr = any(f.use_fr_teacher for f in flags.values()) and spec.kd.lambda1 > 0
    need_fa = any(f.use_fa_teacher for f in flags.values()) and spec.kd.lambda2 > 0

    aux_audit = LeakageAudit()
    dc, tp, tg = _train_auxiliaries(train_set, spec, arch, cell.seed, need_dc, need_fr, need_fa,
                                    aux_audit)
    aux_audit.check(eval_set.sample_ids)
    x_eval = torch.from_numpy(eval_set.images.copy())

    records = []
    for variant in variants:
        cfg = cell_config(cell, spec, variant, data.spec)
        kd, attack = effective_configs(flags[variant], spec.kd, spec.attack)
        run_dir = None if out_dir is None else \
            Path(out_dir) / cell.kind / f"D{cell.target}" / variant / str(cell.seed)
        audit = LeakageAudit()
        audit.seen |= aux_audit.seen
        audit.batches = aux_audit.batches
        student = init_student(arch, cell.seed)
        student, state = train(
            student, Teachers(tp if flags[variant].use_fr_teacher else None,
                              tg if flags[variant].use_fa_teacher else None),
            dc if flags[variant].use_daa else None, train_set, spec.optim, attack, kd,
            cell.seed, on_batch=audit)
        leakage = audit.check(eval_set.sample_ids)
        scores = student.live_probability(x_eval)
        recs = records_from_arrays(scores, eval_set.liveness, eval_set.domain_id, eval_set.sample_ids)
        report = evaluate(recs)
        rec = RunRecord(cell.kind, variant, cell.target, cell.seed, cell.sources, report,
                        config_digest(cfg), leakage=leakage, flags=to_dict(flags[variant]))
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
            rec.scores_path = str(write_scores(recs, run_dir / "scores.csv"))
            write_report(report, run_dir / "metrics.json")
            write_loss_csv(state.history, run_dir / "loss.csv")
            ck = run_dir / "checkpoints"
            rec.checkpoint_paths["student"] = str(save_checkpoint(
                student, ck / "student.ckpt", step=state.step, seed=cell.seed))
            for name, model in (("domain_classifier", dc), ("teacher_perceptual", tp),
                                ("teacher_generative", tg)):
                used = {"domain_classifier": attack.epsilon > 0,
                        "teacher_perceptual": kd.lambda1 > 0,
                        "teacher_generative": kd.lambda2 > 0}[name]
                if model is not None and used:
                    rec.checkpoint_paths[name] = str(save_checkpoint(
                        model, ck / f"{name}.ckpt", seed=cell.seed, extra={"report": model.report}))
            (run_dir / "leakage.json").write_text(json.dumps(leakage, indent=2) + "\n")
        log.info("%s D%d %s seed %d: AUC %.2f HTER %.2f", cell.kind, cell.target, variant,
                 cell.seed, report.auc, report.hter)
        records.append(rec)
    return records


def _run_cell_job(args):
    cell, spec, variants, data, out_dir, deterministic = args
    torch.set_num_threads(1)
    if deterministic:
        torch.use_deterministic_algorithms(True)
    return run_cell(cell, spec, variants, data, out_dir)


def _run_cells(spec, variants, data, out_dir, jobs, deterministic=False) -> list:
    domains = range(data.num_domains) if isinstance(data, SynthSpec) else data.domains
    cells = expand_cells(spec, domains)
    args = [(c, spec, tuple(variants), data, out_dir, deterministic) for c in cells]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(_run_cell_job, args))
    else:
        batches = [run_cell(*a[:5]) for a in args]
    return [r for batch in batches for r in batch]


def run_protocol(spec: ProtocolSpec, data, out_dir=None, jobs: int = 1,
                 deterministic: bool = False) -> ProtocolResult:
    """Run one variant over every cell. ``data``: Dataset, or SynthSpec (one world per seed)."""
    runs = _run_cells(spec, [spec.name], data, out_dir, jobs, deterministic)
    result = ProtocolResult(spec, runs)
    if out_dir is not None:
        write_summary(result.summary(), Path(out_dir) / spec.kind)
    return result


def run_ablation_matrix(data, base_spec: ProtocolSpec, out_dir=None, jobs: int = 1,
                        variants=ABLATION_ORDER, deterministic: bool = False) -> ProtocolResult:
    """All ablation variants with shared seeds and shared auxiliaries per cell."""
    for v in variants:
        variant_flags(v)
    runs = _run_cells(base_spec, variants, data, out_dir, jobs, deterministic)
    result = ProtocolResult(base_spec, runs)
    if out_dir is not None:
        write_summary(result.summary(), Path(out_dir) / base_spec.kind)
    return result


def _mean_std(values) -> tuple:
    values = sorted(values)
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def aggregate(results) -> dict:
    """Mean and (population) std of HTER and AUC per variant, across targets and seeds.

    Exact summation over sorted values makes the summary independent of the
    order of ``results``.
    """
    runs = [r for res in results for r in (res.runs if isinstance(res, ProtocolResult) else [res])]
    if not runs:
        raise InputError("aggregate: no results")
    out = {}
    for variant in sorted({r.variant for r in runs}):
        rs = [r for r in runs if r.variant == variant]
        hter_m, hter_s = _mean_std([r.metrics.hter for r in rs])
        auc_m, auc_s = _mean_std([r.metrics.auc for r in rs])
        per_target = {}
        for t in sorted({r.target for r in rs}):
            rt = [r for r in rs if r.target == t]
            h, hs = _mean_std([r.metrics.hter for r in rt])
            a, as_ = _mean_std([r.metrics.auc for r in rt])
            per_target[f"D{t}"] = {"hter_mean": h, "hter_std": hs, "auc_mean": a, "auc_std": as_,
                                   "n": len(rt)}
        per_seed = {}
        for s in sorted({r.seed for r in rs}):
            per_seed[str(s)] = _mean_std([r.metrics.auc for r in rs if r.seed == s])[0]
        out[variant] = {"hter_mean": hter_m, "hter_std": hter_s, "auc_mean": auc_m,
                        "auc_std": auc_s, "n": len(rs), "per_target": per_target,
                        "auc_per_seed": per_seed}
    return {"variants": out,
            "runs": sorted((r.to_dict() for r in runs),
                           key=lambda d: (d["protocol"], d["variant"], d["target"], d["seed"],
                                          json.dumps(d, sort_keys=True)))}


def render_table(summary: dict, order=ABLATION_ORDER) -> str:
    """Plain-text table: one row per variant, HTER/AUC per target plus the mean."""
    variants = [v for v in order if v in summary["variants"]] + \
        sorted(v for v in summary["variants"] if v not in order)
    targets = sorted({t for v in variants for t in summary["variants"][v]["per_target"]})
    head = ["variant"] + [f"{t} {m}" for t in targets for m in ("HTER", "AUC")] + \
        ["Mean HTER", "Mean AUC"]
    rows = []
    for v in variants:
        s = summary["variants"][v]
        row = [v]
        for t in targets:
            pt = s["per_target"].get(t)
            row += ["-", "-"] if pt is None else [format_rate(pt["hter_mean"]), format_rate(pt["auc_mean"])]
        row += [format_rate(s["hter_mean"]), format_rate(s["auc_mean"])]
        rows.append(row)
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [head] + rows]
    return "\n".join(lines) + "\n"


def write_summary(summary: dict, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (directory / "summary.txt").write_text(render_table(summary))
    return directory / "summary.json"


def summary_from_runs(directory) -> dict:
    """Recompute a summary from the per-run metrics.json files under ``directory``."""
    directory = Path(directory)
    runs = []
    for metrics_path in sorted(directory.glob("D*/*/*/metrics.json")):
        run_dir = metrics_path.parent
        cfg = json.loads((run_dir / "config.json").read_text())
        runs.append(RunRecord(cfg["protocol"], cfg["variant"], cfg["target_domain"], cfg["seed"],
                              tuple(cfg["source_domains"]), read_report(metrics_path),
                              config_digest(cfg)))
    if not runs:
        raise InputError(f"no metrics.json files under {directory}")
    return aggregate(runs)


def ordering_report(summary: dict, low="baseline", mid="dual", high="full") -> dict:
    """Mean-AUC ordering check ``high >= mid >= low`` overall and per seed."""
    v = summary["variants"]
    seeds = sorted(v[low]["auc_per_seed"])
    per_seed = {s: v[high]["auc_per_seed"][s] >= v[mid]["auc_per_seed"][s] >= v[low]["auc_per_seed"][s]
                for s in seeds}
    return {
        "auc": {k: v[k]["auc_mean"] for k in (low, mid, high)},
        "ordered": v[high]["auc_mean"] >= v[mid]["auc_mean"] >= v[low]["auc_mean"],
        "gap": v[high]["auc_mean"] - v[low]["auc_mean"],
        "per_seed": per_seed,
        "seeds_ordered": int(np.sum(list(per_seed.values()))),
    }


def domain_confusion_run(data_spec: SynthSpec, seed: int, sources=(0, 1, 2),
                         pretrain: OptimConfig = None, attack: AttackConfig = AttackConfig(),
                         arch: ArchSection = ArchSection(), holdout: float = 0.2) -> dict:
    """Train a domain classifier on ``sources`` and attack its held-out rows.

    The synthetic world is drawn with ``seed`` as well, so seeds differ in data
    and in training.
    """
    data = synthesize(replace(data_spec, seed=seed)).select_domains(sources)
    pretrain = pretrain or OptimConfig(epochs=30, batch_size=32)
    fit_set, val_set = split(data, 1.0 - holdout, seed)
    model_arch = ArchConfig.for_spec(data.spec, arch.widths, arch.norm)
    dc = train_domain_classifier(fit_set, pretrain, model_arch, seed, holdout=0.0)
    report = domain_confusion_report(dc, val_set, attack, seed=seed)
    report.update(seed=seed, sources=list(sources), n_eval=len(val_set),
                  chance=1.0 / len(sources), final_train_loss=dc.report["final_loss"])
    return report
