"""Leave-one-out ablation over several seeds, with the ordering check.

    python3 scripts/run_ablation.py --out runs_ablation
    python3 scripts/run_ablation.py --variants baseline perceptual generative dual full
"""
import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from dtda.config import load_config
from dtda.protocols import ProtocolSpec, ordering_report, render_table, run_ablation_matrix


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=["baseline", "dual", "full"])
    ap.add_argument("--out", default=None, help="write per-run files under this directory")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config(args.config)
    cfg = replace(cfg, protocol=replace(cfg.protocol, kind="leave_one_out", seeds=tuple(args.seeds)))
    spec = ProtocolSpec.from_run_config(cfg, "full")
    t0 = time.time()
    result = run_ablation_matrix(cfg.data, spec, out_dir=args.out, jobs=args.jobs,
                                 variants=tuple(args.variants))
    summary = result.summary()
    print(render_table(summary), end="")
    order = ordering_report(summary)
    for v in args.variants:
        print(v, {s: round(a, 2) for s, a in summary["variants"][v]["auc_per_seed"].items()})
    print(json.dumps(order, indent=1))
    print(f"elapsed {time.time() - t0:.0f}s")
    if args.out:
        (Path(args.out) / "ordering.json").write_text(json.dumps(order, indent=2) + "\n")


if __name__ == "__main__":
    main()
