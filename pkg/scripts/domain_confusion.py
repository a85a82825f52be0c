"""Clean vs attacked accuracy of a domain classifier on three source domains.

    python3 scripts/domain_confusion.py --seeds 0 1 2
"""
import argparse
import json
import time

from dtda.config import load_config
from dtda.protocols import domain_confusion_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--sources", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--json", help="write the per-seed reports here")
    args = ap.parse_args()
    cfg = load_config(args.config)
    rows = []
    for seed in args.seeds:
        t0 = time.time()
        r = domain_confusion_run(cfg.data, seed, tuple(args.sources), cfg.pretrain, cfg.attack,
                                 cfg.arch, cfg.protocol.holdout)
        r["seconds"] = round(time.time() - t0, 1)
        rows.append(r)
        print(f"seed {seed}: clean {r['clean_acc']:.3f}  attacked {r['attacked_acc']:.3f}  "
              f"(chance {r['chance']:.3f}, {r['seconds']}s)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
