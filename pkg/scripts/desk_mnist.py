"""Desk-scale MNIST protocol: KANICE_MINI and ICB_CNN, 3 epochs on a
10,000-image training subset, batch 64, Adam 1e-3, full test set.

    python scripts/desk_mnist.py --data-dir data/mnist --seeds 1 2 3 --out runs/desk

With several seeds the mean-accuracy ordering KANICE_MINI >= ICB_CNN is
reported.  FGSM accuracy at eps = 0.1 is measured on the first seed's
KANICE_MINI model.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from kanice.protocols import DeskProtocol, run_desk
from kanice.robustness import accuracy, fgsm_attack
from kanice.data import load_dataset
from kanice.models import save_checkpoint


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", required=True)
    ap.add_argument("--dataset", default="mnist")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1])
    ap.add_argument("--train-limit", type=int, default=10_000)
    ap.add_argument("--test-limit", type=int, default=None)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    args = ap.parse_args(argv)

    protocol = DeskProtocol(train_limit=args.train_limit, test_limit=args.test_limit, epochs=args.epochs)
    args.out.mkdir(parents=True, exist_ok=True)
    log = lambda m: print(m, file=sys.stderr, flush=True)
    summary = {"protocol": protocol.to_dict(), "dataset": args.dataset, "runs": {}}
    for i, seed in enumerate(args.seeds):
        trained = run_desk(args.dataset, args.data_dir, protocol, seed=seed, log=log)
        for arch, (model, report) in trained.items():
            (args.out / f"{arch}-run-{seed}.json").write_text(report.to_json() + "\n")
            summary["runs"].setdefault(arch, {})[seed] = report.final["accuracy"]
            save_checkpoint(args.out / f"{arch}-run-{seed}.ktc", model, {"seed": seed})
        if i == 0:
            model = trained["KANICE_MINI"][0]
            test = load_dataset(args.dataset, args.data_dir, "test").limit(args.test_limit, seed)
            adv = fgsm_attack(model, test.images, test.labels, 0.1)
            summary["fgsm_kanice_mini"] = {"clean": accuracy(model, test.images, test.labels),
                                           "eps=0.1": accuracy(model, adv, test.labels)}
    means = {arch: float(np.mean(list(v.values()))) for arch, v in summary["runs"].items()}
    summary["mean_accuracy"] = means
    summary["ordering_holds"] = means["KANICE_MINI"] >= means["ICB_CNN"]
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
