"""Command-line entry point: ``kanice {train,compare,attack}``.

Settings resolve in three layers: built-in defaults, then the ``[<command>]``
section of the ``--config`` file (``key = value`` lines, keys spelled like
the long flags with either ``-`` or ``_``), then explicit flags.

Exit codes: 0 success, 2 bad arguments, 3 data or checkpoint errors,
4 training failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import DATASETS, DataError, Dataset, load_dataset
from .layers import GroupMismatch
from .models import (InvalidSpec, KANConfig, MiniConfig, ModelSpec, build, canonical_variant,
                     load_checkpoint, save_checkpoint)
from .robustness import DEFAULT_EPSILONS, AttackConfig, fgsm_attack, feature_shift, robustness_table
from .spline import RankDeficient
from .stats import RunSet, paired_t_test, summarize
from .training import InvalidConfig, RunReport, TrainConfig, TrainingFailure, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4

DATA_ENV = "KANICE_DATA"

DEFAULTS = {
    "arch": "kanice-mini", "dataset": "mnist", "data_dir": None, "out": "runs", "seed": 1,
    "limit": None, "test_limit": None, "emnist_split": "balanced",
    "epochs": 25, "batch_size": 64, "lr": 1e-3, "optimizer": "adam", "lam": None,
    "grid_extension": (), "channels": (64, 128), "fc_hidden": 256, "activation": "gelu",
    "kan_grid": 8, "kan_degree": 3, "mini_grid": 8, "mini_groups": 1, "mini_nonshared": False,
    "normalize": None, "non_deterministic": False, "quiet": False,
    "archs": ("kanice-mini", "icb-cnn"), "seeds": None, "runs": 5, "target": None, "ingest": None,
    "checkpoint": None, "eps": DEFAULT_EPSILONS, "feature_shift": False,
}


class UsageError(Exception):
    pass


def _float_list(text: str) -> tuple:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _str_list(text: str) -> tuple:
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _schedule(text: str) -> tuple:
    """``"2:10,4:12"`` -> ((2, 10), (4, 12)): at epoch 2 extend to g=10, ..."""
    items = []
    for part in _str_list(text):
        epoch, _, g = part.partition(":")
        items.append((int(epoch), int(g)))
    return tuple(items)


def _normalize(text: str) -> tuple:
    """``"0.13/0.31"`` or ``"0.49,0.48,0.45/0.25,0.24,0.26"``."""
    mean, sep, std = str(text).partition("/")
    if not sep:
        raise ValueError("expected MEANS/STDS")
    return (_float_list(mean), _float_list(std))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file with a section per command")
    p.add_argument("--out", help="output directory (default: runs)")
    p.add_argument("--seed", type=int, help="base seed for every random stream (default: 1)")
    p.add_argument("--dataset", help="mnist, fashion-mnist, emnist[-split], svhn, cifar10 or container")
    p.add_argument("--data-dir", help=f"directory holding the dataset files (default: ${DATA_ENV}/<dataset>)")
    p.add_argument("--emnist-split", help="EMNIST split when --dataset emnist (default: balanced)")
    p.add_argument("--limit", type=int, help="train on the first N samples after a seeded shuffle")
    p.add_argument("--test-limit", type=int, help="evaluate on N test samples (seeded subset)")
    p.add_argument("--quiet", action="store_true", default=None)


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lam", type=float, help="spline L1 weight (default: the model's setting, 1e-4)")
    p.add_argument("--grid-extension", type=_schedule, help="EPOCH:G[,EPOCH:G...]")
    p.add_argument("--channels", type=_int_list, help="trunk channel plan, e.g. 64,128")
    p.add_argument("--fc-hidden", type=int)
    p.add_argument("--activation", choices=("gelu", "silu", "relu"))
    p.add_argument("--kan-grid", type=int)
    p.add_argument("--kan-degree", type=int)
    p.add_argument("--mini-grid", type=int)
    p.add_argument("--mini-groups", type=int)
    p.add_argument("--mini-nonshared", action="store_true", default=None)
    p.add_argument("--normalize", type=_normalize, help="per-channel MEANS/STDS applied inside the model")
    p.add_argument("--non-deterministic", action="store_true", default=None)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="kanice", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one architecture")
    _common(p_train)
    _training(p_train)
    p_train.add_argument("--arch", help="cnn, cnn-kan, icb, icb-kan, icb-cnn, kanice, kanice-mini")

    p_cmp = sub.add_parser("compare", help="multi-seed comparison with mean/std and paired t-tests")
    _common(p_cmp)
    _training(p_cmp)
    p_cmp.add_argument("--archs", type=_str_list, help="comma-separated architectures")
    p_cmp.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: seed..seed+runs-1)")
    p_cmp.add_argument("--runs", type=int)
    p_cmp.add_argument("--target", help="architecture tested against the runner-up (default: best mean)")
    p_cmp.add_argument("--ingest", help="aggregate existing run-*.json files under this directory; no training")

    p_att = sub.add_parser("attack", help="FGSM robustness table for trained checkpoints")
    _common(p_att)
    p_att.add_argument("--checkpoint", nargs="+", help="checkpoint file(s) written by train")
    p_att.add_argument("--eps", type=_float_list, help="comma-separated epsilons (default: 0.01,0.03,0.05,0.1)")
    p_att.add_argument("--feature-shift", action="store_true", default=None,
                       help="also report feature shift at the trunk and head taps")
    return parser, {"train": p_train, "compare": p_cmp, "attack": p_att}


def resolve(args: argparse.Namespace, sub: argparse.ArgumentParser) -> dict:
    """Merge defaults < config file section < flags into a plain dict."""
    section = {}
    if args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise UsageError(f"config file {args.config} not found")
        if cp.has_section(args.command):
            section = {k.replace("-", "_"): v for k, v in cp.items(args.command)}
        unknown = set(section) - {a.dest for a in sub._actions}
        if unknown:
            raise UsageError(f"unknown keys in [{args.command}]: {sorted(unknown)}")
    resolved = {}
    for action in sub._actions:
        dest = action.dest
        if dest in ("help", "config"):
            continue
        value = getattr(args, dest, None)
        if value is None and dest in section:
            raw = section[dest]
            try:
                if isinstance(action, argparse._StoreTrueAction):
                    value = configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
                elif action.nargs == "+":
                    value = [action.type(v) if action.type else v for v in raw.split()]
                else:
                    value = action.type(raw) if action.type else raw
            except (KeyError, ValueError) as exc:
                raise UsageError(f"bad value for {dest} in config: {raw!r}") from exc
        if value is None:
            value = DEFAULTS.get(dest)
        resolved[dest] = value
    resolved["command"] = args.command
    return resolved


# ---------------------------------------------------------------- helpers

def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _log(cfg: dict):
    if cfg.get("quiet"):
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def _data_dir(cfg: dict) -> Path:
    if cfg["dataset"].lower().replace("_", "-") not in DATASETS:
        raise UsageError(f"unknown dataset {cfg['dataset']!r}; choose from {', '.join(DATASETS)}")
    if cfg["data_dir"]:
        return Path(cfg["data_dir"])
    root = os.environ.get(DATA_ENV)
    if not root:
        raise DataError(f"no --data-dir given and ${DATA_ENV} is unset")
    return Path(root) / cfg["dataset"]


def load_splits(cfg: dict) -> tuple[Dataset, Dataset]:
    directory = _data_dir(cfg)
    train_ds = load_dataset(cfg["dataset"], directory, "train", cfg["emnist_split"])
    test_ds = load_dataset(cfg["dataset"], directory, "test", cfg["emnist_split"])
    return train_ds.limit(cfg["limit"], cfg["seed"]), test_ds.limit(cfg["test_limit"], cfg["seed"])


def make_spec(cfg: dict, arch: str, ds: Dataset) -> ModelSpec:
    channels = tuple(cfg["channels"])
    if len(channels) != 2:
        raise InvalidSpec("--channels takes exactly two values")
    return ModelSpec(
        variant=arch, input_shape=ds.input_shape, num_classes=ds.num_classes,
        channel_plan=channels, fc_hidden=cfg["fc_hidden"], activation=cfg["activation"],
        kan_config=KANConfig(grid_size=cfg["kan_grid"], degree=cfg["kan_degree"]),
        mini_config=MiniConfig(grid_size=cfg["mini_grid"], groups=cfg["mini_groups"],
                               shared=not cfg["mini_nonshared"]),
        normalize=cfg["normalize"])


def make_train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
                       optimizer=cfg["optimizer"], seed=seed, lam=cfg["lam"],
                       grid_extension_schedule=cfg["grid_extension"],
                       deterministic=not cfg["non_deterministic"])


def _csv_with_config(body: str, cfg: dict) -> str:
    return f"# config={json.dumps(_jsonable(cfg), sort_keys=True)}\n{body}"


def run_one(cfg: dict, arch: str, seed: int, train_ds: Dataset, test_ds: Dataset, out: Path) -> RunReport:
    """Train ``arch`` with ``seed`` and write run-<seed>.{json,csv,ktc} to ``out``."""
    spec = make_spec(cfg, arch, train_ds)
    tcfg = make_train_config(cfg, seed)
    model = build(spec, seed=seed)
    log = _log(cfg)
    if log:
        log(f"[{spec.variant} seed {seed}] {len(train_ds)} train / {len(test_ds)} test samples")
    report = train(model, train_ds, test_ds, tcfg, log=log)
    context = {**cfg, "arch": spec.variant, "seed": seed}
    report.context = _jsonable(context)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"run-{seed}.json").write_text(report.to_json() + "\n")
    (out / f"run-{seed}.csv").write_text(_csv_with_config(report.curves_csv(), context))
    save_checkpoint(out / f"run-{seed}.ktc", model,
                    {"seed": seed, "train_config": tcfg.to_dict(), "context": report.context})
    return report


# ---------------------------------------------------------------- commands

def cmd_train(cfg: dict) -> int:
    arch = canonical_variant(cfg["arch"])
    train_ds, test_ds = load_splits(cfg)
    report = run_one(cfg, arch, cfg["seed"], train_ds, test_ds, Path(cfg["out"]))
    final = report.final
    print(f"{arch} seed {cfg['seed']}: accuracy {final['accuracy']:.4f} f1 {final['f1']:.4f} "
          f"-> {Path(cfg['out']) / ('run-%d.json' % cfg['seed'])}")
    return EXIT_OK


def _ingest(directory: Path) -> dict[str, dict[int, float]]:
    runs: dict[str, dict[int, float]] = {}
    files = sorted(directory.rglob("run-*.json"))
    if not files:
        raise DataError(f"no run-*.json files under {directory}")
    for path in files:
        try:
            d = json.loads(path.read_text())
            variant = d["model"]["variant"]
            seed = int(d["seed"])
            acc = float(d["epochs"][-1]["accuracy"])
        except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: not a run report ({exc})") from exc
        runs.setdefault(variant, {})[seed] = acc
    return runs


def comparison(runs: dict[str, dict[int, float]], target: str | None = None) -> dict:
    """Mean/std per architecture (accuracy in percent) and a paired t-test of
    the target against the runner-up by mean accuracy."""
    rows = []
    for arch, by_seed in runs.items():
        seeds = sorted(by_seed)
        accs = [100.0 * by_seed[s] for s in seeds]
        s = summarize(accs)
        rows.append({"arch": arch, "seeds": seeds, "accuracies": accs, "mean": s["mean"], "std": s["std"]})
    rows.sort(key=lambda r: -r["mean"])
    tests = []
    if len(rows) >= 2:
        tgt = rows[0] if target is None else next((r for r in rows if r["arch"] == target), None)
        if tgt is None:
            raise InvalidSpec(f"target {target} has no runs")
        other = next(r for r in rows if r is not tgt)
        common = sorted(set(tgt["seeds"]) & set(other["seeds"]))
        a = RunSet(tgt["arch"], "", [100.0 * runs[tgt["arch"]][s] for s in common], common)
        b = RunSet(other["arch"], "", [100.0 * runs[other["arch"]][s] for s in common], common)
        result = paired_t_test(a, b) if len(common) >= 2 else None
        tests.append({"target": tgt["arch"], "versus": other["arch"], "seeds": common,
                      **(result.to_dict() if result else {"flag": "TooFewRuns"})})
    return {"rows": rows, "t_tests": tests}


def _comparison_csvs(report: dict, cfg: dict) -> tuple[str, str]:
    n = max((len(r["accuracies"]) for r in report["rows"]), default=0)
    lines = [",".join(["arch"] + [f"run_{i + 1}" for i in range(n)] + ["mean", "std"])]
    for r in report["rows"]:
        cells = [f"{a:.4f}" for a in r["accuracies"]] + [""] * (n - len(r["accuracies"]))
        std = "" if r["std"] is None else f"{r['std']:.4f}"
        lines.append(",".join([r["arch"]] + cells + [f"{r['mean']:.4f}", std]))
    tlines = ["target,versus,t,p,dof,flag"]
    for t in report["t_tests"]:
        fmt = lambda v: "" if v is None else repr(v)
        tlines.append(",".join([t["target"], t["versus"], fmt(t.get("t")), fmt(t.get("p")),
                                fmt(t.get("dof")), t.get("flag") or ""]))
    return _csv_with_config("\n".join(lines) + "\n", cfg), _csv_with_config("\n".join(tlines) + "\n", cfg)


def cmd_compare(cfg: dict) -> int:
    out = Path(cfg["out"])
    if cfg["ingest"]:
        runs = _ingest(Path(cfg["ingest"]))
    else:
        archs = [canonical_variant(a) for a in cfg["archs"]]
        seeds = list(cfg["seeds"] or range(cfg["seed"], cfg["seed"] + cfg["runs"]))
        if len(seeds) < 2:
            raise UsageError("compare needs at least two seeds")
        runs = {}
        for seed in seeds:
            train_ds, test_ds = load_splits({**cfg, "seed": seed})
            for arch in archs:
                report = run_one(cfg, arch, seed, train_ds, test_ds, out / arch)
                runs.setdefault(arch, {})[seed] = report.final["accuracy"]
    target = canonical_variant(cfg["target"]) if cfg["target"] else None
    report = {"config": _jsonable(cfg), **comparison(runs, target)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    table, ttest = _comparison_csvs(report, cfg)
    (out / "comparison.csv").write_text(table)
    (out / "comparison-ttest.csv").write_text(ttest)
    for r in report["rows"]:
        std = "n/a" if r["std"] is None else f"{r['std']:.2f}"
        print(f"{r['arch']:<12} {r['mean']:.2f} +- {std}  ({len(r['accuracies'])} runs)")
    for t in report["t_tests"]:
        detail = t["flag"] if t.get("flag") else f"t={t['t']:.3f} p={t['p']:.4g}"
        print(f"{t['target']} vs {t['versus']}: {detail}")
    return EXIT_OK


def cmd_attack(cfg: dict) -> int:
    paths = [Path(p) for p in (cfg["checkpoint"] or [])]
    if not paths:
        raise UsageError("attack needs --checkpoint")
    for p in paths:
        if not p.is_file():
            raise DataError(f"checkpoint {p} not found")
    models, meta = {}, {}
    for p in paths:
        model, m = load_checkpoint(p)
        name = f"{model.spec.variant}:{p.stem}"
        models[name] = model
        meta[name] = m
    directory = _data_dir(cfg)
    test_ds = load_dataset(cfg["dataset"], directory, "test", cfg["emnist_split"]).limit(cfg["limit"], cfg["seed"])
    acfg = AttackConfig(epsilons=cfg["eps"])
    table = robustness_table(models, test_ds, acfg)
    result = {"config": _jsonable(cfg), "checkpoints": meta, **table.to_dict()}
    if cfg["feature_shift"]:
        shifts = {}
        for name, model in models.items():
            shifts[name] = {}
            for eps in acfg.epsilons:
                adv = fgsm_attack(model, test_ds.images, test_ds.labels, eps, acfg)
                shifts[name][f"eps={eps:g}"] = feature_shift(model, test_ds.images, adv)
        result["feature_shift"] = shifts
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "robustness.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    (out / "robustness.csv").write_text(_csv_with_config(table.to_csv(), cfg))
    print(table.to_csv(), end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "attack": cmd_attack}


def main(argv=None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    sub = subs[args.command]
    try:
        cfg = resolve(args, sub)
        return COMMANDS[args.command](cfg)
    except (UsageError, InvalidSpec, InvalidConfig, GroupMismatch) as exc:
        sub.print_usage(sys.stderr)
        print(f"kanice {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"kanice {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingFailure, RankDeficient, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"kanice {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
