"""Fixed experiment protocols shared by scripts/ and the acceptance suite."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .data import Dataset, load_dataset
from .models import ModelSpec, build
from .robustness import DEFAULT_EPSILONS, AttackConfig, robustness_table
from .training import TrainConfig, train


@dataclass
class DeskProtocol:
    archs: tuple = ("KANICE_MINI", "ICB_CNN")
    train_limit: int | None = 10_000
    test_limit: int | None = None
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def load_limited(name: str, data_dir, protocol: DeskProtocol, seed: int) -> tuple[Dataset, Dataset]:
    train_ds = load_dataset(name, data_dir, "train").limit(protocol.train_limit, seed)
    test_ds = load_dataset(name, data_dir, "test").limit(protocol.test_limit, seed)
    return train_ds, test_ds


def run_desk(dataset: str, data_dir, protocol: DeskProtocol | None = None, seed: int | None = None,
             log=None, spec_overrides: dict | None = None) -> dict:
    """Train every architecture of ``protocol`` once; returns
    ``{arch: (model, RunReport)}``."""
    protocol = protocol or DeskProtocol()
    seed = protocol.seed if seed is None else seed
    train_ds, test_ds = load_limited(dataset, data_dir, protocol, seed)
    cfg = TrainConfig(epochs=protocol.epochs, batch_size=protocol.batch_size,
                      learning_rate=protocol.learning_rate, seed=seed)
    out = {}
    for arch in protocol.archs:
        spec = ModelSpec(variant=arch, input_shape=train_ds.input_shape,
                         num_classes=train_ds.num_classes, **(spec_overrides or {}))
        model = build(spec, seed=seed)
        if log:
            log(f"[{arch} seed {seed}] {len(train_ds)} train / {len(test_ds)} test")
        report = train(model, train_ds, test_ds, cfg, log=log)
        out[arch] = (model, report)
    return out


@dataclass
class AttackProtocol:
    archs: tuple = ("KANICE", "CNN")
    train_limit: int | None = 5_000
    test_limit: int | None = 1_000
    epochs: int = 5
    seed: int = 1
    epsilons: tuple = field(default=DEFAULT_EPSILONS)


def run_attack(dataset: str, data_dir, protocol: AttackProtocol | None = None, log=None) -> dict:
    """Train each architecture briefly, then tabulate FGSM accuracy."""
    protocol = protocol or AttackProtocol()
    desk = DeskProtocol(archs=protocol.archs, train_limit=protocol.train_limit,
                        test_limit=protocol.test_limit, epochs=protocol.epochs, seed=protocol.seed)
    trained = run_desk(dataset, data_dir, desk, log=log)
    _, test_ds = load_limited(dataset, data_dir, desk, protocol.seed)
    models = {arch: model for arch, (model, _) in trained.items()}
    table = robustness_table(models, test_ds, AttackConfig(epsilons=protocol.epsilons))
    return {"protocol": asdict(protocol), "table": table, "models": models, "test": test_ds,
            "reports": {arch: report for arch, (_, report) in trained.items()}}
