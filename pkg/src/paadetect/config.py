"""Run configuration: one JSON document with train, loss, augment, bank and attack sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attacks import ALGORITHMS, AttackSpec
from .augment import AugmentConfig
from .losses import LossConfig
from .tensor import ConfigurationError

SECTIONS = ("train", "loss", "augment", "bank", "attack")


@dataclass
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 20
    lr: float = 0.03
    milestones: tuple[int, ...] = (120, 160)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 256
    variant: str = "XS"
    paa_blocks: int | None = None
    m_enc: float = 0.99
    seed: int = 0
    use_pm: bool = True
    use_pce: bool = True
    use_icl: bool = True

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigurationError("warmup_epochs must lie in [0, epochs]")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigurationError("milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ConfigurationError("milestones must be smaller than epochs")
        if not (self.lr > 0 and self.lr_factor > 0 and self.momentum >= 0 and self.weight_decay >= 0):
            raise ConfigurationError("rates must be positive (momentum and weight decay non-negative)")
        if not 0 <= self.m_enc <= 1:
            raise ConfigurationError("m_enc must lie in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate in (1-based) ``epoch``: one factor per milestone already passed."""
        drops = sum(1 for m in self.milestones if epoch > m)
        return self.lr * self.lr_factor**drops


@dataclass
class BankConfig:
    num_prototypes: int = 10
    capacity: int = 10
    density_fraction: float = 0.02

    def __post_init__(self):
        if self.num_prototypes < 2:
            raise ConfigurationError("bank.num_prototypes must be >= 2 (one positive, >= 1 negative)")
        if self.capacity < 1:
            raise ConfigurationError("bank.capacity must be >= 1")
        if not 0 < self.density_fraction < 1:
            raise ConfigurationError("bank.density_fraction must lie in (0, 1)")


@dataclass
class AttackConfig:
    attacks: tuple[AttackSpec, ...] = field(default_factory=lambda: tuple(AttackSpec.default(a) for a in ALGORITHMS))
    clean_pass_rate: float = 0.95
    probe_epochs: int = 500

    def __post_init__(self):
        self.attacks = tuple(parse_attack(a) for a in self.attacks)
        if not 0 < self.clean_pass_rate <= 1:
            raise ConfigurationError("attack.clean_pass_rate must lie in (0, 1]")


def parse_attack(item) -> AttackSpec:
    if isinstance(item, AttackSpec):
        return item
    if isinstance(item, str):
        return AttackSpec.default(item)
    if isinstance(item, dict):
        item = dict(item)
        name = item.pop("algorithm", None)
        if name is None:
            raise ConfigurationError(f"attack entry without 'algorithm': {item}")
        return AttackSpec.default(name, **item)
    raise ConfigurationError(f"cannot read attack entry {item!r}")


@dataclass
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    @classmethod
    def desk(cls) -> "Config":
        """Desk-scale defaults: XS encoder, batch 64, 40 epochs, r = 512."""
        return cls(train=TrainConfig(epochs=40, warmup_epochs=4, milestones=(24, 32), batch_size=64),
                   loss=LossConfig(r=512))

    @classmethod
    def from_dict(cls, doc: dict, base: "Config | None" = None) -> "Config":
        base = base or cls.desk()
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config sections {sorted(unknown)}; expected {SECTIONS}")
        out = {}
        for name in SECTIONS:
            current = getattr(base, name)
            section = doc.get(name, {})
            if name == "attack" and isinstance(section, list):
                section = {"attacks": section}
            allowed = {f.name for f in fields(current)}
            bad = set(section) - allowed
            if bad:
                raise ConfigurationError(f"unknown keys in '{name}': {sorted(bad)}")
            out[name] = replace(current, **section)
        return cls(**out)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        doc = {name: asdict(getattr(self, name)) for name in SECTIONS}
        doc["attack"]["attacks"] = [a.to_dict() for a in self.attack.attacks]
        return json.loads(json.dumps(doc))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
