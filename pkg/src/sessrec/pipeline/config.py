"""Run configuration and the A-G feature ladder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Union

import tomli

from ..losses import LossWeights
from ..model import ModelConfig

# Each configuration letter adds exactly one feature to the previous one.
LADDER = (
    ("A", "mlp_basic"),
    ("B", "train_augment"),
    ("C", "transformer"),
    ("D", "group_head"),
    ("E", "reweight"),
    ("F", "click_task"),
    ("G", "tta"),
)
LETTERS = tuple(letter for letter, _ in LADDER)

DESCRIPTIONS = {
    "A": "MLP basic model",
    "B": "+ randomness-in-session augmentation (train)",
    "C": "+ transformer backbone",
    "D": "+ two-headed (buy and group) prediction",
    "E": "+ session-aware loss reweighting",
    "F": "+ multi-tasking with click prediction",
    "G": "+ randomness-in-session augmentation (inference)",
}


def features_for(letter: str) -> frozenset:
    letter = letter.upper()
    if letter not in LETTERS:
        raise ValueError(f"config letter must be one of {''.join(LETTERS)}, got {letter!r}")
    return frozenset(name for _, name in LADDER[:LETTERS.index(letter) + 1])


@dataclass
class RunConfig:
    letter: str = "F"
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    loss: LossWeights = field(default_factory=LossWeights)
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-2
    seed: int = 0
    tta: Union[str, int] = 8
    val_ratio: float = 0.85
    split_seed: int = 0
    eval_batch: int = 512
    max_train: int = 0           # 0 = use every training entry
    workers: int = 1

    def __post_init__(self):
        self.letter = self.letter.upper()
        self.features = features_for(self.letter)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.uses_transformer:
            if self.model.variant != "transformer":
                self.model = ModelConfig(**{**self.model.to_dict(), "variant": "transformer"})
        elif self.model.variant != "mlp_baseline":
            self.model = ModelConfig(**{**self.model.to_dict(), "variant": "mlp_baseline"})
        if isinstance(self.tta, str) and self.tta not in ("none", "full"):
            self.tta = int(self.tta)

    @property
    def uses_transformer(self) -> bool:
        return "transformer" in self.features

    @property
    def train_augment(self) -> bool:
        return "train_augment" in self.features

    @property
    def uses_group(self) -> bool:
        return "group_head" in self.features

    @property
    def uses_reweight(self) -> bool:
        return "reweight" in self.features

    @property
    def uses_click(self) -> bool:
        return "click_task" in self.features

    @property
    def tta_mode(self) -> Union[str, int]:
        return self.tta if "tta" in self.features else "none"

    @property
    def loss_stage(self) -> str:
        if self.uses_click:
            return "reweight+group+click"
        if self.uses_reweight:
            return "reweight+group"
        if self.uses_group:
            return "buy+group"
        return "buy"

    def with_letter(self, letter: str) -> "RunConfig":
        values = self.to_dict()
        values["letter"] = letter
        return RunConfig(**values)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["model"] = self.model.to_dict()
        out["loss"] = asdict(self.loss)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        values = dict(values)
        if "config" in values:
            values["letter"] = values.pop("config")
        model = dict(values.pop("model", {}))
        preset = model.pop("preset", "desk") if isinstance(model, dict) else "desk"
        base = ModelConfig.full if preset == "full" else ModelConfig.desk
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown run settings: {sorted(unknown)}")
        loss = LossWeights(**values.pop("loss", {}))
        return cls(model=base(**model), loss=loss, **values)


def load_run_config(source: str) -> RunConfig:
    """A config letter (``"F"``) or a TOML file of overrides."""
    if source.upper() in LETTERS:
        return RunConfig(letter=source)
    with open(Path(source), "rb") as fh:
        return RunConfig.from_dict(tomli.load(fh))
