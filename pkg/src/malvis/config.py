"""Run configuration: model hyperparameters with their tuned defaults plus
split/obfuscation/XAI settings and seeds.

Configs load from JSON with unknown keys rejected; the MALVIS_SEED
environment variable overrides the file's seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .harness import SplitSpec
from .nn import Hyperparams
from .seeding import derive_seed

SEED_ENV_VAR = "MALVIS_SEED"


@dataclass
class Config:
    seed: int = 7
    input_side: int = 64
    epochs: int = 12
    patience: int | None = 3
    test_fraction: float = 0.20
    val_fraction: float = 0.15
    stratified: bool = True
    pack_fraction: float = 1.0
    morph_fraction: float = 1.0
    morph_passes: int = 1
    occlusion_window: int = 8
    occlusion_stride: int = 4
    shap_grid: int = 8
    shap_coalitions: int = 2048
    xai_baseline: float = 0.0
    packer_cmd: str | None = None
    run_progressive: bool = True
    run_morph_sensitivity: bool = True
    corpus_manifest: str | None = None
    corpus_scale: float = 1.0
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def validate(self) -> None:
        try:
            self.hyperparams.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.input_side % 8 or self.input_side < 8:
            raise ConfigError(f"input_side must be a positive multiple of 8, "
                              f"got {self.input_side}")
        for name in ("test_fraction", "val_fraction"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ConfigError(f"{name} must be in (0,1), got {v}")
        for name in ("pack_fraction", "morph_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if self.morph_passes < 1:
            raise ConfigError("morph_passes must be >= 1")
        if self.occlusion_window > self.input_side:
            raise ConfigError("occlusion_window exceeds input_side")

    def split_spec(self) -> SplitSpec:
        return SplitSpec(test_fraction=self.test_fraction,
                         val_fraction_of_train=self.val_fraction,
                         stratified=self.stratified,
                         seed=derive_seed(self.seed, "split"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyperparams"]["filters"] = list(d["hyperparams"]["filters"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "hyperparams" in d and isinstance(d["hyperparams"], dict):
            hp_known = {f.name for f in fields(Hyperparams)}
            hp_unknown = set(d["hyperparams"]) - hp_known
            if hp_unknown:
                raise ConfigError(f"unknown hyperparams keys: {sorted(hp_unknown)}")
            hp = dict(d["hyperparams"])
            if "filters" in hp:
                hp["filters"] = tuple(hp["filters"])
            d["hyperparams"] = Hyperparams(**hp)
        cfg = cls(**d)
        cfg.validate()
        return cfg


def load_config(path: str | Path | None) -> Config:
    """Config from a JSON file (or defaults when path is None), with the
    MALVIS_SEED env var taking precedence over the configured seed."""
    if path is None:
        cfg = Config()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
        cfg = Config.from_dict(data)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
    cfg.validate()
    return cfg
