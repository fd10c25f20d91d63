"""Run configuration: nested dataclasses, JSON round trip and a stable content hash."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .mesa import MesaConfig
from .numeric import ContractError


@dataclass
class DataConfig:
    n_train: int = 4000
    n_test: int = 2000
    n_classes: int = 10
    height: int = 16
    width: int = 16
    clutter: int = 0
    defense_frac: float = 0.8


@dataclass
class VictimConfig:
    epochs: int = 6
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    channels: Tuple[int, int] = (8, 16)
    hidden: int = 64


@dataclass
class AttackConfig:
    target: int = 0
    ratio: float = 0.1
    rule: str = "random"
    epochs: int = 25
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    n_random: int = 5
    catalog_seed: int = 2024
    full_bw: bool = False
    triggers: Optional[List[str]] = None


@dataclass
class ModelingConfig:
    thresholds: Tuple[float, ...] = (0.5, 0.8, 0.9)
    alpha: float = 0.1
    epochs: int = 50
    steps_per_epoch: int = 4
    batch_size: int = 32
    batch_images: int = 4
    noise_dim: int = 64
    noise: str = "gaussian"
    gen_hidden: int = 512
    stats_hidden: int = 512
    lr_gen: float = 1e-3
    lr_stats: float = 1e-3
    stats_steps: int = 1
    ema_decay: float = 0.99
    eval_samples: int = 512
    eval_images: int = 8
    mi_batch: int = 256
    mi_refine_steps: int = 0
    mi_eval_batches: int = 4
    mix: Tuple[float, ...] = (4.0, 3.0, 3.0)

    def mesa(self, seed: int = 0, **override) -> MesaConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(MesaConfig) if hasattr(self, f.name)}
        kw["seed"] = seed
        kw.update(override)
        return MesaConfig(**kw)


@dataclass
class DetectConfig:
    probe_beta: float = 0.8
    threshold: float = 0.5
    epochs: int = 25


@dataclass
class DefenseConfig:
    ratio: float = 0.1
    epochs: int = 10
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    seeds: Tuple[int, ...] = (0, 1, 2)


@dataclass
class BaselineConfig:
    runs: int = 10
    epochs: int = 5
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128


@dataclass
class OracleConfig:
    levels: int = 10
    cells: int = 64
    samples: int = 100_000
    entropy: str = "mine"
    seeds: int = 10
    gap: float = 0.15
    alpha: float = 0.1
    epochs: int = 30
    steps_per_epoch: int = 20
    batch_size: int = 128
    stats_steps: int = 3
    noise: str = "uniform"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    modeling: ModelingConfig = field(default_factory=ModelingConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    def hash(self) -> str:
        """First 12 hex digits of the SHA-256 of the canonical JSON form."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    def section_hash(self, *names: str) -> str:
        """Hash over the seed plus the named sections; used to key intermediate artifacts."""
        d = self.to_dict()
        sub = {"seed": d["seed"], **{n: d[n] for n in names}}
        return hashlib.sha256(json.dumps(sub, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:12]

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ContractError(f"{path}: not valid JSON ({e})") from e
        return cls.from_dict(d)

    def override(self, dotted: Dict[str, Any]) -> "RunConfig":
        """Copy with ``{"section.key": value}`` entries applied."""
        d = self.to_dict()
        for key, val in dotted.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ContractError(f"unknown config section {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ContractError(f"unknown config key {key!r}")
            node[parts[-1]] = val
        return RunConfig.from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: Dict[str, Any], where: str):
    if not isinstance(d, dict):
        raise ContractError(f"config section {where or 'root'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ContractError(f"unknown config keys in {where or 'root'}: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for name, val in d.items():
        cur = getattr(defaults, name)
        if is_dataclass(cur):
            kw[name] = _build(type(cur), val, f"{where}{name}.")
        elif isinstance(cur, tuple) and isinstance(val, list):
            kw[name] = tuple(val)
        else:
            kw[name] = val
    return cls(**kw)
