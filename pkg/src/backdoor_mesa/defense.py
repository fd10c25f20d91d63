"""Target detection, distribution-guided retraining and the reference defenses.

The pipeline is: probe every class with one sub-model to find the attacked
class, model the trigger distribution for that class, then fine-tune the model
on images stamped with freshly sampled triggers while keeping their true
labels. Two references bracket it: retraining with the attacker's own trigger
(ideal) and with a single trigger optimized directly in pixel space (baseline).
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .mesa import MesaConfig, SubModel, TriggerEnsemble, fit_submodel
from .networks import ClassifierNet, cross_entropy
from .numeric import ContractError, RngStream, sgd
from .testbed import (TRIGGER_SHAPE, AttackSpec, LabeledImageSet, TestingFn, _fit, evaluate_accuracy,
                      make_poisoner, measure_asr, stamp, trigger_locations)

DETECTION_THRESHOLD = 0.5
PROBE_BETA = 0.8


# --------------------------------------------------------------------------- #
# detection
# --------------------------------------------------------------------------- #

@dataclass
class DetectionReport:
    scores: Dict[int, float]
    threshold: float
    probe_beta: float

    @property
    def flagged(self) -> List[int]:
        return sorted(c for c, s in self.scores.items() if s >= self.threshold)

    def margin(self, cls: int) -> float:
        """Score of ``cls`` minus the best score among the other classes."""
        others = [s for c, s in self.scores.items() if c != cls]
        return self.scores[cls] - max(others) if others else float("inf")


def detect_targets(model: ClassifierNet, data: LabeledImageSet, stream: RngStream, cfg: Optional[MesaConfig] = None,
                   classes: Optional[Sequence[int]] = None, probe_beta: float = PROBE_BETA,
                   alpha: Optional[float] = None, threshold: float = DETECTION_THRESHOLD,
                   rule="random") -> DetectionReport:
    """Fit one probe sub-model per class and score it by its mean ``F`` on fresh samples."""
    cfg = cfg or MesaConfig()
    low, high = data.pixel_bounds()
    classes = range(data.n_classes) if classes is None else classes
    scores = {}
    for c in classes:
        F = TestingFn(model, data, int(c), rule, cfg.batch_images)
        sm = fit_submodel(cfg, probe_beta, F, stream.child("probe", int(c)), low, high, alpha)
        scores[int(c)] = float(np.clip(sm.mean_F, 0.0, 1.0))
    return DetectionReport(scores, float(threshold), float(probe_beta))


# --------------------------------------------------------------------------- #
# retraining
# --------------------------------------------------------------------------- #

TriggerSource = Union[TriggerEnsemble, SubModel, np.ndarray, Callable]


def trigger_sampler(source: TriggerSource, shape=TRIGGER_SHAPE) -> Callable:
    """Normalize a trigger source to ``rng, k -> [k, h, w, c]``."""
    if isinstance(source, TriggerEnsemble):
        return lambda rng, k: source.sample(k, rng).reshape((k,) + tuple(shape))
    if isinstance(source, SubModel):
        ens = TriggerEnsemble([source], np.array([1.0]))
        return lambda rng, k: ens.sample(k, rng).reshape((k,) + tuple(shape))
    if callable(source):
        return lambda rng, k: np.asarray(source(rng, k)).reshape((k,) + tuple(shape))
    fixed = np.asarray(source, dtype=np.float64).reshape(tuple(shape))
    return lambda rng, k: np.broadcast_to(fixed, (k,) + tuple(shape))


@dataclass
class RetrainConfig:
    ratio: float = 0.1
    epochs: int = 10
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ContractError("retraining ratio must lie in [0, 1]")


@dataclass
class RetrainAudit:
    stamped: int = 0
    seen: int = 0
    relabeled: int = 0


def retrain_defense(model: ClassifierNet, data: LabeledImageSet, source: TriggerSource, rng: np.random.Generator,
                    cfg: Optional[RetrainConfig] = None, rule="random"):
    """Fine-tune a copy of ``model``; each sample is stamped with probability ``ratio``.

    Stamped samples keep their true label and every batch draws new triggers.
    Returns ``(model, RetrainAudit)``.
    """
    cfg = cfg or RetrainConfig()
    repaired = model.copy()
    audit = RetrainAudit()
    if cfg.ratio == 0.0 or cfg.epochs == 0:
        return repaired, audit
    stamp_batch = make_poisoner(trigger_sampler(source), cfg.ratio, rule, label=None)

    def audited(x, y, g):
        x2, y2, k = stamp_batch(x, y, g)
        audit.relabeled += int(np.sum(y2 != y))
        return x2, y2, k

    _, audit.stamped, audit.seen = _fit(repaired, data, cfg.epochs, sgd(cfg.lr, cfg.momentum), cfg.batch_size,
                                        rng, audited)
    if audit.relabeled:
        raise AssertionError("retraining changed a label")
    return repaired, audit


# --------------------------------------------------------------------------- #
# baseline: raw-pixel trigger optimization
# --------------------------------------------------------------------------- #

@dataclass
class BaselineTrigger:
    pixels: np.ndarray
    final_F: float
    run: int = 0


def reverse_trigger_pixels(model: ClassifierNet, data: LabeledImageSet, target: int, rng: np.random.Generator,
                           epochs: int = 5, lr: float = 0.1, momentum: float = 0.9, batch_size: int = 128,
                           rule="random", shape=TRIGGER_SHAPE) -> np.ndarray:
    """Optimize one trigger directly: uniform start, cross-entropy towards ``target``, clipped to bounds."""
    low, high = (b.reshape(shape) for b in data.pixel_bounds(shape))
    trig = rng.uniform(low, high)
    keep = np.flatnonzero(data.labels != target)
    if len(keep) == 0:
        raise ContractError("no eligible images for trigger reversal")
    vel = np.zeros_like(trig)
    h, w = shape[:2]
    for _ in range(epochs):
        perm = keep[rng.permutation(len(keep))]
        for s in range(0, len(perm), batch_size):
            idx = perm[s:s + batch_size]
            rows, cols = trigger_locations(rule, len(idx), data.image_shape, shape, rng)
            x = stamp(data.images[idx], trig, rows, cols)
            logits, cache = model.forward(x)
            _, dlogits = cross_entropy(logits, np.full(len(idx), target))
            _, dpatch = model.backward(cache, dlogits, need_params=False, input_patch=(rows, cols, h, w))
            vel = momentum * vel + dpatch.sum(axis=0)
            trig = np.clip(trig - lr * vel, low, high)
    return trig


def baseline_reverse(model: ClassifierNet, data: LabeledImageSet, target: int, stream: RngStream, runs: int = 10,
                     epochs: int = 5, lr: float = 0.1, momentum: float = 0.9, batch_size: int = 128,
                     rule="random", eval_images: int = 256) -> List[BaselineTrigger]:
    """Independent pixel-space reversals, one stream per run."""
    out = []
    for i in range(runs):
        rng = stream.child("baseline", i).generator()
        trig = reverse_trigger_pixels(model, data, target, rng, epochs, lr, momentum, batch_size, rule)
        F = TestingFn(model, data, target, rule)
        f = float(F(trig.reshape(1, -1), rng, batch_images=eval_images)[0])
        out.append(BaselineTrigger(trig, f, i))
    return out


# --------------------------------------------------------------------------- #
# evaluation and reporting
# --------------------------------------------------------------------------- #

@dataclass
class DefenseRow:
    trigger: str
    variant: str
    seed: int
    asr_before: float
    asr_after: float
    acc_before: float
    acc_after: float
    runtime: float = 0.0
    config_hash: str = ""


def check_disjoint(*sets: LabeledImageSet) -> None:
    seen = set()
    for s in sets:
        ids = set(np.asarray(s.index).tolist())
        if seen & ids:
            raise ContractError("evaluation images overlap the images used for modeling or retraining")
        seen |= ids


def evaluate_defense(before: ClassifierNet, after: ClassifierNet, attack: AttackSpec, eval_set: LabeledImageSet,
                     defense_set: Optional[LabeledImageSet] = None, trigger_name: str = "", variant: str = "",
                     seed: int = 0, runtime: float = 0.0, config_hash: str = "") -> DefenseRow:
    """Original-trigger ASR and clean accuracy before and after a defense."""
    if defense_set is not None:
        check_disjoint(defense_set, eval_set)

    def asr(m):
        # identical placements for both models
        return measure_asr(m, eval_set, attack.trigger, attack.target, attack.rule, np.random.default_rng(0))

    return DefenseRow(trigger_name or attack.name, variant, int(seed), asr(before), asr(after),
                      evaluate_accuracy(before, eval_set), evaluate_accuracy(after, eval_set), float(runtime),
                      config_hash)


@dataclass
class DefenseReport:
    rows: List[DefenseRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, row: DefenseRow) -> DefenseRow:
        for v in (row.asr_before, row.asr_after, row.acc_before, row.acc_after):
            if not 0.0 <= v <= 1.0:
                raise ContractError("ASR and accuracy must lie in [0, 1]")
        self.rows.append(row)
        return row

    def select(self, variant: Optional[str] = None, trigger: Optional[str] = None) -> List[DefenseRow]:
        return [r for r in self.rows if (variant is None or r.variant == variant)
                and (trigger is None or r.trigger == trigger)]

    def best_beta(self, trigger: str) -> Optional[DefenseRow]:
        """Single-threshold variant with the lowest after-defense ASR."""
        rows = [r for r in self.select(trigger=trigger) if r.variant.startswith("beta=")]
        return min(rows, key=lambda r: (r.asr_after, r.variant)) if rows else None

    def write_csv(self, path, runtime: bool = False) -> None:
        """One record per (trigger, variant, seed); runtimes are omitted unless requested."""
        cols = [f for f in DefenseRow.__dataclass_fields__ if runtime or f != "runtime"]
        rows = sorted(self.rows, key=lambda r: (r.trigger, r.variant, r.seed))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                d = asdict(r)
                w.writerow([f"{d[c]:.6f}" if isinstance(d[c], float) else d[c] for c in cols])

    def write_json(self, path) -> None:
        doc = {"meta": self.meta, "rows": [asdict(r) for r in self.rows]}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "DefenseReport":
        rep = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for d in csv.DictReader(fh):
                rep.rows.append(DefenseRow(d["trigger"], d["variant"], int(d["seed"]), float(d["asr_before"]),
                                           float(d["asr_after"]), float(d["acc_before"]), float(d["acc_after"]),
                                           float(d.get("runtime") or 0.0), d.get("config_hash", "")))
        return rep


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0
