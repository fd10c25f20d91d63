"""Stage functions shared by the command line, the demos and the acceptance suite.

Every stage takes the :class:`RunConfig` and derives its random stream from
the config seed and a fixed label, so stages can run in any order or in
separate processes and still reproduce each other.
"""
from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

from .config import RunConfig
from .defense import (BaselineTrigger, DefenseRow, DetectionReport, RetrainConfig, baseline_reverse, detect_targets,
                      evaluate_defense, retrain_defense, timed)
from .mesa import TriggerEnsemble, ensemble_weights, fit_submodel
from .networks import ClassifierNet
from .numeric import RngStream, stream_id
from .testbed import (AttackSpec, CatalogEntry, LabeledImageSet, TestingFn, TrainReport, generate_dataset,
                      inject_backdoor, split_defense_pool, train_victim, trigger_catalog)

log = logging.getLogger(__name__)


def stream(cfg: RunConfig, *parts) -> RngStream:
    return RngStream(cfg.seed, stream_id(*parts))


def make_data(cfg: RunConfig) -> Tuple[LabeledImageSet, LabeledImageSet]:
    d = cfg.data
    return generate_dataset(cfg.seed, d.n_train, d.n_test, d.n_classes, d.height, d.width, d.clutter)


def defender_split(cfg: RunConfig, test: LabeledImageSet) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """(modeling and retraining images, held-out evaluation images) drawn from the test split."""
    return split_defense_pool(test, cfg.data.defense_frac, cfg.seed)


def make_catalog(cfg: RunConfig, train: LabeledImageSet) -> List[CatalogEntry]:
    a = cfg.attack
    cat = trigger_catalog(train, a.n_random, a.catalog_seed, a.full_bw)
    if a.triggers:
        names = {e.name for e in cat}
        missing = [t for t in a.triggers if t not in names]
        if missing:
            raise KeyError(f"unknown triggers {missing}; available: {sorted(names)}")
        cat = [e for e in cat if e.name in a.triggers]
    return cat


def fit_victim(cfg: RunConfig, train: LabeledImageSet, test: LabeledImageSet) -> Tuple[ClassifierNet, TrainReport]:
    v = cfg.victim
    return train_victim(train, test, v.epochs, v.lr, v.momentum, v.batch_size, stream(cfg, "victim").generator(),
                        tuple(v.channels), v.hidden)


def attack_spec(cfg: RunConfig, entry: CatalogEntry) -> AttackSpec:
    a = cfg.attack
    return AttackSpec(entry.trigger, a.target, a.ratio, a.rule, entry.name)


def attack(cfg: RunConfig, victim: ClassifierNet, train: LabeledImageSet, test: LabeledImageSet,
           entry: CatalogEntry) -> Tuple[ClassifierNet, TrainReport]:
    a = cfg.attack
    return inject_backdoor(victim, train, attack_spec(cfg, entry), a.epochs, a.lr, a.momentum, a.batch_size,
                           stream(cfg, "attack", entry.name).generator(), test)


def model_triggers(cfg: RunConfig, model: ClassifierNet, images: LabeledImageSet, target: int, name: str,
                   seed: int = 0) -> TriggerEnsemble:
    """One sub-model per threshold, mixed with the configured relative weights."""
    mcfg = cfg.modeling.mesa(seed)
    low, high = images.pixel_bounds()
    F = TestingFn(model, images, target, cfg.attack.rule, mcfg.batch_images)
    base = stream(cfg, "modeling", name, seed)
    subs = [fit_submodel(mcfg, b, F, base.child(i, b), low, high) for i, b in enumerate(mcfg.thresholds)]
    mix = list(cfg.modeling.mix) if len(cfg.modeling.mix) == len(subs) else "uniform"
    return TriggerEnsemble(subs, ensemble_weights(subs, mix))


def detect(cfg: RunConfig, model: ClassifierNet, images: LabeledImageSet, name: str,
           classes: Optional[Sequence[int]] = None) -> DetectionReport:
    d = cfg.detect
    mcfg = cfg.modeling.mesa(0, epochs=d.epochs)
    return detect_targets(model, images, stream(cfg, "detect", name), mcfg, classes, d.probe_beta,
                          threshold=d.threshold, rule=cfg.attack.rule)


def _retrain_cfg(cfg: RunConfig) -> RetrainConfig:
    d = cfg.defense
    return RetrainConfig(d.ratio, d.epochs, d.lr, d.momentum, d.batch_size)


def defend(cfg: RunConfig, model: ClassifierNet, ens: TriggerEnsemble, spec: AttackSpec,
           images: LabeledImageSet, eval_set: LabeledImageSet, seed: int = 0) -> List[DefenseRow]:
    """Retrain with each active single sub-model and with the ensemble."""
    rows = []
    sources = [(f"beta={s.beta:.2f}", s) for s in ens.submodels if s.active] + [("ensemble", ens)]
    for variant, src in sources:
        rng = stream(cfg, "defend", spec.name, variant, seed).generator()
        (fixed, _), secs = timed(retrain_defense, model, images, src, rng, _retrain_cfg(cfg), spec.rule)
        rows.append(evaluate_defense(model, fixed, spec, eval_set, images, spec.name, variant, seed, secs,
                                     cfg.hash()))
    return rows


def ideal(cfg: RunConfig, model: ClassifierNet, spec: AttackSpec, images: LabeledImageSet,
          eval_set: LabeledImageSet, seed: int = 0) -> DefenseRow:
    rng = stream(cfg, "ideal", spec.name, seed).generator()
    (fixed, _), secs = timed(retrain_defense, model, images, spec.trigger, rng, _retrain_cfg(cfg), spec.rule)
    return evaluate_defense(model, fixed, spec, eval_set, images, spec.name, "ideal", seed, secs, cfg.hash())


def baseline(cfg: RunConfig, model: ClassifierNet, spec: AttackSpec, images: LabeledImageSet,
             eval_set: LabeledImageSet, seed: int = 0) -> Tuple[List[DefenseRow], List[BaselineTrigger]]:
    """Pixel-space reversals, each followed by a retraining with that single trigger."""
    b = cfg.baseline
    trigs = baseline_reverse(model, images, spec.target, stream(cfg, "baseline", spec.name, seed), b.runs,
                             b.epochs, b.lr, b.momentum, b.batch_size, spec.rule)
    rows = []
    for t in trigs:
        rng = stream(cfg, "baseline-retrain", spec.name, seed, t.run).generator()
        (fixed, _), secs = timed(retrain_defense, model, images, t.pixels, rng, _retrain_cfg(cfg), spec.rule)
        rows.append(evaluate_defense(model, fixed, spec, eval_set, images, spec.name, f"baseline#{t.run}", seed,
                                     secs, cfg.hash()))
    return rows, trigs
