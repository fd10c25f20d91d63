"""Desk-scale backdoor laboratory.

Procedural 16x16x3 images stand in for a natural-image benchmark. The module
covers dataset synthesis, trigger catalogs, the overwrite-style trigger
application rule, victim training, poisoning-based backdoor injection, attack
success rate (ASR) measurement and the differentiable testing function used to
drive trigger modeling.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .networks import ClassifierNet, cross_entropy, softmax
from .numeric import ContractError, OptimizerState, sgd

log = logging.getLogger(__name__)

TRIGGER_SHAPE = (3, 3, 3)


# --------------------------------------------------------------------------- #
# datasets
# --------------------------------------------------------------------------- #

@dataclass
class LabeledImageSet:
    """Normalized NHWC images with integer labels.

    ``norm_mean``/``norm_std`` are the per-channel statistics of the raw
    training split that were used to normalize these images.
    """

    images: np.ndarray
    labels: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    n_classes: int = 10
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.images) == 0:
            raise ContractError("empty image set")
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in length")
        if self.index is None:
            self.index = np.arange(len(self.images))

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledImageSet":
        idx = np.asarray(idx)
        return LabeledImageSet(self.images[idx], self.labels[idx], self.norm_mean, self.norm_std,
                               self.n_classes, self.index[idx])

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.norm_mean) / self.norm_std

    def pixel_bounds(self, shape=TRIGGER_SHAPE) -> Tuple[np.ndarray, np.ndarray]:
        """Normalized values of raw black (0) and white (1), broadcast to a flattened trigger."""
        low = np.broadcast_to((0.0 - self.norm_mean) / self.norm_std, shape).reshape(-1).copy()
        high = np.broadcast_to((1.0 - self.norm_mean) / self.norm_std, shape).reshape(-1).copy()
        return low, high


_PALETTES = np.array([
    [[0.85, 0.20, 0.20], [0.95, 0.85, 0.30]],
    [[0.20, 0.35, 0.85], [0.75, 0.90, 0.95]],
    [[0.20, 0.65, 0.25], [0.90, 0.90, 0.55]],
    [[0.55, 0.25, 0.70], [0.95, 0.60, 0.80]],
    [[0.15, 0.15, 0.20], [0.60, 0.80, 0.40]],
    [[0.90, 0.55, 0.15], [0.30, 0.20, 0.10]],
    [[0.25, 0.70, 0.75], [0.10, 0.20, 0.45]],
    [[0.70, 0.70, 0.70], [0.35, 0.10, 0.15]],
    [[0.95, 0.95, 0.80], [0.45, 0.55, 0.20]],
    [[0.40, 0.30, 0.20], [0.70, 0.85, 0.90]],
])


def _pattern(cls: int, yy, xx, rng) -> np.ndarray:
    k = cls % 10
    f = rng.uniform(1.5, 2.5)
    phase = rng.uniform(0, 2 * np.pi)
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    if k == 0:
        p = np.sin(2 * np.pi * f * yy + phase)
    elif k == 1:
        p = np.sin(2 * np.pi * f * xx + phase)
    elif k == 2:
        p = np.sin(2 * np.pi * f * (xx + yy) / np.sqrt(2) + phase)
    elif k == 3:
        p = np.sin(2 * np.pi * f * (xx - yy) / np.sqrt(2) + phase)
    elif k == 4:
        p = np.sin(2 * np.pi * f * xx + phase) * np.sin(2 * np.pi * f * yy + phase)
    elif k == 5:
        r = np.hypot(yy - cy, xx - cx)
        p = np.tanh((rng.uniform(0.22, 0.35) - r) * 25)
    elif k == 6:
        r = np.hypot(yy - cy, xx - cx)
        p = np.cos(2 * np.pi * f * r + phase)
    elif k == 7:
        s = rng.choice([-1.0, 1.0])
        p = s * (2 * xx - 1)
    elif k == 8:
        p = 1.0 - 2 * np.clip(np.minimum(np.abs(yy - cy), np.abs(xx - cx)) * 8, 0, 1)
    else:
        s = rng.choice([-1.0, 1.0])
        p = s * (2 * yy - 1)
    return 0.5 + 0.5 * p


def _render(cls: int, h: int, w: int, rng: np.random.Generator, clutter: int = 0) -> np.ndarray:
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    pal = _PALETTES[cls % len(_PALETTES)] + rng.uniform(-0.12, 0.12, size=(2, 3))
    p = _pattern(cls, yy, xx, rng)[..., None]
    img = pal[0] * (1 - p) + pal[1] * p
    img = img + rng.normal(0.0, 0.06, size=img.shape)
    # optional distractor squares; they make the victim harder to backdoor
    for _ in range(rng.integers(0, clutter + 1)):
        s = int(rng.integers(2, 4))
        y0, x0 = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
        img[y0:y0 + s, x0:x0 + s] = rng.uniform(0, 1, size=3)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(seed: int, n_train: int = 4000, n_test: int = 2000, n_classes: int = 10,
                     height: int = 16, width: int = 16, clutter: int = 0):
    """Class-balanced procedural train/test splits, normalized with train statistics."""
    if n_classes < 2:
        raise ContractError("need at least two classes")
    if n_train < n_classes or n_test < 1:
        raise ContractError("split sizes too small")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(11,))))

    def split(n):
        labels = np.arange(n) % n_classes
        labels = labels[rng.permutation(n)]
        raw = np.stack([_render(int(c), height, width, rng, clutter) for c in labels])
        return raw, labels

    raw_tr, y_tr = split(n_train)
    raw_te, y_te = split(n_test)
    mean = raw_tr.mean(axis=(0, 1, 2))
    std = raw_tr.std(axis=(0, 1, 2))
    train = LabeledImageSet((raw_tr - mean) / std, y_tr, mean, std, n_classes)
    test = LabeledImageSet((raw_te - mean) / std, y_te, mean, std, n_classes)
    return train, test


def split_defense_pool(pool: LabeledImageSet, frac: float = 0.8, seed: int = 0):
    """Disjoint (modeling/retraining, evaluation) partition of the defender's images."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(12,))))
    perm = rng.permutation(len(pool))
    k = int(round(frac * len(pool)))
    return pool.subset(np.sort(perm[:k])), pool.subset(np.sort(perm[k:]))


# --------------------------------------------------------------------------- #
# triggers
# --------------------------------------------------------------------------- #

@dataclass
class AttackSpec:
    """Trigger (normalized h x w x c), target class, poison ratio and placement rule.

    ``rule`` is ``"random"`` or ``("fixed", row, col)``.
    """

    trigger: np.ndarray
    target: int = 0
    poison_ratio: float = 0.01
    rule: Union[str, Tuple[str, int, int]] = "random"
    name: str = ""

    def __post_init__(self):
        self.trigger = np.asarray(self.trigger, dtype=np.float64)
        if self.trigger.ndim != 3:
            raise ContractError("trigger must be an h x w x c array")
        if not 0.0 <= self.poison_ratio <= 1.0:
            raise ContractError("poison ratio must lie in [0, 1]")
        _check_rule(self.rule)


def _check_rule(rule):
    if rule == "random":
        return
    if isinstance(rule, (tuple, list)) and len(rule) == 3 and rule[0] == "fixed":
        return
    raise ContractError(f"unknown trigger application rule {rule!r}")


def trigger_locations(rule, n: int, image_shape, trigger_shape, rng: Optional[np.random.Generator]):
    """Top-left corners (rows, cols) for ``n`` trigger applications."""
    _check_rule(rule)
    h, w = image_shape[:2]
    th, tw = trigger_shape[:2]
    if th > h or tw > w:
        raise ContractError("trigger larger than image")
    if rule == "random":
        if rng is None:
            raise ContractError("random placement needs an rng")
        return rng.integers(0, h - th + 1, size=n), rng.integers(0, w - tw + 1, size=n)
    _, r, c = rule
    if not (0 <= r <= h - th and 0 <= c <= w - tw):
        raise ContractError(f"fixed location ({r}, {c}) puts the trigger out of bounds")
    return np.full(n, int(r)), np.full(n, int(c))


def stamp(images: np.ndarray, triggers: np.ndarray, rows, cols) -> np.ndarray:
    """Copy of ``images`` with ``triggers[i]`` overwritten at ``(rows[i], cols[i])``.

    ``triggers`` is either one h x w x c patch or one patch per image.
    """
    out = np.array(images, dtype=np.float64, copy=True)
    n = len(out)
    trig = np.asarray(triggers, dtype=np.float64)
    if trig.ndim == 3:
        trig = np.broadcast_to(trig, (n,) + trig.shape)
    th, tw = trig.shape[1:3]
    ry = np.asarray(rows)[:, None] + np.arange(th)
    rx = np.asarray(cols)[:, None] + np.arange(tw)
    out[np.arange(n)[:, None, None], ry[:, :, None], rx[:, None, :]] = trig
    return out


def apply_trigger(image: np.ndarray, trigger: np.ndarray, rule="random",
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Overwrite one ``h x w`` region of ``image`` with ``trigger``."""
    trigger = np.asarray(trigger, dtype=np.float64)
    rows, cols = trigger_locations(rule, 1, image.shape, trigger.shape, rng)
    return stamp(image[None], trigger, rows, cols)[0]


def bw_trigger(mask, low: np.ndarray, high: np.ndarray, shape=TRIGGER_SHAPE) -> np.ndarray:
    """Black/white trigger from an ``h x w`` 0/1 mask; white uses ``high``, black ``low``."""
    m = np.asarray(mask, dtype=bool).reshape(shape[0], shape[1], 1)
    lo = np.asarray(low).reshape(shape)
    hi = np.asarray(high).reshape(shape)
    return np.where(m, hi, lo)


def canonical_bw_masks(size: int = 3) -> List[np.ndarray]:
    """One representative per class of ``size x size`` binary masks under the
    dihedral symmetries of the square and black/white inversion."""
    seen = set()
    reps = []
    for bits in itertools.product((0, 1), repeat=size * size):
        m = np.array(bits, dtype=np.uint8).reshape(size, size)
        orbit = []
        for base in (m, 1 - m):
            for k in range(4):
                r = np.rot90(base, k)
                orbit.append(r.tobytes())
                orbit.append(np.fliplr(r).tobytes())
        key = min(orbit)
        if key not in seen:
            seen.add(key)
            reps.append(np.frombuffer(key, dtype=np.uint8).reshape(size, size).copy())
    return reps


CANONICAL_MASKS: Dict[str, List[List[int]]] = {
    "dot": [[1, 0, 0], [0, 0, 0], [0, 0, 0]],
    "pair": [[1, 1, 0], [0, 0, 0], [0, 0, 0]],
    "bar": [[1, 1, 1], [0, 0, 0], [0, 0, 0]],
    "square": [[1, 1, 0], [1, 1, 0], [0, 0, 0]],
    "checkerboard": [[1, 0, 1], [0, 1, 0], [1, 0, 1]],
    "two_bars": [[1, 1, 1], [1, 1, 1], [0, 0, 0]],
    "cup": [[1, 0, 1], [1, 0, 1], [1, 1, 1]],
    "frame": [[1, 1, 1], [1, 0, 1], [1, 1, 1]],
}


@dataclass
class CatalogEntry:
    name: str
    trigger: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)


def trigger_catalog(dataset: LabeledImageSet, n_random: int = 5, seed: int = 2024,
                    full_bw: bool = False) -> List[CatalogEntry]:
    """Black/white triggers (8 canonical or all 51) followed by random-color ones."""
    low, high = dataset.pixel_bounds()
    entries = []
    if full_bw:
        for i, m in enumerate(canonical_bw_masks()):
            entries.append(CatalogEntry(f"bw{i:02d}", bw_trigger(m, low, high), "black-white",
                                        {"white_pixels": int(m.sum())}))
    else:
        for name, m in CANONICAL_MASKS.items():
            entries.append(CatalogEntry(name, bw_trigger(m, low, high), "black-white",
                                        {"white_pixels": int(np.sum(m))}))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(13,))))
    for i in range(n_random):
        raw = rng.uniform(0.0, 1.0, size=TRIGGER_SHAPE)
        entries.append(CatalogEntry(f"color{i}", dataset.normalize(raw), "random-color"))
    return entries


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #

def evaluate_accuracy(model: ClassifierNet, data: LabeledImageSet) -> float:
    return float(np.mean(model.predict(data.images) == data.labels))


@dataclass
class TrainReport:
    clean_accuracy: float
    epochs: int
    losses: List[float] = field(default_factory=list)
    asr: Optional[float] = None
    poisoned: int = 0
    seen: int = 0
    warning: str = ""


def _fit(model: ClassifierNet, data: LabeledImageSet, epochs: int, opt: OptimizerState,
         batch_size: int, rng: np.random.Generator, poison=None) -> Tuple[List[float], int, int]:
    """Mini-batch SGD loop. ``poison(images, labels, rng)`` may rewrite a batch
    and returns ``(images, labels, n_poisoned)``."""
    losses = []
    n_poisoned = n_seen = 0
    n = len(data)
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            x, y = data.images[idx], data.labels[idx]
            if poison is not None:
                x, y, k = poison(x, y, rng)
                n_poisoned += k
            n_seen += len(idx)
            logits, cache = model.forward(x)
            loss, dlogits = cross_entropy(logits, y)
            grads, _ = model.backward(cache, dlogits)
            opt.step(model.params, grads)
            total += loss * len(idx)
        losses.append(total / n)
    return losses, n_poisoned, n_seen


def train_victim(train: LabeledImageSet, test: LabeledImageSet, epochs: int = 6, lr: float = 0.01,
                 momentum: float = 0.9, batch_size: int = 32, rng: Optional[np.random.Generator] = None,
                 channels=(8, 16), hidden: int = 64, accuracy_floor: float = 0.95):
    """Train the clean classifier; returns ``(model, TrainReport)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    model = ClassifierNet(train.image_shape, train.n_classes, channels, hidden, rng)
    losses, _, seen = _fit(model, train, epochs, sgd(lr, momentum), batch_size, rng)
    acc = evaluate_accuracy(model, test)
    rep = TrainReport(acc, epochs, losses, seen=seen)
    if acc < accuracy_floor:
        rep.warning = f"clean accuracy {acc:.3f} below floor {accuracy_floor:.3f}"
        log.warning(rep.warning)
    return model, rep


def make_poisoner(trigger: np.ndarray, ratio: float, rule, label: Optional[int]):
    """Per-sample Bernoulli(ratio) poisoning; ``label=None`` keeps true labels.

    ``trigger`` may be a fixed patch or a callable ``rng, k -> [k, h, w, c]``
    drawing fresh patches.
    """

    def poison(x, y, rng):
        hit = np.flatnonzero(rng.random(len(x)) < ratio)
        if len(hit) == 0:
            return x, y, 0
        patches = trigger(rng, len(hit)) if callable(trigger) else np.asarray(trigger)
        shape = patches.shape[-3:]
        rows, cols = trigger_locations(rule, len(hit), x.shape[1:], shape, rng)
        x = x.copy()
        x[hit] = stamp(x[hit], patches, rows, cols)
        if label is not None:
            y = y.copy()
            y[hit] = label
        return x, y, len(hit)

    return poison


def inject_backdoor(model: ClassifierNet, train: LabeledImageSet, attack: AttackSpec, epochs: int = 25,
                    lr: float = 0.01, momentum: float = 0.9, batch_size: int = 32,
                    rng: Optional[np.random.Generator] = None,
                    eval_set: Optional[LabeledImageSet] = None):
    """Fine-tune a copy of ``model`` on the poisoned objective; returns ``(model, TrainReport)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    bd = model.copy()
    poison = make_poisoner(attack.trigger, attack.poison_ratio, attack.rule, attack.target)
    losses, k, seen = _fit(bd, train, epochs, sgd(lr, momentum), batch_size, rng, poison)
    rep = TrainReport(float("nan"), epochs, losses, poisoned=k, seen=seen)
    if eval_set is not None:
        rep.clean_accuracy = evaluate_accuracy(bd, eval_set)
        rep.asr = measure_asr(bd, eval_set, attack.trigger, attack.target, attack.rule,
                              np.random.default_rng(0))
    return bd, rep


def measure_asr(model: ClassifierNet, data: LabeledImageSet, trigger: np.ndarray, target: int,
                rule="random", rng: Optional[np.random.Generator] = None) -> float:
    """Fraction of non-target images predicted as ``target`` once the trigger is applied."""
    keep = np.flatnonzero(data.labels != target)
    if len(keep) == 0:
        raise ContractError("no eligible images: every image belongs to the target class")
    rng = rng if rng is not None else np.random.default_rng(0)
    trigger = np.asarray(trigger, dtype=np.float64)
    rows, cols = trigger_locations(rule, len(keep), data.image_shape, trigger.shape, rng)
    x = stamp(data.images[keep], trigger, rows, cols)
    return float(np.mean(model.predict(x) == target))


# --------------------------------------------------------------------------- #
# testing function
# --------------------------------------------------------------------------- #

class TestingFn:
    """Surrogate ASR: mean target-class softmax over triggered images.

    Each call draws ``batch_images`` images from ``images`` (non-target images
    only when ``exclude_target``) and stamps every trigger on every one of them
    at independent locations. Values lie in [0, 1].
    """

    __test__ = False

    def __init__(self, model: ClassifierNet, data: LabeledImageSet, target: int, rule="random",
                 batch_images: int = 4, trigger_shape=TRIGGER_SHAPE, exclude_target: bool = True):
        _check_rule(rule)
        self.model = model
        keep = np.flatnonzero(data.labels != target) if exclude_target else np.arange(len(data))
        if len(keep) == 0:
            raise ContractError("no eligible images for the testing function")
        self.images = data.images[keep]
        self.target = int(target)
        self.rule = rule
        self.batch_images = int(batch_images)
        self.trigger_shape = tuple(trigger_shape)
        self.dim = int(np.prod(trigger_shape))

    def _stamped(self, triggers: np.ndarray, rng: np.random.Generator, m: int):
        t = np.asarray(triggers, dtype=np.float64).reshape((-1,) + self.trigger_shape)
        b = len(t)
        idx = rng.integers(0, len(self.images), size=m)
        base = np.repeat(self.images[idx][None], b, axis=0).reshape((b * m,) + self.images.shape[1:])
        rows, cols = trigger_locations(self.rule, b * m, self.images.shape[1:], self.trigger_shape, rng)
        return stamp(base, np.repeat(t, m, axis=0), rows, cols), rows, cols, b

    def __call__(self, triggers: np.ndarray, rng: np.random.Generator, batch_images: Optional[int] = None,
                 chunk: int = 1024) -> np.ndarray:
        m = batch_images or self.batch_images
        t = np.asarray(triggers, dtype=np.float64).reshape(-1, self.dim)
        step = max(1, chunk // m)
        out = []
        for s in range(0, len(t), step):
            x, _, _, b = self._stamped(t[s:s + step], rng, m)
            p = softmax(self.model.forward(x)[0])[:, self.target]
            out.append(p.reshape(b, m).mean(axis=1))
        return np.concatenate(out)

    def value_and_grad(self, triggers: np.ndarray, rng: np.random.Generator,
                       batch_images: Optional[int] = None):
        """``(F values [B], dF/dtrigger [B, D])`` on one freshly drawn image batch."""
        m = batch_images or self.batch_images
        x, rows, cols, b = self._stamped(triggers, rng, m)
        logits, cache = self.model.forward(x)
        p = softmax(logits)
        pc = p[:, self.target]
        # d p_c / d logits = p_c (e_c - p); the 1/m is the image average inside F
        dlogits = -pc[:, None] * p
        dlogits[:, self.target] += pc
        dlogits /= m
        th, tw = self.trigger_shape[:2]
        _, dpatch = self.model.backward(cache, dlogits, need_params=False, input_patch=(rows, cols, th, tw))
        grad = dpatch.reshape(b, m, -1).sum(axis=1)
        return pc.reshape(b, m).mean(axis=1), grad


class ConstantTestingFn:
    """F identically equal to ``value``; used to exercise the pure entropy objective."""

    def __init__(self, value: float, dim: int):
        self.value = float(value)
        self.dim = int(dim)

    def __call__(self, triggers, rng=None, batch_images=None):
        return np.full(len(np.asarray(triggers).reshape(-1, self.dim)), self.value)

    def value_and_grad(self, triggers, rng=None, batch_images=None):
        t = np.asarray(triggers).reshape(-1, self.dim)
        return np.full(len(t), self.value), np.zeros_like(t)
