"""Dense-array helpers: seeded random streams, optimizers, gradient checks, PCA."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Sequence

import numpy as np

Params = Dict[str, np.ndarray]


class ContractError(ValueError):
    """Raised when an operation is called with arguments that break its contract."""


# --------------------------------------------------------------------------- #
# random streams
# --------------------------------------------------------------------------- #

def stream_id(*parts) -> int:
    """Stable 63-bit id for a tuple of labels, e.g. ``stream_id("submodel", 2)``."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class RngStream:
    """A (seed, stream-id) pair naming an independent, reproducible random sequence."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, stream_id(self.stream, *parts))


def make_rng(seed: int, *parts) -> np.random.Generator:
    """Shorthand for ``RngStream(seed, stream_id(*parts)).generator()``."""
    return RngStream(seed, stream_id(*parts) if parts else 0).generator()


def sample_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0:
        raise ContractError("shape must be non-empty")
    return rng.standard_normal(shape)


def sample_noise(rng: np.random.Generator, shape, distribution: str = "gaussian") -> np.ndarray:
    """Draw generator input noise; ``uniform`` is on [-1, 1]."""
    if distribution == "gaussian":
        return sample_gaussian(rng, shape)
    if distribution == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape)
    raise ContractError(f"unknown noise distribution {distribution!r}")


# --------------------------------------------------------------------------- #
# optimizers
# --------------------------------------------------------------------------- #

@dataclass
class OptimizerState:
    """Per-parameter accumulators for SGD with momentum or Adam.

    ``params`` dictionaries are updated in place by :meth:`step`.
    """

    kind: str = "adam"
    lr: float = 2e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    slots: Dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")
        for b in (self.momentum, self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ContractError("momentum/beta parameters must lie in [0, 1)")

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
        if set(grads) != set(params):
            raise ContractError("gradient keys do not match parameter keys")
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            if self.weight_decay:
                g = g + self.weight_decay * p
            slot = self.slots.get(name)
            if slot is None:
                slot = [np.zeros_like(p)] if self.kind == "sgd-momentum" else [np.zeros_like(p), np.zeros_like(p)]
                self.slots[name] = slot
            if self.kind == "sgd-momentum":
                buf = slot[0]
                buf *= self.momentum
                buf += g
                p -= self.lr * buf
            else:
                m, v = slot
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                denom = np.sqrt(v * (1.0 / (1.0 - self.beta2 ** self.t)))
                denom += self.eps
                p -= (self.lr / (1.0 - self.beta1 ** self.t)) * m / denom
        return params


def sgd(lr: float = 1e-3, momentum: float = 0.9, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState(kind="sgd-momentum", lr=lr, momentum=momentum, weight_decay=weight_decay)


def adam(lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999) -> OptimizerState:
    return OptimizerState(kind="adam", lr=lr, beta1=beta1, beta2=beta2)


def optimizer_step(state: OptimizerState, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
    return state.step(params, grads)


# --------------------------------------------------------------------------- #
# finite differences
# --------------------------------------------------------------------------- #

# one-sided slopes differing by this much (relative) mark a kink
KINK_TOL = 1e-2


def finite_difference_check(
    f: Callable[[], float],
    params: Params,
    analytic: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    n_coords: int = 200,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
    stats: dict | None = None,
) -> float:
    """Max relative error between central differences and analytic gradients.

    ``f`` is evaluated with no arguments after ``params`` entries are perturbed
    in place, so it must read the same arrays. Coordinates are sampled
    uniformly over all parameter entries (at most ``n_coords`` of them); every
    perturbation is restored before returning.

    The error for one coordinate is ``|fd - g| / (|g| + epsilon)``.

    With ``skip_kinks`` a coordinate whose two one-sided slopes disagree by
    more than ``KINK_TOL`` relative to the same scale is treated as lying within
    ``epsilon`` of a ReLU or hinge kink, where no central difference is
    meaningful; it is replaced by a fresh coordinate so ``n_coords`` are still
    checked. A wrong backward pass is not masked: its one-sided slopes agree
    with each other but not with ``g``. ``stats`` (if given) receives
    ``checked`` and ``kinks`` counts.
    """
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    want = min(n_coords, total)
    order = rng.permutation(total)
    f0 = f() if skip_kinks else 0.0
    worst, checked, kinks = 0.0, 0, 0
    for flat in order:
        if checked == want:
            break
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        view = params[name].reshape(-1)
        i = flat - offsets[k]
        orig = view[i]
        view[i] = orig + epsilon
        fp = f()
        view[i] = orig - epsilon
        fm = f()
        view[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective while perturbing {name}[{i}]")
        fd = (fp - fm) / (2.0 * epsilon)
        g = float(analytic[name].reshape(-1)[i])
        if skip_kinks and abs((fp - f0) - (f0 - fm)) / epsilon > KINK_TOL * (abs(g) + epsilon):
            kinks += 1
            continue
        checked += 1
        worst = max(worst, abs(fd - g) / (abs(g) + epsilon))
    if stats is not None:
        stats.update(checked=checked, kinks=kinks)
    return worst


# --------------------------------------------------------------------------- #
# PCA
# --------------------------------------------------------------------------- #

def pca_project(samples: np.ndarray, k: int = 2):
    """Project rows of ``samples`` on their top-``k`` principal axes.

    Returns ``(coords, components)`` with ``components`` of shape ``(k, D)``
    holding orthonormal rows. Signs are fixed so the largest-magnitude entry of
    each component is positive.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError("samples must be an N x D matrix")
    n, d = x.shape
    if n < k:
        raise ContractError(f"need at least k={k} samples, got {n}")
    if k > d:
        raise ContractError(f"k={k} exceeds dimension {d}")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k].copy()
    idx = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), idx])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    return centered @ comps.T, comps


def all_finite(arrays: Sequence[np.ndarray] | Mapping[str, np.ndarray]) -> bool:
    values = arrays.values() if isinstance(arrays, Mapping) else arrays
    return all(bool(np.all(np.isfinite(a))) for a in values)
