"""Max-entropy staircase approximation of an unknown trigger distribution.

One generator is trained per threshold ``beta``. Its loss is the hinge
penalty ``max(0, beta - F(G(z)))`` averaged over a noise batch, minus
``alpha`` times the mutual-information entropy proxy of the generator output.
After training, a sub-model whose average ``F`` falls below its threshold is
marked inactive. Active sub-models are mixed with categorical weights, either
uniformly or with the analytic weights ``exp(h_i) / g'(g^-1(beta_i))`` when the
link ``g`` between density and ``F`` is known.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .mine import MiEstimator, NoiseSpec, entropy_proxy
from .networks import GeneratorNet
from .numeric import ContractError, RngStream, adam, all_finite

log = logging.getLogger(__name__)


class EmptyDistributionError(RuntimeError):
    """No threshold produced an active sub-model."""


@dataclass
class MesaConfig:
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
    seed: int = 0

    def __post_init__(self):
        self.thresholds = tuple(float(b) for b in self.thresholds)
        if not self.thresholds:
            raise ContractError("at least one threshold is required")
        if any(not 0.0 <= b <= 1.0 for b in self.thresholds):
            raise ContractError("thresholds must lie in [0, 1]")
        if any(b2 <= b1 for b1, b2 in zip(self.thresholds, self.thresholds[1:])):
            raise ContractError("thresholds must be strictly increasing")
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        if self.stats_steps < 1:
            raise ContractError("stats_steps must be at least 1")
        if self.eval_samples < 1 or self.batch_size < 2:
            raise ContractError("batch sizes too small")

    @property
    def steps(self) -> int:
        return int(self.epochs * self.steps_per_epoch)

    @property
    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.noise_dim, self.noise)

    @staticmethod
    def staircase(n: int, **kw) -> "MesaConfig":
        """Dense grid ``beta_i = i / n`` for ``i = 1..n``."""
        return MesaConfig(thresholds=tuple(i / n for i in range(1, n + 1)), **kw)


@dataclass
class SubModel:
    beta: float
    generator: GeneratorNet
    mi_estimate: float
    mean_F: float
    active: bool
    seed: int = 0
    stream: int = 0
    noise: str = "gaussian"
    history: dict = field(default_factory=dict)


def hinge_loss(beta: float, f_values) -> float:
    """Mean of ``max(0, beta - F)`` over the batch."""
    f = np.asarray(f_values, dtype=np.float64)
    return float(np.maximum(0.0, beta - f).mean())


def loss_and_input_grad(beta: float, alpha: float, f_values, dF, est: MiEstimator, x, z, z_marg,
                        update_stats: bool = True):
    """Loss ``hinge - alpha * I_hat`` and its gradient with respect to the triggers ``x``.

    ``dF`` holds the per-trigger gradients of ``F``. When ``update_stats`` the
    statistics network also takes its own ascent step on the same batch.
    """
    b = len(x)
    hinge = hinge_loss(beta, f_values)
    dx = np.where((np.asarray(f_values) < beta)[:, None], -dF / b, 0.0)
    if alpha > 0:
        mi, dmi = est.step(x, z, z_marg, need_input_grad=True, update=update_stats)
        dx = dx - alpha * dmi
    else:
        mi = est.estimate(x, z, z_marg)
        if update_stats:
            est.step(x, z, z_marg)
    return hinge - alpha * mi, hinge, mi, dx


def loss_and_grads(gen: GeneratorNet, est: MiEstimator, F, beta: float, alpha: float, z, z_marg,
                   rng: np.random.Generator):
    """Loss and generator parameter gradients without changing any state.

    Batch-norm running statistics and the statistics network are untouched, so
    repeated calls with equal inputs (and an identically seeded ``rng``) agree.
    """
    x, cache = gen.forward(z, mode="train", update_stats=False)
    f, dF = F.value_and_grad(x, rng)
    loss, _, _, dx = loss_and_input_grad(beta, alpha, f, dF, est, x, z, z_marg, update_stats=False)
    return loss, gen.backward(cache, dx)


def _low_high(F, low, high):
    if low is None or high is None:
        raise ContractError("output bounds (low, high) are required")
    low = np.asarray(low, dtype=np.float64).reshape(-1)
    high = np.asarray(high, dtype=np.float64).reshape(-1)
    if low.size != getattr(F, "dim", low.size):
        raise ContractError("bounds do not match the testing function's trigger size")
    return low, high


def fit_submodel(cfg: MesaConfig, beta: float, F, stream: RngStream, low, high,
                 alpha: Optional[float] = None) -> SubModel:
    """Train one max-entropy generator under the hinge constraint at ``beta``."""
    low, high = _low_high(F, low, high)
    alpha = cfg.alpha if alpha is None else float(alpha)
    rng = stream.generator()
    noise = cfg.noise_spec
    gen = GeneratorNet(noise.dim, cfg.gen_hidden, low, high, rng)
    est = MiEstimator.create(low.size, noise.dim, cfg.stats_hidden, cfg.lr_stats, rng, cfg.ema_decay)
    opt = adam(cfg.lr_gen)
    hist = {"loss": [], "hinge": [], "mi": [], "F": []}
    for step in range(cfg.steps):
        for _ in range(cfg.stats_steps - 1):
            z = noise.sample(rng, cfg.batch_size)
            x, _ = gen.forward(z, mode="train", update_stats=False)
            est.step(x, z, noise.sample(rng, cfg.batch_size))
        z = noise.sample(rng, cfg.batch_size)
        z_marg = noise.sample(rng, cfg.batch_size)
        x, cache = gen.forward(z, mode="train")
        f, dF = F.value_and_grad(x, rng)
        loss, hinge, mi, dx = loss_and_input_grad(beta, alpha, f, dF, est, x, z, z_marg)
        if not np.isfinite(loss) or not np.all(np.isfinite(dx)):
            raise FloatingPointError(
                f"non-finite loss at step {step} (beta={beta}, hinge={hinge}, mi={mi}, "
                f"clamped={est.clamped})")
        opt.step(gen.params, gen.backward(cache, dx))
        if step % max(1, cfg.steps_per_epoch) == 0:
            hist["loss"].append(loss)
            hist["hinge"].append(hinge)
            hist["mi"].append(mi)
            hist["F"].append(float(f.mean()))
    if not all_finite(gen.params):
        raise FloatingPointError("generator parameters became non-finite")
    # emptiness is decided on fresh eval-mode samples, never on training batches
    x_eval = gen.sample(noise.sample(rng, cfg.eval_samples))
    mean_f = float(np.mean(F(x_eval, rng, batch_images=cfg.eval_images)))
    mi_est = entropy_proxy(est, gen, noise, cfg.mi_batch, rng, cfg.mi_refine_steps, cfg.mi_eval_batches)
    return SubModel(beta=float(beta), generator=gen, mi_estimate=mi_est, mean_F=mean_f,
                    active=bool(mean_f >= beta), seed=stream.seed, stream=stream.stream, noise=noise.distribution,
                    history=hist)


# --------------------------------------------------------------------------- #
# ensembling
# --------------------------------------------------------------------------- #

@dataclass
class AnalyticLink:
    """Known strictly increasing link ``g: [0, W] -> [0, 1]`` with ``F = g o f``."""

    g: Callable[[np.ndarray], np.ndarray]
    g_prime: Callable[[np.ndarray], np.ndarray]
    g_inv: Callable[[np.ndarray], np.ndarray]
    w_max: float = 1.0
    name: str = "custom"

    def validate(self, n: int = 2049) -> float:
        """Return the minimal slope on ``[0, W]``; raise if ``g`` is not increasing."""
        u = np.linspace(0.0, self.w_max, n)
        slope = np.asarray(self.g_prime(u), dtype=np.float64)
        vals = np.asarray(self.g(u), dtype=np.float64)
        if np.any(slope <= 0) or np.any(np.diff(vals) <= 0):
            raise ContractError(f"link {self.name!r} is not strictly increasing on [0, W]")
        return float(slope.min())

    @staticmethod
    def affine(slope: float = 1.0, w_max: float = 1.0) -> "AnalyticLink":
        return AnalyticLink(lambda u: slope * np.asarray(u), lambda u: np.full(np.shape(u), float(slope)),
                            lambda v: np.asarray(v) / slope, w_max, f"affine({slope})")

    @staticmethod
    def identity(w_max: float = 1.0) -> "AnalyticLink":
        return AnalyticLink.affine(1.0, w_max)


def ensemble_weights(submodels: Sequence[SubModel], g_spec: Union[str, AnalyticLink, Sequence[float]] = "uniform",
                     entropies: Optional[Sequence[float]] = None) -> np.ndarray:
    """Categorical mixing weights; inactive sub-models always get weight 0.

    ``g_spec`` is ``"uniform"``, an :class:`AnalyticLink`, or explicit relative
    weights (renormalized over active sub-models). ``entropies`` overrides the
    sub-models' entropy estimates in analytic mode.
    """
    active = np.array([s.active for s in submodels], dtype=bool)
    if not active.any():
        raise EmptyDistributionError("no valid trigger distribution found at any threshold")
    n = len(submodels)
    if isinstance(g_spec, str):
        if g_spec != "uniform":
            raise ContractError(f"unknown weighting {g_spec!r}")
        w = active / active.sum()
    elif isinstance(g_spec, AnalyticLink):
        g_spec.validate()
        h = np.array([s.mi_estimate for s in submodels] if entropies is None else entropies, dtype=np.float64)
        betas = np.array([s.beta for s in submodels])
        logw = np.full(n, -np.inf)
        slope = np.asarray(g_spec.g_prime(g_spec.g_inv(betas[active])), dtype=np.float64)
        logw[active] = h[active] - np.log(slope)
        logw -= logw[active].max()
        w = np.exp(logw)
        w /= w.sum()
    else:
        raw = np.asarray(g_spec, dtype=np.float64)
        if raw.shape != (n,) or np.any(raw < 0):
            raise ContractError("explicit weights must be one non-negative value per sub-model")
        w = np.where(active, raw, 0.0)
        if w.sum() <= 0:
            raise EmptyDistributionError("explicit weights vanish on every active sub-model")
        w = w / w.sum()
    w[~active] = 0.0
    return w


@dataclass
class TriggerEnsemble:
    submodels: List[SubModel]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.submodels):
            raise ContractError("one weight per sub-model is required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractError("weights must form a probability vector")
        for s, w in zip(self.submodels, self.weights):
            if w > 0 and not s.active:
                raise ContractError("inactive sub-models must carry zero weight")

    @property
    def dim(self) -> int:
        return self.submodels[0].generator.out_dim

    def sample(self, count: int, rng: np.random.Generator, return_index: bool = False):
        """Draw ``count`` triggers: sub-model by the categorical law, then an eval-mode sample."""
        idx = rng.choice(len(self.submodels), size=count, p=self.weights)
        out = np.empty((count, self.dim))
        for j, sm in enumerate(self.submodels):
            hit = np.flatnonzero(idx == j)
            if len(hit):
                gen = sm.generator
                z = NoiseSpec(gen.noise_dim, sm.noise).sample(rng, len(hit))
                out[hit] = gen.sample(z)
        return (out, idx) if return_index else out

    def with_weights(self, g_spec) -> "TriggerEnsemble":
        return TriggerEnsemble(self.submodels, ensemble_weights(self.submodels, g_spec))

    def submodel_sampler(self, i: int):
        """``rng, k -> [k, D]`` drawing from sub-model ``i`` alone."""
        gen = self.submodels[i].generator
        noise = NoiseSpec(gen.noise_dim, self.submodels[i].noise)
        return lambda rng, k: gen.sample(noise.sample(rng, k))


def sample_ensemble(ensemble: TriggerEnsemble, count: int, rng: np.random.Generator) -> np.ndarray:
    return ensemble.sample(count, rng)


def _fit_task(args):
    cfg, beta, F, stream, low, high = args
    return fit_submodel(cfg, beta, F, stream, low, high)


def run_mesa(cfg: MesaConfig, F, stream: RngStream, low, high, g_spec="uniform",
             workers: int = 1) -> TriggerEnsemble:
    """Fit one sub-model per threshold (independent streams) and mix them."""
    tasks = [(cfg, beta, F, stream.child("submodel", i, beta), low, high)
             for i, beta in enumerate(cfg.thresholds)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            subs = list(pool.map(_fit_task, tasks))
    else:
        subs = [_fit_task(t) for t in tasks]
    for s in subs:
        log.info("beta=%.3f mean_F=%.3f mi=%.3f active=%s", s.beta, s.mean_F, s.mi_estimate, s.active)
    return TriggerEnsemble(subs, ensemble_weights(subs, g_spec))


# --------------------------------------------------------------------------- #
# persistence
# --------------------------------------------------------------------------- #

def save_ensemble(ensemble: TriggerEnsemble, directory, config_hash: str = "", extra: Optional[dict] = None):
    """Write one generator checkpoint per sub-model plus ``manifest.json``."""
    from .checkpoint import save_network

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (s, w) in enumerate(zip(ensemble.submodels, ensemble.weights)):
        fname = f"submodel_{i}.ckpt"
        save_network(d / fname, s.generator)
        entries.append({"file": fname, "beta": s.beta, "gamma": float(w), "mean_F": s.mean_F,
                        "mi_estimate": s.mi_estimate, "active": s.active, "seed": s.seed,
                        "stream": s.stream, "noise": s.noise})
    manifest = {"format": "trigger-ensemble", "version": 1, "config_hash": config_hash,
                "submodels": entries}
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_ensemble(directory) -> TriggerEnsemble:
    from .checkpoint import load_network

    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    subs = []
    for e in manifest["submodels"]:
        subs.append(SubModel(e["beta"], load_network(d / e["file"]), e["mi_estimate"], e["mean_F"],
                             e["active"], e["seed"], e["stream"], e.get("noise", "gaussian")))
    return TriggerEnsemble(subs, np.array([e["gamma"] for e in manifest["submodels"]]))
