"""Donsker-Varadhan mutual information lower bound with a trainable statistics network.

For a deterministic generator ``X = G(Z)`` the output entropy equals
``I(X; Z)``, so the bound doubles as a differentiable entropy proxy. Joint
pairs are ``(x_k, z_k)``; marginal pairs reuse the same ``x_k`` with a noise
batch drawn independently of ``z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .networks import GeneratorNet, StatsNet
from .numeric import ContractError, OptimizerState, adam, sample_noise

EXP_CLAMP = 40.0


def _log_mean_exp(t: np.ndarray) -> float:
    m = float(t.max())
    return m + float(np.log(np.mean(np.exp(t - m))))


@dataclass
class NoiseSpec:
    dim: int = 64
    distribution: str = "gaussian"

    def __post_init__(self):
        if self.dim <= 0:
            raise ContractError("noise dimension must be positive")
        if self.distribution not in ("gaussian", "uniform"):
            raise ContractError(f"unknown noise distribution {self.distribution!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return sample_noise(rng, (n, self.dim), self.distribution)


@dataclass
class MiEstimator:
    """Statistics network plus its optimizer and the moving average of ``E[e^T]``."""

    stats: StatsNet
    opt: OptimizerState = field(default_factory=lambda: adam(2e-4))
    ema_decay: float = 0.99
    ema: Optional[float] = None
    clamped: int = 0

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ContractError("ema decay must lie in (0, 1)")

    @classmethod
    def create(cls, x_dim: int, z_dim: int, hidden: int = 512, lr: float = 2e-4,
               rng: Optional[np.random.Generator] = None, ema_decay: float = 0.99) -> "MiEstimator":
        return cls(StatsNet(x_dim, z_dim, hidden, rng), adam(lr), ema_decay)

    # ------------------------------------------------------------------ #
    def _scores(self, x, z_joint, z_marginal):
        if not (len(x) == len(z_joint) == len(z_marginal)):
            raise ContractError("x, z_joint and z_marginal must have equal batch sizes")
        tj, cj = self.stats.forward(x, z_joint)
        tm, cm = self.stats.forward(x, z_marginal)
        over = tm > EXP_CLAMP
        if np.any(over):
            self.clamped += int(over.sum())
            tm = np.minimum(tm, EXP_CLAMP)
        return tj, cj, tm, cm, over

    def estimate(self, x, z_joint, z_marginal) -> float:
        """Batch value of ``mean T(joint) - log mean exp T(marginal)``."""
        tj, _, tm, _, _ = self._scores(x, z_joint, z_marginal)
        return float(tj.mean()) - _log_mean_exp(tm)

    def step(self, x, z_joint, z_marginal, need_input_grad: bool = False, update: bool = True):
        """One ascent step on the bound for the statistics network.

        The parameter gradient of the log-denominator uses the moving average
        of ``E[e^T]`` in place of the batch mean. Returns ``(estimate, dI/dx)``
        where ``dI/dx`` is the plain batch gradient of the estimate with
        respect to ``x`` (``None`` unless requested). ``update=False`` leaves
        the statistics network untouched.
        """
        tj, cj, tm, cm, over = self._scores(x, z_joint, z_marginal)
        b = len(tj)
        lme = _log_mean_exp(tm)
        value = float(tj.mean()) - lme
        w = np.exp(tm - lme) / b  # softmax weights e^t / sum e^t
        w[over] = 0.0
        batch_mean = float(np.exp(lme))
        gj, dxj, _ = self.stats.backward(cj, np.full(b, 1.0 / b), need_inputs=need_input_grad)
        gm, dxm, _ = self.stats.backward(cm, w, need_inputs=need_input_grad)
        if update:
            self.ema = batch_mean if self.ema is None else (
                self.ema_decay * self.ema + (1.0 - self.ema_decay) * batch_mean)
            scale = batch_mean / self.ema
            # minimize the negative bound
            grads = {k: -(gj[k] - scale * gm[k]) for k in gj}
            self.opt.step(self.stats.params, grads)
        dx = (dxj - dxm) if need_input_grad else None
        return value, dx

    def dv_param_grads(self, x, z_joint, z_marginal):
        """Exact gradient of the batch bound with respect to the statistics network."""
        tj, cj, tm, cm, over = self._scores(x, z_joint, z_marginal)
        b = len(tj)
        lme = _log_mean_exp(tm)
        w = np.exp(tm - lme) / b
        w[over] = 0.0
        gj, _, _ = self.stats.backward(cj, np.full(b, 1.0 / b), need_inputs=False)
        gm, _, _ = self.stats.backward(cm, w, need_inputs=False)
        return {k: gj[k] - gm[k] for k in gj}


def dv_estimate(est: MiEstimator, x, z_joint, z_marginal) -> float:
    return est.estimate(x, z_joint, z_marginal)


def update_stats_net(est: MiEstimator, x, z_joint, z_marginal) -> MiEstimator:
    est.step(x, z_joint, z_marginal)
    return est


def entropy_proxy(est: MiEstimator, generator: GeneratorNet, noise: NoiseSpec, batch: int,
                  rng: np.random.Generator, train_steps: int = 0, eval_batches: int = 1) -> float:
    """Bound on ``I(G(Z); Z)`` for an eval-mode generator.

    ``train_steps`` extra statistics-network updates are run first on fresh
    batches; the reported value is averaged over ``eval_batches`` fresh batches.
    """
    for _ in range(train_steps):
        z = noise.sample(rng, batch)
        est.step(generator.sample(z), z, noise.sample(rng, batch))
    vals = []
    for _ in range(eval_batches):
        z = noise.sample(rng, batch)
        vals.append(est.estimate(generator.sample(z), z, noise.sample(rng, batch)))
    return float(np.mean(vals))


def train_on_pairs(est: MiEstimator, sampler, steps: int, batch: int, rng: np.random.Generator,
                   eval_batch: int = 20000) -> Tuple[float, list]:
    """Fit ``est`` on samples from ``sampler(rng, n) -> (x, z_joint, z_marginal)``.

    Returns the bound on one large held-out batch and the per-step training values.
    """
    trace = []
    for _ in range(steps):
        x, zj, zm = sampler(rng, batch)
        v, _ = est.step(x, zj, zm)
        trace.append(v)
    x, zj, zm = sampler(rng, eval_batch)
    return est.estimate(x, zj, zm), trace


def gaussian_pairs(rho: float):
    """Sampler of 1-D jointly Gaussian (X, Z) with correlation ``rho``."""

    def sampler(rng: np.random.Generator, n: int):
        x = rng.standard_normal((n, 1))
        z = rho * x + np.sqrt(1.0 - rho * rho) * rng.standard_normal((n, 1))
        zm = rho * rng.standard_normal((n, 1)) + np.sqrt(1.0 - rho * rho) * rng.standard_normal((n, 1))
        return x, z, zm

    return sampler


def gaussian_mi(rho: float) -> float:
    return -0.5 * np.log(1.0 - rho * rho)
