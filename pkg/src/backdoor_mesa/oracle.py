"""Synthetic low-dimensional problems with closed-form trigger densities.

A problem is a mixture of uniform boxes inside an axis-aligned domain
(dimension 1 or 2) together with a strictly increasing link ``g``; the
testing function is ``F = g(f)``. Generators are trained against a
sigmoid-edged version of ``f`` so that ``F`` has usable gradients, while every
check (level sets, volumes, total variation) uses the exact boxes on a grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mesa import AnalyticLink, MesaConfig, SubModel, ensemble_weights, fit_submodel
from .numeric import ContractError, RngStream


@dataclass(frozen=True)
class Box:
    low: Tuple[float, ...]
    high: Tuple[float, ...]
    mass: float

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.high, self.low)))

    @property
    def density(self) -> float:
        return self.mass / self.volume


def exp_link(rate: float = 3.0, w_max: float = 1.0) -> AnalyticLink:
    """Concave link ``(1 - e^{-rate u / W}) / (1 - e^{-rate})`` mapping [0, W] onto [0, 1]."""
    norm = 1.0 - math.exp(-rate)
    k = rate / w_max
    return AnalyticLink(
        lambda u: (1.0 - np.exp(-k * np.asarray(u, dtype=np.float64))) / norm,
        lambda u: k * np.exp(-k * np.asarray(u, dtype=np.float64)) / norm,
        lambda v: -np.log(np.clip(1.0 - np.asarray(v, dtype=np.float64) * norm, 1e-300, None)) / k,
        w_max, f"exp({rate})")


class SyntheticProblem:
    """Box-mixture density on a box domain with a known link."""

    def __init__(self, low: Sequence[float], high: Sequence[float], boxes: Sequence[Box],
                 link: Optional[AnalyticLink] = None, edge: float = 0.02, name: str = "custom"):
        self.low = np.asarray(low, dtype=np.float64).reshape(-1)
        self.high = np.asarray(high, dtype=np.float64).reshape(-1)
        self.d = self.low.size
        if self.d not in (1, 2) or self.high.size != self.d or np.any(self.high <= self.low):
            raise ContractError("domain must be a non-degenerate box in 1 or 2 dimensions")
        self.boxes = list(boxes)
        for b in self.boxes:
            if len(b.low) != self.d or np.any(np.asarray(b.low) < self.low) or np.any(np.asarray(b.high) > self.high):
                raise ContractError(f"box {b} does not fit inside the domain")
            if b.mass <= 0 or b.volume <= 0:
                raise ContractError("boxes need positive mass and volume")
        if abs(sum(b.mass for b in self.boxes) - 1.0) > 1e-9:
            raise ContractError("box masses must sum to 1")
        self.w_max = self.max_density()
        self.link = link if link is not None else AnalyticLink.identity(self.w_max)
        self.link = replace(self.link, w_max=max(self.link.w_max, self.w_max))
        self.min_slope = self.link.validate()
        self.edge = float(edge)
        self.name = name
        self.dim = self.d

    # ------------------------------------------------------------------ #
    @staticmethod
    def two_boxes(link: Optional[AnalyticLink] = None, heights=(0.65, 0.35), gap: float = 0.3,
                  margin: float = 0.2, edge: float = 0.02) -> "SyntheticProblem":
        """Two disjoint equal-mass intervals with the given densities, ``gap`` apart."""
        a = (margin, margin + 0.5 / heights[0])
        b = (a[1] + gap, a[1] + gap + 0.5 / heights[1])
        return SyntheticProblem([0.0], [b[1] + margin], [Box((a[0],), (a[1],), 0.5), Box((b[0],), (b[1],), 0.5)],
                                link, edge, "two-boxes")

    @staticmethod
    def single_box(low=(1.0,), high=(3.0,), domain=((0.0,), (4.0,)), edge: float = 0.02) -> "SyntheticProblem":
        return SyntheticProblem(domain[0], domain[1], [Box(tuple(low), tuple(high), 1.0)], None, edge,
                                "single-box")

    @staticmethod
    def plane(link: Optional[AnalyticLink] = None) -> "SyntheticProblem":
        """Overlapping boxes on the unit square, used for staircase enumeration."""
        boxes = [Box((0.1, 0.1), (0.6, 0.5), 0.3), Box((0.4, 0.3), (0.9, 0.9), 0.5),
                 Box((0.0, 0.0), (1.0, 1.0), 0.2)]
        p = SyntheticProblem([0.0, 0.0], [1.0, 1.0], boxes, None, 0.02, "plane")
        if link is None:
            link = exp_link(3.0, p.w_max)
        return SyntheticProblem([0.0, 0.0], [1.0, 1.0], boxes, link, 0.02, "plane")

    # ------------------------------------------------------------------ #
    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.d)
        out = np.zeros(len(x))
        for b in self.boxes:
            inside = np.all((x >= np.asarray(b.low)) & (x <= np.asarray(b.high)), axis=1)
            out += b.density * inside
        return out

    def max_density(self) -> float:
        # the maximum of a box mixture is attained at a corner combination; probe box centres and corners
        pts = []
        for b in self.boxes:
            lo, hi = np.asarray(b.low), np.asarray(b.high)
            pts.append((lo + hi) / 2)
            for c in np.array(np.meshgrid(*[[0, 1]] * self.d)).T.reshape(-1, self.d):
                pts.append(np.where(c == 1, hi, lo))
        return float(self.density(np.array(pts)).max())

    def exact_F(self, x) -> np.ndarray:
        return np.asarray(self.link.g(self.density(x)), dtype=np.float64)

    def _smooth(self, x):
        """Sigmoid-edged density and its gradient."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.d)
        val = np.zeros(len(x))
        grad = np.zeros_like(x)
        s = self.edge
        for b in self.boxes:
            lo, hi = np.asarray(b.low), np.asarray(b.high)
            a = 0.5 * (1 + np.tanh((x - lo) / (2 * s)))  # sigmoid((x - lo) / s)
            c = 0.5 * (1 + np.tanh((hi - x) / (2 * s)))
            per = a * c
            dper = (a * (1 - a) * c - c * (1 - c) * a) / s
            prod = np.prod(per, axis=1)
            val += b.density * prod
            for j in range(self.d):
                others = np.prod(np.delete(per, j, axis=1), axis=1) if self.d > 1 else 1.0
                grad[:, j] += b.density * dper[:, j] * others
        return val, grad

    # testing-function protocol used by fit_submodel
    def __call__(self, x, rng=None, batch_images=None) -> np.ndarray:
        return np.asarray(self.link.g(self._smooth(x)[0]), dtype=np.float64)

    def value_and_grad(self, x, rng=None, batch_images=None):
        u, du = self._smooth(x)
        return (np.asarray(self.link.g(u), dtype=np.float64),
                np.asarray(self.link.g_prime(u), dtype=np.float64)[:, None] * du)

    # ------------------------------------------------------------------ #
    def grid(self, cells: int = 64) -> "GridSpec":
        return GridSpec(self.low, self.high, cells)

    def truth(self, cells: int = 64) -> "GridDensity":
        """Exact per-cell probability mass of ``f``."""
        spec = self.grid(cells)
        mass = np.zeros(spec.shape)
        for b in self.boxes:
            per_axis = []
            for j in range(self.d):
                e = spec.edges[j]
                ov = np.clip(np.minimum(e[1:], b.high[j]) - np.maximum(e[:-1], b.low[j]), 0.0, None)
                per_axis.append(ov)
            overlap = per_axis[0] if self.d == 1 else np.outer(per_axis[0], per_axis[1])
            mass += b.density * overlap
        total = mass.sum()
        if abs(total - 1.0) > 1e-6:
            raise ContractError(f"density integrates to {total}, not 1")
        return GridDensity(spec, mass / total)

    def level_mask(self, beta: float, cells: int = 64) -> np.ndarray:
        """Cells whose centre satisfies ``F > beta`` under the exact density."""
        spec = self.grid(cells)
        return (self.exact_F(spec.centers()) > beta).reshape(spec.shape)

    def log_volume(self, beta: float, cells: int = 2048) -> float:
        """Quadrature value of ``log V({F > beta})``; ``-inf`` for an empty set."""
        spec = GridSpec(self.low, self.high, cells if self.d == 1 else min(cells, 512))
        inside = self.exact_F(spec.centers()) > beta
        vol = inside.sum() * spec.cell_volume
        return math.log(vol) if vol > 0 else -math.inf


@dataclass
class GridSpec:
    low: np.ndarray
    high: np.ndarray
    cells: int

    @property
    def d(self) -> int:
        return len(self.low)

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.cells,) * self.d

    @property
    def edges(self) -> List[np.ndarray]:
        return [np.linspace(self.low[j], self.high[j], self.cells + 1) for j in range(self.d)]

    @property
    def cell_volume(self) -> float:
        return float(np.prod((self.high - self.low) / self.cells))

    def centers(self) -> np.ndarray:
        mids = [(e[:-1] + e[1:]) / 2 for e in self.edges]
        mesh = np.meshgrid(*mids, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def histogram(self, samples: np.ndarray) -> np.ndarray:
        s = np.asarray(samples, dtype=np.float64).reshape(-1, self.d)
        counts, _ = np.histogramdd(s, bins=self.edges)
        return counts


@dataclass
class GridDensity:
    """Per-cell probability masses on a regular grid."""

    spec: GridSpec
    mass: np.ndarray

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1.0) > 1e-9:
            raise ContractError("grid masses must be non-negative and sum to 1")

    @classmethod
    def from_samples(cls, spec: GridSpec, samples: np.ndarray) -> "GridDensity":
        counts = spec.histogram(samples)
        if counts.sum() == 0:
            raise ContractError("no samples fall inside the grid")
        return cls(spec, counts / counts.sum())

    def tv(self, other: "GridDensity") -> float:
        return 0.5 * float(np.abs(self.mass - other.mass).sum())

    def mass_where(self, mask: np.ndarray) -> float:
        return float(self.mass[mask].sum())

    @property
    def values(self) -> np.ndarray:
        """Density values per cell."""
        return self.mass / self.spec.cell_volume


# --------------------------------------------------------------------------- #
# staircase
# --------------------------------------------------------------------------- #

def staircase_counts(F_values, n: int) -> np.ndarray:
    """Number of levels ``i / n`` (``i = 1..n``) strictly below each value, in exact arithmetic."""
    if n < 1:
        raise ContractError("need at least one level")
    f = np.asarray(F_values, dtype=np.float64)
    out = np.empty(f.shape, dtype=np.int64)
    for idx, v in np.ndenumerate(f):
        q = Fraction(float(v)) * n
        # count of integers i in [1, n] with i < q
        k = math.ceil(q) - 1
        out[idx] = min(max(k, 0), n)
    return out


def staircase_bruteforce(F_values, n: int) -> np.ndarray:
    """Ideal staircase ``sum_i 1[F > i/n] / n`` on a grid of ``F`` values."""
    return staircase_counts(F_values, n) / n


def staircase_max_gap(F_values, n: int) -> Fraction:
    """Exact ``max |S - F|`` over the grid as a rational number."""
    f = np.asarray(F_values, dtype=np.float64)
    counts = staircase_counts(f, n)
    return max(abs(Fraction(int(c), n) - Fraction(float(v))) for c, v in zip(counts.reshape(-1), f.reshape(-1)))


# --------------------------------------------------------------------------- #
# MESA on synthetic problems
# --------------------------------------------------------------------------- #

def oracle_config(**kw) -> MesaConfig:
    """Small networks suited to 1-D and 2-D outputs."""
    base = dict(thresholds=(0.5,), alpha=0.1, epochs=30, steps_per_epoch=20, batch_size=128, noise_dim=8,
                noise="uniform", gen_hidden=64, stats_hidden=64, lr_gen=1e-3, lr_stats=1e-3, stats_steps=3,
                eval_samples=4096,
                mi_batch=1024, mi_refine_steps=0, mi_eval_batches=8)
    base.update(kw)
    return MesaConfig(**base)


@dataclass
class UniformityReport:
    tv: float
    outside_mass: float
    cells: int


def check_uniformity(submodel: SubModel, problem: SyntheticProblem, rng: np.random.Generator,
                     n_samples: int = 100_000, cells: int = 64) -> UniformityReport:
    """TV distance between the sub-model's samples inside ``{F > beta}`` and uniform there."""
    mask = problem.level_mask(submodel.beta, cells)
    spec = problem.grid(cells)
    x = _draw(submodel, rng, n_samples)
    counts = spec.histogram(x)
    outside = 1.0 - counts[mask].sum() / n_samples
    if not mask.any():
        return UniformityReport(float("nan"), float(outside), 0)
    inside = counts[mask]
    p = inside / inside.sum() if inside.sum() > 0 else np.zeros_like(inside)
    u = np.full(inside.shape, 1.0 / inside.size)
    return UniformityReport(0.5 * float(np.abs(p - u).sum()), float(outside), int(mask.sum()))


def _draw(sm: SubModel, rng: np.random.Generator, n: int) -> np.ndarray:
    from .mine import NoiseSpec

    gen = sm.generator
    return gen.sample(NoiseSpec(gen.noise_dim, sm.noise).sample(rng, n))


@dataclass
class OracleResult:
    problem: str
    levels: np.ndarray
    submodels: List[SubModel]
    weights: np.ndarray
    fhat: GridDensity
    truth: GridDensity
    tv: float
    box_mass: List[float]
    log_volumes: np.ndarray
    failures: List[str] = field(default_factory=list)

    def rows(self) -> List[dict]:
        return [{"level": i + 1, "beta": float(s.beta), "active": int(s.active), "mean_F": float(s.mean_F),
                 "mi_estimate": float(s.mi_estimate), "log_volume": float(lv), "gamma": float(w)}
                for i, (s, lv, w) in enumerate(zip(self.submodels, self.log_volumes, self.weights))]


def run_oracle_mesa(problem: SyntheticProblem, stream: RngStream, n_levels: int = 10,
                    cfg: Optional[MesaConfig] = None, entropy: str = "mine", n_samples: int = 100_000,
                    cells: int = 64) -> OracleResult:
    """Fit one sub-model per level ``i / n_levels`` and rebuild ``f`` from their samples.

    ``entropy`` selects the entropy term of the analytic weights: ``"mine"``
    uses each sub-model's estimate, ``"volume"`` the quadrature log-volume.
    """
    if entropy not in ("mine", "volume"):
        raise ContractError(f"unknown entropy source {entropy!r}")
    cfg = cfg or oracle_config()
    betas = np.arange(1, n_levels + 1) / n_levels
    subs = []
    for i, beta in enumerate(betas):
        subs.append(fit_submodel(cfg, float(beta), problem, stream.child("level", i), problem.low, problem.high))
    log_v = np.array([problem.log_volume(b) for b in betas])
    failures = [f"level {b:.3f}: no active sub-model although the level set has positive volume"
                for s, b, lv in zip(subs, betas, log_v) if not s.active and np.isfinite(lv)]
    ent = None if entropy == "mine" else np.where(np.isfinite(log_v), log_v, 0.0)
    weights = ensemble_weights(subs, problem.link, entropies=ent)
    spec = problem.grid(cells)
    rng = stream.child("histogram").generator()
    fhat = np.zeros(spec.shape)
    for s, w in zip(subs, weights):
        if w > 0:
            counts = spec.histogram(_draw(s, rng, n_samples))
            if counts.sum() > 0:
                fhat += w * counts / counts.sum()
    fhat_d = GridDensity(spec, fhat / fhat.sum())
    truth = problem.truth(cells)
    box_mass = []
    for b in problem.boxes:
        inside = np.all((spec.centers() >= np.asarray(b.low)) & (spec.centers() <= np.asarray(b.high)), axis=1)
        box_mass.append(fhat_d.mass_where(inside.reshape(spec.shape)))
    return OracleResult(problem.name, betas, subs, weights, fhat_d, truth, fhat_d.tv(truth), box_mass, log_v,
                        failures)


def write_oracle_csv(result: OracleResult, path) -> None:
    rows = result.rows()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def write_oracle_svg(result: OracleResult, path) -> None:
    from .svg import heatmap, profile

    if result.fhat.spec.d == 1:
        text = profile(result.truth.values, f"{result.problem}: f (blue) vs reconstruction (orange)",
                       overlay=result.fhat.values)
    else:
        both = np.hstack([result.truth.values, np.full((result.truth.spec.cells, 2), 0.0), result.fhat.values])
        text = heatmap(both, f"{result.problem}: f (left) vs reconstruction (right)")
    Path(path).write_text(text, encoding="utf-8")
