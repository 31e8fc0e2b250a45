"""Latent factor prompt generator.

Each prompt shares one latent scalar ``u_i`` per token across two covariate
modalities and the response::

    x_i = u_i * m + noise_i,    y_i = zeta * u_i

where ``m = [v; r]`` stacks the two modality vectors. Conditional on the task
``(m, zeta)`` the covariates have covariance ``I + m m^T`` and the best
predictor of ``y`` from ``x`` is ``<w, x>`` with ``w = zeta m / (1 + |m|^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ZETA_LAWS = ("normal", "rademacher", "uniform")
NORM_LAWS = ("uniform", "point")


@dataclass(frozen=True)
class MDistribution:
    """Law of the stacked modality vector ``m``.

    The norm ``|m|`` is drawn from ``norm_law`` on ``[a, b]`` and the direction
    uniformly on the sphere, unless ``direction`` pins it (test configs only).
    ``norm_law="point"`` puts all mass at ``a``; it breaks the non-degeneracy
    assumption and exists to build closed-form test cases.
    """

    norm_law: str = "uniform"
    a: float = 0.0
    b: float = 2.0
    direction: Optional[tuple] = None

    def __post_init__(self):
        if self.norm_law not in NORM_LAWS:
            raise ValueError(f"unknown norm_law {self.norm_law!r}")
        if self.a < 0:
            raise ValueError("norm support must be nonnegative")
        if self.norm_law == "uniform" and not self.a < self.b:
            raise ValueError("uniform norm law needs a < b")
        if self.norm_law == "point":
            object.__setattr__(self, "b", self.a)

    @classmethod
    def point(cls, radius: float, direction=None) -> "MDistribution":
        if direction is not None:
            direction = tuple(float(x) for x in direction)
        return cls(norm_law="point", a=float(radius), b=float(radius), direction=direction)

    @property
    def m_lower(self) -> float:
        """ess inf of |m|^2."""
        return self.a**2

    @property
    def m_upper(self) -> float:
        """ess sup of |m|^2."""
        return self.b**2

    @property
    def degenerate(self) -> bool:
        return not self.m_lower < self.m_upper

    def sample_norm(self, rng: np.random.Generator, size=None):
        if self.norm_law == "point":
            return np.full(size, self.a) if size is not None else self.a
        return rng.uniform(self.a, self.b, size=size)

    def norm_quadrature(self, node_count: int):
        """Nodes and probability weights for expectations over ``|m|``."""
        if self.norm_law == "point":
            return np.array([self.a]), np.array([1.0])
        x, wts = np.polynomial.legendre.leggauss(node_count)
        half = 0.5 * (self.b - self.a)
        r = self.a + half * (x + 1.0)
        # weights of the interval rule sum to b - a; dividing gives probabilities
        return r, wts * half / (self.b - self.a)


@dataclass(frozen=True)
class DataConfig:
    d1: int = 5
    d2: int = 5
    m_dist: MDistribution = field(default_factory=MDistribution)
    zeta_dist: str = "normal"

    def __post_init__(self):
        if self.d1 < 1 or self.d2 < 1:
            raise ValueError("modality dimensions must be positive")
        if self.zeta_dist not in ZETA_LAWS:
            raise ValueError(f"unknown zeta_dist {self.zeta_dist!r}")
        if self.m_dist.direction is not None and len(self.m_dist.direction) != self.d:
            raise ValueError("fixed direction has wrong dimension")

    @property
    def d(self) -> int:
        return self.d1 + self.d2


def sample_zeta(law: str, rng: np.random.Generator, size=None):
    """Draw from a mean-zero, unit-variance law."""
    if law == "normal":
        return rng.standard_normal(size)
    if law == "rademacher":
        return rng.choice([-1.0, 1.0], size=size)
    if law == "uniform":
        s = np.sqrt(3.0)
        return rng.uniform(-s, s, size=size)
    raise ValueError(f"unknown zeta law {law!r}")


@dataclass(frozen=True)
class TaskParams:
    m: np.ndarray
    zeta: float

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float))
        object.__setattr__(self, "zeta", float(self.zeta))

    @property
    def d(self) -> int:
        return self.m.shape[0]

    @property
    def Z(self) -> float:
        return 1.0 + float(self.m @ self.m)

    @property
    def w(self) -> np.ndarray:
        return (self.zeta / self.Z) * self.m


def split_m(task: TaskParams, d1: int):
    """Return the per-modality pieces ``(v, r)`` of ``m``."""
    return task.m[:d1], task.m[d1:]


@dataclass
class Prompt:
    X: np.ndarray  # d x L
    y: np.ndarray  # L
    x_q: np.ndarray
    y_q: float
    task: TaskParams
    u: np.ndarray  # L + 1 latents, last one is the query's; never read by models

    @property
    def L(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[0]


def _direction(cfg: DataConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.m_dist.direction is not None:
        e = np.asarray(cfg.m_dist.direction, dtype=float)
        return e / np.linalg.norm(e)
    g = rng.standard_normal(cfg.d)
    return g / np.linalg.norm(g)


def sample_task(cfg: DataConfig, rng: np.random.Generator) -> TaskParams:
    radius = cfg.m_dist.sample_norm(rng)
    m = radius * _direction(cfg, rng)
    zeta = sample_zeta(cfg.zeta_dist, rng)
    return TaskParams(m=m, zeta=zeta)


def sample_prompt(task: TaskParams, L: int, rng: np.random.Generator) -> Prompt:
    if L < 1:
        raise ValueError("context length must be >= 1")
    u = rng.standard_normal(L + 1)
    noise = rng.standard_normal((task.d, L + 1))
    cols = np.outer(task.m, u) + noise
    y_all = task.zeta * u
    return Prompt(
        X=cols[:, :L],
        y=y_all[:L],
        x_q=cols[:, L].copy(),
        y_q=float(y_all[L]),
        task=task,
        u=u,
    )


def sample_prompts(cfg: DataConfig, n: int, L: int, rng: np.random.Generator) -> list:
    """``n`` prompts, each with a fresh task."""
    return [sample_prompt(sample_task(cfg, rng), L, rng) for _ in range(n)]


def bayes_predict(task: TaskParams, x_q) -> float:
    x_q = np.asarray(x_q, dtype=float)
    if x_q.shape != (task.d,):
        raise ValueError(f"query has shape {x_q.shape}, expected ({task.d},)")
    return float(task.w @ x_q)


def population_covariance(task: TaskParams) -> np.ndarray:
    return np.eye(task.d) + np.outer(task.m, task.m)


def sample_covariance(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("need a nonempty d x L matrix")
    return X @ X.T / X.shape[1]


@dataclass
class PromptBatch:
    """Stacked prompts sharing one context length, for vectorised evaluation.

    Treated as immutable: forward passes cache per-prompt statistics on it.
    """

    X: np.ndarray  # n x d x L
    y: np.ndarray  # n x L
    x_q: np.ndarray  # n x d
    y_q: np.ndarray  # n
    w: np.ndarray  # n x d, Bayes coefficients (metrics only)

    @classmethod
    def from_prompts(cls, prompts) -> "PromptBatch":
        if not prompts:
            raise ValueError("empty prompt list")
        if len({p.X.shape for p in prompts}) != 1:
            raise ValueError("prompts must share (d, L)")
        return cls(
            X=np.stack([p.X for p in prompts]),
            y=np.stack([p.y for p in prompts]),
            x_q=np.stack([p.x_q for p in prompts]),
            y_q=np.array([p.y_q for p in prompts]),
            w=np.stack([p.task.w for p in prompts]),
        )

    def __len__(self):
        return self.X.shape[0]

    @property
    def L(self) -> int:
        return self.X.shape[2]

    @property
    def bayes(self) -> np.ndarray:
        return np.einsum("nd,nd->n", self.w, self.x_q)

    def subset(self, idx) -> "PromptBatch":
        return PromptBatch(self.X[idx], self.y[idx], self.x_q[idx], self.y_q[idx], self.w[idx])


def sample_batch(cfg: DataConfig, n: int, L: int, rng: np.random.Generator) -> PromptBatch:
    return PromptBatch.from_prompts(sample_prompts(cfg, n, L, rng))
