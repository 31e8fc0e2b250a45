"""Executable checks of the depth and single-layer results.

The single-layer LSA prediction converges, as the context grows, to
``<w_hat, x_q>`` where ``w_hat`` is a degree-two polynomial in ``zeta``.
Matching the Bayes vector ``w = zeta m / Z`` for every task is impossible when
the law of ``|m|`` has no atoms; :func:`theorem1_scan` measures how far a
given set of weights is from doing so.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from .attention import LsaParams, lsa_forward, assemble_embedding
from .datagen import DataConfig, TaskParams, population_covariance, sample_task
from .optim import minimize_1d

MISMATCH_THRESHOLD = 1e-6
QUANTILES = (0.0, 0.01, 0.1, 0.5, 0.9, 0.99, 1.0)


@dataclass
class LsaBlocks:
    """Block view of the LSA weights that reach the prediction::

        W_kq = [[A, b_prime], [b^T, c]],   last row of W_pv = [u^T, v]
    """

    A: np.ndarray
    b: np.ndarray
    b_prime: np.ndarray
    c: float
    u: np.ndarray
    v: float

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_params(cls, p: LsaParams) -> "LsaBlocks":
        d = p.d
        K = p.W_kq
        return cls(
            A=K[:d, :d].copy(),
            b=K[d, :d].copy(),
            b_prime=K[:d, d].copy(),
            c=float(K[d, d]),
            u=p.W_pv[d, :d].copy(),
            v=float(p.W_pv[d, d]),
        )

    def to_params(self, W_pv=None) -> LsaParams:
        """Reassemble the weights; the first ``d`` rows of ``W_pv`` are taken
        from ``W_pv`` if given and are zero otherwise."""
        d = self.d
        K = np.empty((d + 1, d + 1))
        K[:d, :d] = self.A
        K[d, :d] = self.b
        K[:d, d] = self.b_prime
        K[d, d] = self.c
        P = np.zeros((d + 1, d + 1)) if W_pv is None else np.array(W_pv, dtype=float)
        P[d, :d] = self.u
        P[d, d] = self.v
        return LsaParams(P, K)

    @classmethod
    def zeros(cls, d: int) -> "LsaBlocks":
        return cls(np.zeros((d, d)), np.zeros(d), np.zeros(d), 0.0, np.zeros(d), 0.0)


def lsa_limiting_weights(blocks: LsaBlocks, task: TaskParams) -> np.ndarray:
    """Large-context regression vector of the single-layer LSA."""
    m, zeta = task.m, task.zeta
    lam = population_covariance(task)
    A, b, u, v = blocks.A, blocks.b, blocks.u, blocks.v
    row = u @ lam @ A + ((u @ m) * b + v * (m @ A)) * zeta + v * b * zeta**2
    return row


@dataclass
class MismatchReport:
    norms: np.ndarray
    threshold: float = MISMATCH_THRESHOLD
    quantiles: dict = field(default_factory=dict)
    laws: str = ""

    def __post_init__(self):
        self.norms = np.asarray(self.norms, dtype=float)
        if not self.quantiles and self.norms.size:
            self.quantiles = {q: float(np.quantile(self.norms, q)) for q in QUANTILES}

    @property
    def n_tasks(self) -> int:
        return self.norms.size

    @property
    def fraction_below(self) -> float:
        return float(np.mean(self.norms < self.threshold))

    @property
    def passed(self) -> bool:
        """No task is matched to within the threshold."""
        return self.fraction_below == 0.0

    def summary(self) -> str:
        qs = ", ".join(f"q{q:g}={v:.3g}" for q, v in self.quantiles.items())
        return (
            f"{self.n_tasks} tasks, fraction with |w_hat - w| < {self.threshold:g}: "
            f"{self.fraction_below:g}; {qs}. Task laws scanned: {self.laws}"
        )


def theorem1_scan(
    blocks: LsaBlocks,
    n_tasks: int,
    rng: np.random.Generator,
    cfg: DataConfig | None = None,
    threshold: float = MISMATCH_THRESHOLD,
) -> MismatchReport:
    """Distribution of ``|w_hat(m, zeta) - w(m, zeta)|`` over sampled tasks."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    cfg = cfg or DataConfig(d1=blocks.d // 2, d2=blocks.d - blocks.d // 2)
    if cfg.d != blocks.d:
        raise ValueError("data dimension does not match the weights")
    norms = np.empty(n_tasks)
    for i in range(n_tasks):
        task = sample_task(cfg, rng)
        norms[i] = np.linalg.norm(lsa_limiting_weights(blocks, task) - task.w)
    md = cfg.m_dist
    laws = f"|m| ~ {md.norm_law}[{md.a:g}, {md.b:g}], zeta ~ {cfg.zeta_dist}; other atomless laws are not covered"
    return MismatchReport(norms=norms, threshold=threshold, laws=laws)


def degenerate_counterexample(d: int, z0: float) -> LsaBlocks:
    """Weights that match the Bayes vector exactly when ``Z = z0`` surely.

    With ``u = 0, v = 1, b = 0, A = I / z0`` the limit is ``zeta m / z0``.
    """
    blocks = LsaBlocks.zeros(d)
    blocks.A = np.eye(d) / z0
    blocks.v = 1.0
    return blocks


def simulate_lsa_prediction(
    blocks: LsaBlocks, task: TaskParams, x_q, L: int, n_rep: int, rng: np.random.Generator
):
    """Mean and standard error of the LSA prediction at a fixed query over
    ``n_rep`` independent contexts of length ``L``."""
    p = blocks.to_params()
    x_q = np.asarray(x_q, dtype=float)
    preds = np.empty(n_rep)
    for k in range(n_rep):
        u = rng.standard_normal(L)
        X = np.outer(task.m, u) + rng.standard_normal((task.d, L))
        y = task.zeta * u
        preds[k] = lsa_forward(assemble_embedding(X, y, x_q), p)
    return float(preds.mean()), float(preds.std(ddof=1) / np.sqrt(n_rep))


def alpha_star_sequence(T_list, zm: losses.ZMoments, bracket=(0.0, 1.0)):
    """``(T, alpha*_T, alpha*_T - alpha*)`` for each depth, by golden section
    on the one-parameter population loss."""
    T_list = list(T_list)
    if not T_list:
        raise ValueError("T_list is empty")
    target = losses.alpha_star_limit(zm)
    out = []
    for T in T_list:
        a, _ = minimize_1d(lambda x: losses.pop_loss_one_param(x, T, zm), bracket)
        out.append((T, float(a), float(a - target)))
    return out
