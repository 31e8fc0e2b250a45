"""Query losses.

Population losses are expectations over the spike eigenvalue ``Z = 1 + |m|^2``
and are evaluated with a fixed Gauss-Legendre rule in the norm ``r = |m|``.
All of them drop the irreducible constant ``E[1/Z]``; see :func:`bayes_floor`.

Notation used throughout::

    W = (Z - 1) / Z
    u_T(beta, Z) = (1 + beta Z)^T
    S(Z, beta) = (u_T - 1) / beta   (= T Z at beta = 0)
    A(beta) = E[W S^2],  B(beta) = E[W S]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import predict_batch
from .datagen import MDistribution, PromptBatch

BETA_ZERO = 1e-12
LOG_POWER_MIN_T = 1000


class DegenerateDistribution(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureSpec:
    node_count: int = 256

    def __post_init__(self):
        if self.node_count < 16:
            raise ValueError("use at least 16 quadrature nodes")


@dataclass
class ZMoments:
    """Expectations of smooth functions of ``Z`` under a given m-law."""

    m_dist: MDistribution = field(default_factory=MDistribution)
    quad: QuadratureSpec = field(default_factory=QuadratureSpec)

    def __post_init__(self):
        r, p = self.m_dist.norm_quadrature(self.quad.node_count)
        self.Z = 1.0 + r**2
        self.prob = p
        self.W = (self.Z - 1.0) / self.Z
        self.EW = self.expect(self.W)

    @property
    def Z_lower(self) -> float:
        return 1.0 + self.m_dist.m_lower

    @property
    def Z_upper(self) -> float:
        return 1.0 + self.m_dist.m_upper

    def expect(self, values) -> float:
        """Quadrature sum of ``values`` tabulated at the nodes ``self.Z``."""
        return float(np.dot(self.prob, values))

    def expect_fn(self, g) -> float:
        return self.expect(g(self.Z))


def int_power(q, T: int):
    """Elementwise ``q**T`` for integer ``T >= 0``.

    Square-and-multiply for moderate ``T``; beyond that a sign-tracked
    ``exp(T log|q|)``.
    """
    q = np.asarray(q, dtype=float)
    if T > LOG_POWER_MIN_T:
        with np.errstate(divide="ignore", over="ignore"):
            mag = np.exp(T * np.log(np.abs(q)))
        sign = np.where((q < 0) & (T % 2 == 1), -1.0, 1.0)
        return sign * mag
    out = np.ones_like(q)
    base = q.copy()
    n = T
    while n:
        if n & 1:
            out = out * base
        base = base * base
        n >>= 1
    return out


def u_T(beta: float, Z, T: int):
    return int_power(1.0 + beta * np.asarray(Z, dtype=float), T)


def S_fn(Z, beta: float, T: int):
    """``((1 + beta Z)^T - 1) / beta`` with its ``beta -> 0`` limit ``T Z``."""
    Z = np.asarray(Z, dtype=float)
    if abs(beta) < BETA_ZERO:
        return T * Z
    q = 1.0 + beta * Z
    pos = q > 0
    out = np.empty_like(Z)
    # expm1/log1p keeps full precision when beta Z is small
    out[pos] = np.expm1(T * np.log1p(beta * Z[pos])) / beta
    out[~pos] = (int_power(q[~pos], T) - 1.0) / beta
    return out


def dS_dbeta(Z, beta: float, T: int):
    Z = np.asarray(Z, dtype=float)
    q = 1.0 + beta * Z
    if abs(beta) * np.max(Z) < 0.05 or T <= 64:
        # Z^2 sum_{k=1}^{T-1} k q^{k-1}, no cancellation
        acc = np.zeros_like(Z)
        qk = np.ones_like(Z)
        for k in range(1, T):
            acc += k * qk
            qk = qk * q
        return Z**2 * acc
    uT = int_power(q, T)
    return (T * Z * int_power(q, T - 1) * beta - (uT - 1.0)) / beta**2


def bayes_floor(zm: ZMoments) -> float:
    """Irreducible query error ``E[1/Z]`` left out of the population losses."""
    return zm.expect(1.0 / zm.Z)


def pop_loss_one_param(alpha: float, T: int, zm: ZMoments) -> float:
    return zm.expect(zm.W * int_power(1.0 - alpha * zm.Z, 2 * T))


def _residual(alpha: float, beta: float, T: int, zm: ZMoments):
    """``alpha S - 1`` at the nodes, in a cancellation-free form."""
    if abs(beta) < BETA_ZERO:
        return alpha * T * zm.Z - 1.0
    u = u_T(beta, zm.Z, T)
    # alpha/beta = -1 + (alpha+beta)/beta; alpha+beta is exact when alpha ~ -beta
    return (alpha + beta) / beta * (u - 1.0) - u


def pop_loss_two_param(alpha: float, beta: float, T: int, zm: ZMoments) -> float:
    e = _residual(alpha, beta, T, zm)
    return zm.expect(zm.W * e**2)


def A_B(beta: float, T: int, zm: ZMoments):
    S = S_fn(zm.Z, beta, T)
    return zm.expect(zm.W * S**2), zm.expect(zm.W * S)


def profiled_alpha(beta: float, T: int, zm: ZMoments) -> float:
    """Minimiser over alpha of the two-parameter loss at fixed beta."""
    A, B = A_B(beta, T, zm)
    if A < 1e-14:
        raise DegenerateDistribution(f"A(beta) = {A:.3g} at beta = {beta}")
    return B / A


def reduced_loss_AB(beta: float, T: int, zm: ZMoments) -> float:
    """``E[W] - B^2 / A``."""
    A, B = A_B(beta, T, zm)
    return zm.EW - B**2 / A


def reduced_loss(beta: float, T: int, zm: ZMoments) -> float:
    """Profiled loss in variance form, ``E[W] Var_mu(u) / E_mu[(1-u)^2]``.

    ``mu`` reweights the Z-law by ``W``.
    """
    if abs(beta) < BETA_ZERO:
        return reduced_loss_AB(0.0, T, zm)
    mu = zm.prob * zm.W / zm.EW
    u = u_T(beta, zm.Z, T)
    mean = np.dot(mu, u)
    var = np.dot(mu, (u - mean) ** 2)
    return zm.EW * var / np.dot(mu, (1.0 - u) ** 2)


def log_reduced_loss(beta: float, T: int, zm: ZMoments) -> float:
    return np.log(reduced_loss(beta, T, zm) / zm.EW) / (2 * T)


def _variance_form_parts(beta: float, T: int, zm: ZMoments):
    mu = zm.prob * zm.W / zm.EW
    q = 1.0 + beta * zm.Z
    u = int_power(q, T)
    du = T * zm.Z * int_power(q, T - 1)
    dev = u - np.dot(mu, u)
    var = np.dot(mu, dev**2)
    den = np.dot(mu, (1.0 - u) ** 2)
    d_var = 2.0 * np.dot(mu, dev * du)
    d_den = -2.0 * np.dot(mu, (1.0 - u) * du)
    return var, den, d_var, d_den


def grad_log_reduced_loss(beta: float, T: int, zm: ZMoments) -> float:
    """``d/dbeta log F_T(beta)`` from the variance form.

    Differentiating the variance form directly never touches ``alpha``, which
    matters at large depth: there ``F_T`` is far below the rounding error of
    ``alpha*(beta)``, and the envelope-theorem route through
    :func:`grad_two_param` loses every significant digit.
    """
    if abs(beta) < BETA_ZERO:
        h = 1e-7
        return (np.log(reduced_loss_AB(h, T, zm)) - np.log(reduced_loss_AB(-h, T, zm))) / (2 * h)
    var, den, d_var, d_den = _variance_form_parts(beta, T, zm)
    return d_var / var - d_den / den


def grad_reduced_loss(beta: float, T: int, zm: ZMoments) -> float:
    return reduced_loss(beta, T, zm) * grad_log_reduced_loss(beta, T, zm)


def phi(alpha: float, zm: ZMoments) -> float:
    """Worst-case contraction ``max |1 - alpha z|`` over ``z`` in the Z support."""
    return max(abs(1.0 - alpha * zm.Z_lower), abs(1.0 - alpha * zm.Z_upper))


def alpha_star_limit(zm: ZMoments) -> float:
    return 2.0 / (zm.Z_lower + zm.Z_upper)


def grad_one_param(alpha: float, T: int, zm: ZMoments) -> float:
    return -2.0 * T * zm.expect(zm.W * zm.Z * int_power(1.0 - alpha * zm.Z, 2 * T - 1))


def grad_two_param(alpha: float, beta: float, T: int, zm: ZMoments) -> np.ndarray:
    e = _residual(alpha, beta, T, zm)
    S = S_fn(zm.Z, beta, T)
    dS = dS_dbeta(zm.Z, beta, T)
    return np.array([2.0 * zm.expect(zm.W * e * S), 2.0 * alpha * zm.expect(zm.W * e * dS)])


def empirical_loss(model, batch: PromptBatch, target: str = "label") -> float:
    """Mean squared error on the query, against ``y_q`` or the Bayes prediction."""
    if len(batch) == 0:
        raise ValueError("empty prompt batch")
    if target == "label":
        t = batch.y_q
    elif target == "bayes":
        t = batch.bayes
    else:
        raise ValueError(f"unknown target {target!r}")
    return float(np.mean((t - predict_batch(batch, model)) ** 2))


def empirical_loss_prompts(model, prompts, target: str = "label") -> float:
    """Same as :func:`empirical_loss`, for a plain list of prompts."""
    if not prompts:
        raise ValueError("empty prompt list")
    return empirical_loss(model, PromptBatch.from_prompts(prompts), target)
