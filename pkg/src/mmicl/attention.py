"""Forward passes: single-layer LSA, the T-layer cross-attention stack and
its ablations, and the frozen readout that turns an embedding into a
prediction.

Two evaluation routes exist on purpose. ``predict`` builds the embedding
explicitly, layer by layer, and reads the prediction off the full LSA output.
``predict_batch`` uses the fact that every linear stack here produces
``F = P(Lambda_hat) X`` for a matrix polynomial ``P`` and works with the
eigendecomposition of each ``Lambda_hat`` only. The test suite checks the two
against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import Prompt, PromptBatch

CA_VARIANTS = (
    "lca_one_param",
    "lca_two_param",
    "lca_no_skip",
    "deep_lsa_no_skip",
    "deep_lsa_with_skip",
)
LCA_VARIANTS = CA_VARIANTS[:3]

# above this depth the LCA embedding is built from the closed form
CLOSED_FORM_MIN_T = 32
LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


@dataclass
class LsaParams:
    W_pv: np.ndarray
    W_kq: np.ndarray

    def __post_init__(self):
        self.W_pv = np.asarray(self.W_pv, dtype=float)
        self.W_kq = np.asarray(self.W_kq, dtype=float)
        if self.W_pv.shape != self.W_kq.shape or self.W_pv.ndim != 2 or self.W_pv.shape[0] != self.W_pv.shape[1]:
            raise ShapeError(f"LSA weights must be matching square matrices, got {self.W_pv.shape} and {self.W_kq.shape}")

    @property
    def d(self) -> int:
        return self.W_pv.shape[0] - 1

    @classmethod
    def zeros(cls, d: int) -> "LsaParams":
        return cls(np.zeros((d + 1, d + 1)), np.zeros((d + 1, d + 1)))


def frozen_readout(d: int) -> LsaParams:
    """Readout weights under which the LSA output equals ``y^T F^T x_q / L``."""
    W_pv = np.zeros((d + 1, d + 1))
    W_pv[d, d] = 1.0
    W_kq = np.zeros((d + 1, d + 1))
    W_kq[:d, :d] = np.eye(d)
    return LsaParams(W_pv, W_kq)


@dataclass(frozen=True)
class CaParams:
    """Tied-weight cross-attention stack.

    ``alpha`` scales the raw-data skip ``S_t = alpha X``; ``beta`` scales the
    value matrix. ``lca_one_param`` ties ``beta = -alpha`` and ignores the
    stored ``beta``. The no-skip variants have a single parameter ``alpha``
    which scales the value matrix.
    """

    variant: str
    alpha: float
    beta: float = 0.0
    T: int = 10
    normalize: bool = False
    softmax: bool = False

    def __post_init__(self):
        if self.variant not in CA_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.T < 1:
            raise ValueError("depth T must be >= 1")

    @property
    def skip(self) -> float:
        """Coefficient of the raw-data skip connection."""
        if self.variant in ("lca_no_skip", "deep_lsa_no_skip"):
            return 0.0
        return self.alpha

    @property
    def value(self) -> float:
        """Coefficient of the value matrix inside each attention head."""
        if self.variant == "lca_one_param":
            return -self.alpha
        if self.variant in ("lca_no_skip", "deep_lsa_no_skip"):
            return self.alpha
        return self.beta

    @property
    def linear(self) -> bool:
        return not (self.normalize or self.softmax)


@dataclass(frozen=True)
class SampleMean:
    """Baseline that predicts the average context label."""


@dataclass
class Embedding:
    F: np.ndarray
    cross: Optional[np.ndarray] = field(default=None)  # X F^T / L when known

    def assemble(self, y, x_q) -> np.ndarray:
        return assemble_embedding(self.F, y, x_q)


def assemble_embedding(F, y, x_q) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    d, L = F.shape
    y = np.asarray(y, dtype=float)
    x_q = np.asarray(x_q, dtype=float)
    if y.shape != (L,) or x_q.shape != (d,):
        raise ShapeError("labels / query do not match the embedding")
    E = np.zeros((d + 1, L + 1))
    E[:d, :L] = F
    E[:d, L] = x_q
    E[d, :L] = y
    return E


def lsa_forward(E, p: LsaParams) -> float:
    E = np.asarray(E, dtype=float)
    if E.ndim != 2 or E.shape[0] != p.W_pv.shape[0]:
        raise ShapeError(f"embedding of shape {E.shape} does not fit weights of size {p.W_pv.shape[0]}")
    L = E.shape[1] - 1
    # only the bottom-right entry is read, and E[d, L] == 0 kills the residual
    row = p.W_pv[-1] @ E
    col = E.T @ (p.W_kq @ E[:, -1])
    return float(E[-1, -1] + row @ col / L)


def lsa_output(E, p: LsaParams) -> np.ndarray:
    """Full ``(d+1) x (L+1)`` LSA output; used by tests as a dense oracle."""
    E = np.asarray(E, dtype=float)
    L = E.shape[1] - 1
    return E + p.W_pv @ E @ (E.T @ p.W_kq @ E) / L


def power_and_geometric_sum(M, T: int):
    """Return ``(M^T, sum_{k<T} M^k)`` by repeated squaring.

    Works on a single matrix or a stack of shape ``(..., d, d)``.
    """
    M = np.asarray(M, dtype=float)
    if T < 0:
        raise ValueError("T must be nonnegative")
    eye = np.broadcast_to(np.eye(M.shape[-1]), M.shape)
    P = eye.copy()  # M^n
    S = np.zeros_like(M)  # sum_{k<n} M^k
    for bit in bin(T)[2:] if T > 0 else "":
        S = S + P @ S
        P = P @ P
        if bit == "1":
            S = S + P
            P = P @ M
    return P, S


def _check_finite(X):
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("covariates contain non-finite values")


def _layernorm_cols(F):
    mu = F.mean(axis=-2, keepdims=True)
    sd = F.std(axis=-2, keepdims=True)
    return (F - mu) / np.sqrt(sd**2 + LAYERNORM_EPS)


def _softmax_keys(scores):
    s = scores - scores.max(axis=-2, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-2, keepdims=True)


def _head(X, Q, p: CaParams, L: int):
    """Attention output for one layer; X and Q are (..., d, L)."""
    if p.variant in LCA_VARIANTS:
        K = V = X
    else:
        K = V = Q
    if p.softmax:
        scores = _softmax_keys(np.swapaxes(K, -1, -2) @ Q / L)
        return p.value * (V @ scores)
    return p.value * (V @ (np.swapaxes(K, -1, -2) @ Q)) / L


def _recurrence(X, p: CaParams):
    L = X.shape[-1]
    F = np.zeros_like(X)
    for _ in range(p.T):
        Q = _layernorm_cols(F) if p.normalize else F
        F = F + p.skip * X + _head(X, Q, p, L)
    return F


def lca_embed(X, p: CaParams) -> Embedding:
    """Run the stack layer by layer from ``F_0 = 0``."""
    X = np.asarray(X, dtype=float)
    _check_finite(X)
    return Embedding(F=_recurrence(X, p))


def lca_embed_closed_form(X, p: CaParams) -> Embedding:
    """``F = alpha * sum_{k<T} M^k X`` with ``M = I + beta Lambda_hat``."""
    if p.variant not in ("lca_one_param", "lca_two_param") or not p.linear:
        raise ValueError("closed form covers the linear skip-connected LCA variants only")
    X = np.asarray(X, dtype=float)
    _check_finite(X)
    d, L = X.shape
    lam = X @ X.T / L
    beta = p.value
    M = np.eye(d) + beta * lam
    MT, S = power_and_geometric_sum(M, p.T)
    F = p.alpha * S @ X
    if beta != 0.0:
        cross = (p.alpha / beta) * (MT - np.eye(d))
    else:
        cross = p.alpha * p.T * lam
    return Embedding(F=F, cross=cross)


def embed(X, p: CaParams) -> Embedding:
    if p.variant in ("lca_one_param", "lca_two_param") and p.linear and p.T > CLOSED_FORM_MIN_T:
        return lca_embed_closed_form(X, p)
    return lca_embed(X, p)


def predict(prompt: Prompt, model) -> float:
    """Prediction from the prompt's observable part ``(X, y, x_q)`` only."""
    X, y, x_q = prompt.X, prompt.y, prompt.x_q
    if isinstance(model, SampleMean):
        return float(np.mean(y))
    if isinstance(model, LsaParams):
        if model.d != X.shape[0]:
            raise ShapeError("LSA weights do not match the covariate dimension")
        return lsa_forward(assemble_embedding(X, y, x_q), model)
    if isinstance(model, CaParams):
        F = embed(X, model).F
        return lsa_forward(assemble_embedding(F, y, x_q), frozen_readout(X.shape[0]))
    raise TypeError(f"unsupported model {model!r}")


def _stats(batch: PromptBatch):
    """``(Lambda_hat, X y / L)`` per prompt, cached on the batch."""
    cached = getattr(batch, "_stats_cache", None)
    if cached is not None:
        return cached
    L = batch.L
    lam = batch.X @ np.swapaxes(batch.X, 1, 2) / L
    s = (batch.X @ batch.y[:, :, None])[:, :, 0] / L
    batch._stats_cache = (lam, s)
    return lam, s


def _spectral(batch: PromptBatch):
    """Eigenvalues of each ``Lambda_hat`` and the products of the eigen-coordinates
    of ``X y / L`` and ``x_q``, cached on the batch."""
    cached = getattr(batch, "_spectral_cache", None)
    if cached is None:
        lam, s = _stats(batch)
        evals, evecs = np.linalg.eigh(lam)
        Vt = np.swapaxes(evecs, 1, 2)
        weights = (Vt @ s[:, :, None])[:, :, 0] * (Vt @ batch.x_q[:, :, None])[:, :, 0]
        cached = batch._spectral_cache = (evals, weights)
    return cached


def _geometric_sum(q, T: int):
    """Elementwise ``sum_{k<T} q^k`` by the same doubling as :func:`power_and_geometric_sum`."""
    P = np.ones_like(q)
    S = np.zeros_like(q)
    for bit in bin(T)[2:]:
        S = S + P * S
        P = P * P
        if bit == "1":
            S = S + P
            P = P * q
    return S


def operator_eigenvalues(evals, p: CaParams):
    """Eigenvalues of the polynomial ``P`` with ``F = P(Lambda_hat) X``.

    Every linear stack here keeps ``F_t`` a polynomial in ``Lambda_hat`` applied
    to ``X``, so it acts on each eigenvalue separately.
    """
    evals = np.asarray(evals, dtype=float)
    if p.variant in LCA_VARIANTS:
        if p.skip == 0.0:
            return np.zeros_like(evals)
        return p.skip * _geometric_sum(1.0 + p.value * evals, p.T)
    # deep LSA: P_t = P + skip I + c P Lambda_hat P P
    P = np.zeros_like(evals)
    for _ in range(p.T):
        P = P + p.skip + p.value * evals * P**3
    return P


def operator_eigenvalue_grads(evals, p: CaParams):
    """``P`` together with its derivatives in ``skip`` and ``value``.

    Forward-mode differentiation of the per-eigenvalue layer recurrence.
    """
    evals = np.asarray(evals, dtype=float)
    P = np.zeros_like(evals)
    dP_skip = np.zeros_like(evals)
    dP_value = np.zeros_like(evals)
    deep = p.variant not in LCA_VARIANTS
    for _ in range(p.T):
        if deep:
            # P <- P + skip + value lam P^3
            slope = 1.0 + 3.0 * p.value * evals * P**2
            dP_value = slope * dP_value + evals * P**3
            dP_skip = slope * dP_skip + 1.0
            P = P + p.skip + p.value * evals * P**3
        else:
            # P <- (1 + value lam) P + skip
            dP_value = (1.0 + p.value * evals) * dP_value + evals * P
            dP_skip = (1.0 + p.value * evals) * dP_skip + 1.0
            P = (1.0 + p.value * evals) * P + p.skip
    return P, dP_skip, dP_value


def predict_batch_grad(batch: PromptBatch, p: CaParams):
    """Predictions and their derivatives in ``(skip, value)``, linear stacks only."""
    if not p.linear:
        raise ValueError("derivatives are only available for the linear stacks")
    evals, weights = _spectral(batch)
    P, d_skip, d_value = operator_eigenvalue_grads(evals, p)
    return (
        np.sum(weights * P, axis=1),
        np.sum(weights * d_skip, axis=1),
        np.sum(weights * d_value, axis=1),
    )


def predict_batch(batch: PromptBatch, model) -> np.ndarray:
    if isinstance(model, SampleMean):
        return batch.y.mean(axis=1)
    if isinstance(model, LsaParams):
        return lsa_predict_batch(batch, model)
    if not isinstance(model, CaParams):
        raise TypeError(f"unsupported model {model!r}")
    if not model.linear:
        _check_finite(batch.X)
        F = _recurrence(batch.X, model)
        return np.einsum("nl,ndl,nd->n", batch.y, F, batch.x_q) / batch.L
    # y^T F^T x_q / L = s^T P(Lambda_hat) x_q with s = X y / L
    evals, weights = _spectral(batch)
    return np.sum(weights * operator_eigenvalues(evals, model), axis=1)


def lsa_moments(batch: PromptBatch) -> np.ndarray:
    """Per-prompt ``E E^T / L`` including the query column, shape (n, d+1, d+1)."""
    n, d, L = batch.X.shape
    lam, s = _stats(batch)
    C = np.empty((n, d + 1, d + 1))
    C[:, :d, :d] = lam + np.einsum("ni,nj->nij", batch.x_q, batch.x_q) / L
    C[:, :d, d] = s
    C[:, d, :d] = s
    C[:, d, d] = np.einsum("nl,nl->n", batch.y, batch.y) / L
    return C


def lsa_predict_batch(batch: PromptBatch, p: LsaParams, moments=None) -> np.ndarray:
    C = lsa_moments(batch) if moments is None else moments
    r = p.W_pv[-1]
    k = np.einsum("ij,nj->ni", p.W_kq[:, :-1], batch.x_q)
    return np.einsum("i,nij,nj->n", r, C, k)
