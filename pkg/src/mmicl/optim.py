"""Gradient-descent training of the one- and two-parameter stacks, fitting of
the single-layer LSA baseline, and golden-section search."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import losses
from .attention import CaParams, LsaParams, lsa_moments, predict_batch_grad
from .datagen import PromptBatch

log = logging.getLogger(__name__)

ARMIJO = 0.5
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
ONE_PARAM_MODELS = ("lca_one_param", "lca_no_skip", "deep_lsa_no_skip")
TWO_PARAM_MODELS = ("lca_two_param", "deep_lsa_with_skip")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_params):
        super().__init__(f"{msg}; last finite params {last_params}")
        self.last_params = last_params


class NotUnimodal(RuntimeError):
    pass


@dataclass
class OptimConfig:
    step_size: float = 1e-2
    max_steps: int = 100_000
    grad_tolerance: float = 1e-9
    gradient_mode: str = "analytic"  # or "finite_difference"
    fd_epsilon: float = 1e-6
    # "log" runs descent on log(loss): same gradient-flow paths, rescaled time
    objective: str = "loss"
    record_every: int = 10
    min_step: float = 1e-30

    def __post_init__(self):
        if self.step_size <= 0 or self.grad_tolerance <= 0 or self.fd_epsilon <= 0:
            raise ValueError("step size and tolerances must be positive")
        if self.gradient_mode not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.objective not in ("loss", "log"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    params: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    converged: bool = False
    final_params: Optional[np.ndarray] = None
    param_min: Optional[np.ndarray] = None  # running extremes over every step, not just recorded ones
    param_max: Optional[np.ndarray] = None
    n_steps: int = 0
    outside_theorem: bool = False
    lipschitz_estimate: float = 0.0
    stop_reason: str = "max_steps"  # or "gradient", "precision"

    def record(self, k, x, fx, gnorm):
        self.steps.append(k)
        self.params.append(np.array(x))
        self.losses.append(float(fx))
        self.grad_norms.append(float(gnorm))


def central_difference(f: Callable, x, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps
        g[j] = (f(x + e) - f(x - e)) / (2.0 * eps)
    return g


def gradient_descent(f: Callable, grad: Callable, x0, cfg: OptimConfig, expand: Optional[Callable] = None) -> Trajectory:
    """Gradient descent with a halving (Armijo) line search.

    Trial steps start at twice the last accepted step, capped at
    ``cfg.step_size``, and are halved until the objective decreases enough.

    ``expand`` maps the iterate to the reported parameters (used when some
    parameters are profiled out).
    """
    expand = expand or (lambda z: np.asarray(z, dtype=float))
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    fx = f(x)
    if not np.isfinite(fx):
        raise TrainingDiverged("non-finite objective at initialisation", expand(x))
    g = np.atleast_1d(grad(x))
    traj = Trajectory()
    p = expand(x)
    traj.param_min, traj.param_max = p.copy(), p.copy()
    traj.record(0, p, fx, np.linalg.norm(g))
    k = 0
    lip = 0.0
    warned = False
    s_prev = cfg.step_size
    while k < cfg.max_steps:
        gnorm = float(np.linalg.norm(g))
        if not np.isfinite(gnorm):
            raise TrainingDiverged("non-finite gradient", expand(x))
        if gnorm < cfg.grad_tolerance:
            traj.converged = True
            traj.stop_reason = "gradient"
            break
        s = min(cfg.step_size, 2.0 * s_prev)
        while True:
            x_new = x - s * g
            with np.errstate(over="ignore", invalid="ignore"):
                # overshooting trials may overflow; they are rejected below
                f_new = f(x_new)
            # Armijo sufficient decrease; in particular the loss never increases
            if np.isfinite(f_new) and f_new < fx and f_new <= fx - ARMIJO * s * gnorm**2:
                break
            s *= 0.5
            if s < cfg.min_step:
                break
        if s < cfg.min_step:
            # no descent step resolvable in floating point
            traj.stop_reason = "precision"
            log.info("line search exhausted at step %d, |grad| = %.3g", k, gnorm)
            break
        s_prev = s
        g_new = np.atleast_1d(grad(x_new))
        dx = np.linalg.norm(x_new - x)
        if dx > 0:
            lip = max(lip, float(np.linalg.norm(g_new - g) / dx))
            if not warned and cfg.step_size * lip >= 2.0:
                log.warning("step size %.3g exceeds the stability limit 2/L for observed L = %.3g", cfg.step_size, lip)
                warned = True
        x, fx, g = x_new, f_new, g_new
        k += 1
        p = expand(x)
        np.minimum(traj.param_min, p, out=traj.param_min)
        np.maximum(traj.param_max, p, out=traj.param_max)
        if k % cfg.record_every == 0:
            traj.record(k, p, fx, np.linalg.norm(g))
    if traj.steps[-1] != k:
        traj.record(k, expand(x), fx, np.linalg.norm(g))
    traj.n_steps = k
    traj.final_params = expand(x)
    traj.lipschitz_estimate = lip
    return traj


def _with_objective(f, grad, cfg: OptimConfig):
    if cfg.objective == "loss":
        return f, grad

    def logf(x):
        v = f(x)
        return math.log(v) if v > 0 else -math.inf

    def loggrad(x):
        return np.asarray(grad(x)) / f(x)

    return logf, loggrad


def grad_pop_loss(params, T: int, zm: losses.ZMoments, mode: str = "analytic", eps: float = 1e-6) -> np.ndarray:
    """Gradient of the one- (``len(params) == 1``) or two-parameter population loss."""
    params = np.atleast_1d(np.asarray(params, dtype=float))
    if params.size == 1:
        f = lambda x: losses.pop_loss_one_param(x[0], T, zm)
        analytic = lambda x: np.array([losses.grad_one_param(x[0], T, zm)])
    elif params.size == 2:
        f = lambda x: losses.pop_loss_two_param(x[0], x[1], T, zm)
        analytic = lambda x: losses.grad_two_param(x[0], x[1], T, zm)
    else:
        raise ValueError("population losses take 1 or 2 parameters")
    if mode == "analytic":
        return analytic(params)
    if mode == "finite_difference":
        return central_difference(f, params, eps)
    raise ValueError(f"unknown gradient mode {mode!r}")


def grad_empirical_loss(model_kind: str, params, T: int, data: PromptBatch, target: str = "label") -> np.ndarray:
    """Exact gradient of the empirical query loss of a linear tied-weight stack."""
    params = np.atleast_1d(np.asarray(params, dtype=float))
    t = data.y_q if target == "label" else data.bayes
    pred, d_skip, d_value = predict_batch_grad(data, make_model(model_kind, params, T))
    scale = -2.0 * (t - pred) / len(t)
    if model_kind == "lca_one_param":
        # skip = alpha, value = -alpha
        return np.array([scale @ (d_skip - d_value)])
    if model_kind in ("lca_no_skip", "deep_lsa_no_skip"):
        return np.array([scale @ d_value])
    return np.array([scale @ d_skip, scale @ d_value])


def theorem_init(T: int, zm: losses.ZMoments, beta0: Optional[float] = None) -> np.ndarray:
    """Two-parameter start ``(alpha*(beta0), beta0)`` with ``beta0`` in ``(-2/Z_upper, 0)``.

    The default ``beta0`` is the midpoint of that window.
    """
    if beta0 is None:
        beta0 = -1.0 / zm.Z_upper
    return np.array([losses.profiled_alpha(beta0, T, zm), beta0])


def in_theorem_window(init, T: int, zm: losses.ZMoments, rtol: float = 1e-8) -> bool:
    alpha0, beta0 = init
    if not -2.0 / zm.Z_upper < beta0 < 0.0:
        return False
    a_star = losses.profiled_alpha(beta0, T, zm)
    return abs(alpha0 - a_star) <= rtol * max(1.0, abs(a_star))


def n_params(model_kind: str) -> int:
    if model_kind in ONE_PARAM_MODELS:
        return 1
    if model_kind in TWO_PARAM_MODELS:
        return 2
    raise ValueError(f"model {model_kind!r} is not trained by train(); see fit_single_lsa")


def make_model(model_kind: str, params, T: int) -> CaParams:
    params = np.atleast_1d(params)
    beta = float(params[1]) if params.size > 1 else 0.0
    return CaParams(variant=model_kind, alpha=float(params[0]), beta=beta, T=T)


def _train_profiled(T, init, cfg: OptimConfig, zm) -> Trajectory:
    if cfg.objective == "log":
        f0 = lambda b: losses.reduced_loss(b[0], T, zm)
        f = lambda b: math.log(f0(b)) if f0(b) > 0 else -math.inf
        g_analytic = lambda b: np.array([losses.grad_log_reduced_loss(b[0], T, zm)])
    else:
        f = lambda b: losses.reduced_loss(b[0], T, zm)
        g_analytic = lambda b: np.array([losses.grad_reduced_loss(b[0], T, zm)])
    if cfg.gradient_mode == "finite_difference":
        grad = lambda b: central_difference(f, b, cfg.fd_epsilon)
    else:
        grad = g_analytic
    expand = lambda b: np.array([losses.profiled_alpha(b[0], T, zm), b[0]])
    init = np.asarray(init, dtype=float)
    # past the window edges (1 + beta Z)^T overflows; those trial steps are rejected
    with np.errstate(over="ignore", invalid="ignore"):
        traj = gradient_descent(f, grad, init[1:], cfg, expand=expand)
    traj.outside_theorem = not in_theorem_window(init, T, zm)
    return traj


def _train_profiled_empirical(T, init, cfg: OptimConfig, data: PromptBatch, target: str) -> Trajectory:
    t = data.y_q if target == "label" else data.bayes

    def unit(beta):
        # the LCA output is linear in alpha: prediction = alpha * p(beta)
        return predict_batch_grad(data, CaParams("lca_two_param", 1.0, float(beta), T))

    def best_alpha(p):
        pp = float(p @ p)
        return float(t @ p) / pp if pp > 0 else 0.0

    def f(b):
        p = unit(b[0])[0]
        return float(np.mean((t - best_alpha(p) * p) ** 2))

    def analytic(b):
        # alpha sits at its optimum, so only the explicit beta dependence counts
        p, _, dp = unit(b[0])
        a = best_alpha(p)
        return np.array([-2.0 * a * float((t - a * p) @ dp) / len(t)])

    if cfg.gradient_mode == "finite_difference":
        grad = lambda b: central_difference(f, b, cfg.fd_epsilon)
    else:
        grad = analytic
    expand = lambda b: np.array([best_alpha(unit(b[0])[0]), b[0]])
    init = np.asarray(init, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        return gradient_descent(f, grad, init[1:], cfg, expand=expand)


def train(
    loss_kind: str,
    model_kind: str,
    T: int,
    init,
    cfg: Optional[OptimConfig] = None,
    data: Optional[PromptBatch] = None,
    zm: Optional[losses.ZMoments] = None,
    target: str = "label",
    profile_alpha: bool = False,
) -> Trajectory:
    """Train a tied-weight stack by gradient descent.

    ``loss_kind="population"`` uses the closed-form loss (``zm`` required, only
    the LCA one/two-parameter models). ``"empirical"`` uses the query loss on
    ``data``; its gradient is exact unless ``cfg.gradient_mode`` asks for
    central finite differences.

    ``profile_alpha`` (``lca_two_param`` only) keeps ``alpha`` on its exact
    minimiser ``alpha*(beta)`` and descends in ``beta`` alone. Both losses are
    quadratic in ``alpha`` with curvature far above the curvature along the
    valley, so this is the fast-``alpha`` limit of the full flow started on the
    valley floor. It is what makes large depths tractable: at ``T = 100`` the
    valley is too stiff for plain descent in both parameters.
    """
    cfg = cfg or OptimConfig()
    k = n_params(model_kind)
    x0 = np.atleast_1d(np.asarray(init, dtype=float))
    if x0.size != k:
        raise ValueError(f"{model_kind} takes {k} parameter(s), got {x0.size}")
    expand = None

    if loss_kind == "population":
        if zm is None:
            raise ValueError("population training needs ZMoments")
        if model_kind == "lca_one_param":
            f = lambda x: losses.pop_loss_one_param(x[0], T, zm)
            grad = lambda x: grad_pop_loss(x, T, zm, cfg.gradient_mode, cfg.fd_epsilon)
        elif model_kind == "lca_two_param" and not profile_alpha:
            f = lambda x: losses.pop_loss_two_param(x[0], x[1], T, zm)
            grad = lambda x: grad_pop_loss(x, T, zm, cfg.gradient_mode, cfg.fd_epsilon)
        elif model_kind == "lca_two_param":
            return _train_profiled(T, init, cfg, zm)
        else:
            raise ValueError(f"no closed-form population loss for {model_kind!r}")
    elif loss_kind == "empirical":
        if data is None:
            raise ValueError("empirical training needs a prompt batch")
        if model_kind == "lca_two_param" and profile_alpha:
            return _train_profiled_empirical(T, x0, cfg, data, target)
        f = lambda x: losses.empirical_loss(make_model(model_kind, x, T), data, target)
        if cfg.gradient_mode == "finite_difference":
            grad = lambda x: central_difference(f, x, cfg.fd_epsilon)
        else:
            grad = lambda x: grad_empirical_loss(model_kind, x, T, data, target)
    else:
        raise ValueError(f"unknown loss_kind {loss_kind!r}")

    fo, go = _with_objective(f, grad, cfg)
    traj = gradient_descent(fo, go, x0, cfg, expand=expand)
    if loss_kind == "population" and model_kind == "lca_two_param":
        traj.outside_theorem = not in_theorem_window(np.asarray(init, dtype=float), T, zm)
        if traj.outside_theorem:
            log.info("initialisation %s is outside the convergence theorem's hypotheses", init)
    return traj


def minimize_1d(f: Callable, bracket, tol: float = 1e-10, n_check: int = 65, _retry: bool = True):
    """Golden-section search; returns ``(argmin, min)``.

    The bracket is sampled first; if the samples are not unimodal or the best
    sample sits on an end point the bracket is widened once.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise ValueError("bracket must satisfy lo < hi")
    xs = np.linspace(lo, hi, n_check)
    fs = np.array([f(x) for x in xs])
    i = int(np.argmin(fs))
    ok = _unimodal(fs) and 0 < i < n_check - 1
    if not ok:
        if not _retry:
            raise NotUnimodal(f"objective is not unimodal on [{lo}, {hi}]")
        w = hi - lo
        return minimize_1d(f, (lo - w, hi + w), tol, n_check, _retry=False)
    lo, hi = xs[i - 1], xs[i + 1]
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = f(x2)
    x = 0.5 * (lo + hi)
    return x, f(x)


def _unimodal(fs) -> bool:
    scale = np.max(np.abs(fs)) if np.all(np.isfinite(fs)) else np.inf
    if not np.isfinite(scale):
        return False
    diffs = np.diff(fs)
    tiny = 1e-13 * max(scale, 1e-300)
    signs = np.sign(np.where(np.abs(diffs) <= tiny, 0.0, diffs))
    signs = signs[signs != 0]
    # at most one change from decreasing to increasing
    return np.sum(np.diff(signs) != 0) <= 1 and (signs.size == 0 or not (signs[0] > 0 and np.any(signs < 0)))


def _lsa_fit_data(batch: PromptBatch, target: str):
    C = lsa_moments(batch)
    t = batch.y_q if target == "label" else batch.bayes
    return C, batch.x_q, t


def _lsa_params_from(r, P, d) -> LsaParams:
    W_pv = np.zeros((d + 1, d + 1))
    W_pv[d] = r
    W_kq = np.zeros((d + 1, d + 1))
    W_kq[:, :d] = P
    return LsaParams(W_pv, W_kq)


def fit_single_lsa(
    batch: PromptBatch,
    method: str = "als",
    target: str = "label",
    max_iter: int = 500,
    tol: float = 1e-12,
    cfg: Optional[OptimConfig] = None,
):
    """Fit the single-layer LSA baseline on the empirical query loss.

    Only the last row of ``W_pv`` and the first ``d`` columns of ``W_kq``
    reach the prediction; the rest stay zero. The prediction is bilinear in
    those two blocks, so ``method="als"`` alternates exact least-squares solves
    over each block (every sweep is non-increasing in the loss).
    ``method="gd"`` runs backtracking gradient descent instead.

    Returns ``(LsaParams, loss_history)``.
    """
    n, d, _ = batch.X.shape
    C, xq, t = _lsa_fit_data(batch, target)
    r = np.zeros(d + 1)
    r[d] = 1.0
    P = np.vstack([np.eye(d), np.zeros((1, d))])

    def predict(r, P):
        return np.einsum("i,nij,nj->n", r, C, xq @ P.T)

    def loss(r, P):
        return float(np.mean((t - predict(r, P)) ** 2))

    history = [loss(r, P)]
    if method == "als":
        for _ in range(max_iter):
            feats_r = np.einsum("nij,nj->ni", C, xq @ P.T)
            r = np.linalg.lstsq(feats_r, t, rcond=None)[0]
            a = np.einsum("nij,j->ni", C, r)
            feats_P = np.einsum("ni,nj->nij", a, xq).reshape(n, -1)
            P = np.linalg.lstsq(feats_P, t, rcond=None)[0].reshape(d + 1, d)
            # fix the scale ambiguity between the two blocks
            nr, nP = np.linalg.norm(r), np.linalg.norm(P)
            if nr > 0 and nP > 0:
                c = math.sqrt(nP / nr)
                r, P = r * c, P / c
            history.append(loss(r, P))
            if history[-2] - history[-1] <= tol * max(history[-2], 1e-300):
                break
        return _lsa_params_from(r, P, d), history
    if method == "gd":
        cfg = cfg or OptimConfig(step_size=1e-2, max_steps=20_000, grad_tolerance=1e-8)
        split = lambda x: (x[: d + 1], x[d + 1 :].reshape(d + 1, d))

        def f(x):
            return loss(*split(x))

        def grad(x):
            r_, P_ = split(x)
            k = xq @ P_.T
            resid = predict(r_, P_) - t
            g_r = 2.0 * np.einsum("n,nij,nj->i", resid, C, k) / n
            a = np.einsum("nij,j->ni", C, r_)
            g_P = 2.0 * np.einsum("n,ni,nj->ij", resid, a, xq) / n
            return np.concatenate([g_r, g_P.ravel()])

        traj = gradient_descent(f, grad, np.concatenate([r, P.ravel()]), cfg)
        r, P = split(traj.final_params)
        return _lsa_params_from(r, P, d), history + traj.losses[1:]
    raise ValueError(f"unknown method {method!r}")
