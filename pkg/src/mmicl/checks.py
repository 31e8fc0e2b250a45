"""Fast invariant suite run by ``mmicl check``."""

from __future__ import annotations

import numpy as np

from . import losses, optim, theory
from .attention import CaParams, assemble_embedding, frozen_readout, lca_embed, lca_embed_closed_form, lsa_forward
from .datagen import DataConfig, sample_prompts


def _closed_form(rng):
    worst = 0.0
    for _ in range(20):
        d, L = rng.integers(2, 7), rng.integers(2, 30)
        X = rng.standard_normal((d, L))
        p = CaParams("lca_two_param", rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), int(rng.integers(1, 13)))
        F1, F2 = lca_embed(X, p).F, lca_embed_closed_form(X, p).F
        worst = max(worst, np.linalg.norm(F1 - F2) / max(np.linalg.norm(F2), 1e-300))
    return worst < 1e-10, f"max relative error {worst:.2e}"


def _readout(rng):
    worst = 0.0
    for _ in range(20):
        d, L = rng.integers(1, 8), rng.integers(1, 30)
        F, y, xq = rng.standard_normal((d, L)), rng.standard_normal(L), rng.standard_normal(d)
        got = lsa_forward(assemble_embedding(F, y, xq), frozen_readout(d))
        want = y @ F.T @ xq / L
        worst = max(worst, abs(got - want) / (1 + abs(want)))
    return worst < 1e-12, f"max error {worst:.2e}"


def _one_two_param(rng):
    zm = losses.ZMoments()
    worst = 0.0
    for _ in range(10):
        a, T = rng.uniform(0, 0.6), int(rng.integers(1, 20))
        l1 = losses.pop_loss_one_param(a, T, zm)
        l2 = losses.pop_loss_two_param(a, -a, T, zm)
        worst = max(worst, abs(l1 - l2) / max(l1, 1e-300))
    return worst < 1e-12, f"max relative gap {worst:.2e}"


def _gradients(rng):
    zm = losses.ZMoments()
    worst = 0.0
    for _ in range(10):
        T = int(rng.integers(1, 11))
        p = np.array([rng.uniform(0.05, 0.4), rng.uniform(-0.35, -0.05)])
        for x in (p[:1], p):
            g = optim.grad_pop_loss(x, T, zm)
            fd = optim.grad_pop_loss(x, T, zm, "finite_difference")
            worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1e-12))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def _variance_form(rng):
    zm = losses.ZMoments()
    worst = 0.0
    for _ in range(10):
        b, T = rng.uniform(-0.39, -0.01), int(rng.integers(1, 8))
        v, ab = losses.reduced_loss(b, T, zm), losses.reduced_loss_AB(b, T, zm)
        worst = max(worst, abs(v - ab))
    return worst < 1e-10, f"max gap {worst:.2e}"


def _quadrature(rng):
    zm = losses.ZMoments()
    err = abs(zm.expect(np.ones_like(zm.Z)) - 1.0)
    return err < 1e-10, f"|E[1] - 1| = {err:.2e}"


def _depth_limit(rng):
    zm = losses.ZMoments()
    (_, a, gap), = theory.alpha_star_sequence([200], zm)
    return abs(gap) < 1e-2, f"alpha*_200 = {a:.6f}"


def _two_param_descent(rng):
    zm = losses.ZMoments()
    cfg = optim.OptimConfig(objective="log")
    tr = optim.train("population", "lca_two_param", 100, optim.theorem_init(100, zm), cfg, zm=zm, profile_alpha=True)
    a, b = tr.final_params
    ok = abs(a + b) < 0.02 and abs(a - 1 / 3) < 0.02 and tr.param_min[1] > -2 / zm.Z_upper and tr.param_max[1] < 0
    return ok, f"(alpha, beta) = ({a:.5f}, {b:.5f})"


def _determinism(rng):
    p1 = sample_prompts(DataConfig(), 3, 8, np.random.default_rng(7))
    p2 = sample_prompts(DataConfig(), 3, 8, np.random.default_rng(7))
    same = all(np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y) and a.y_q == b.y_q for a, b in zip(p1, p2))
    return same, "identical prompts from identical seeds" if same else "prompts differ"


CHECKS = [
    ("recurrence matches closed form", _closed_form),
    ("frozen readout identity", _readout),
    ("two-parameter loss at beta = -alpha", _one_two_param),
    ("analytic vs finite-difference gradients", _gradients),
    ("variance form of the profiled loss", _variance_form),
    ("quadrature weights", _quadrature),
    ("one-parameter depth limit", _depth_limit),
    ("two-parameter descent at depth 100", _two_param_descent),
    ("seeded determinism", _determinism),
]


def run_checks(seed: int = 0):
    """Yield ``(name, ok, detail)`` for every invariant."""
    for name, fn in CHECKS:
        try:
            ok, detail = fn(np.random.default_rng(seed))
        except Exception as exc:  # a crash is a failed invariant
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        yield name, bool(ok), detail
