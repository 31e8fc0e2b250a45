"""Experiment harness: error against test context length and against depth,
the skip-connection ablations, and loss landscapes.

Every experiment is a pure function of its config. Random streams are keyed
by ``(seed, purpose, index)`` so results do not depend on the number of worker
processes or on the order in which sweep points finish.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__, losses, optim
from .attention import CaParams, SampleMean, predict_batch
from .datagen import DataConfig, MDistribution, sample_batch

EXPERIMENTS = ("fig2", "fig3", "ablation_no_skip", "ablation_deep_lsa", "landscape")
FIG2_VARIANTS = ("single_lsa", "lca_one_param", "lca_two_param")
ABLATION_VARIANTS = {
    "ablation_no_skip": FIG2_VARIANTS + ("lca_no_skip", "deep_lsa_no_skip", "sample_mean"),
    "ablation_deep_lsa": FIG2_VARIANTS + ("deep_lsa_with_skip", "sample_mean"),
}
FIG3_VARIANTS = ("lca_one_param", "lca_two_param")
FIG3_L_TE = 64
WORKERS_ENV = "MMICL_WORKERS"

# random stream purposes
_TRAIN, _TEST, _SURFACE = 1, 2, 3

# Empirical losses are O(1), so descent may take much larger steps than the
# default; the Armijo search still shrinks them where needed.
TRAIN_OPTIM = dict(step_size=1.0, max_steps=3000, grad_tolerance=1e-7)


class ConfigError(ValueError):
    pass


class EmitError(OSError):
    pass


@dataclass(frozen=True)
class LandscapeGrid:
    alpha_range: tuple = (0.0, 1.0)
    beta_range: tuple = (-1.0, 0.0)
    resolution: int = 200

    def __post_init__(self):
        for r in (self.alpha_range, self.beta_range):
            if len(r) != 2 or not r[0] < r[1]:
                raise ConfigError(f"bad grid range {r}")
        if self.resolution < 2:
            raise ConfigError("grid resolution must be >= 2")

    def axes(self):
        return (
            np.linspace(*self.alpha_range, self.resolution),
            np.linspace(*self.beta_range, self.resolution),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "fig2"
    data: DataConfig = field(default_factory=DataConfig)
    L_tr: int = 100
    N: int = 2000
    T: int = 10
    L_te_grid: tuple = tuple(2**k for k in range(1, 11))
    T_grid: tuple = tuple(range(1, 21))
    n_test_prompts: int = 1000
    n_repeats: int = 10
    seed: int = 0
    target_metric: str = "bayes"
    grid: LandscapeGrid = field(default_factory=LandscapeGrid)
    quadrature_nodes: int = 256
    landscape_normalized: bool = False
    normalized_resolution: int = 21
    normalized_batch: int = 200

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        for name in ("L_tr", "N", "T", "n_test_prompts", "n_repeats", "normalized_resolution", "normalized_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.L_te_grid or not self.T_grid:
            raise ConfigError("sweep grids must be nonempty")
        if min(self.L_te_grid) < 1 or min(self.T_grid) < 1:
            raise ConfigError("sweep values must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if self.target_metric not in ("label", "bayes"):
            raise ConfigError(f"unknown target_metric {self.target_metric!r}")
        if self.quadrature_nodes < 16:
            raise ConfigError("quadrature_nodes must be >= 16")
        object.__setattr__(self, "L_te_grid", tuple(int(v) for v in self.L_te_grid))
        object.__setattr__(self, "T_grid", tuple(int(v) for v in self.T_grid))

    def to_dict(self) -> dict:
        md = self.data.m_dist
        out = {k.name: getattr(self, k.name) for k in dataclasses.fields(self) if k.name not in ("data", "grid")}
        out["L_te_grid"] = list(self.L_te_grid)
        out["T_grid"] = list(self.T_grid)
        out["data"] = {
            "d1": self.data.d1,
            "d2": self.data.d2,
            "zeta_dist": self.data.zeta_dist,
            "m_norm_law": md.norm_law,
            "m_norm_range": [md.a, md.b],
        }
        out["grid"] = {
            "alpha_range": list(self.grid.alpha_range),
            "beta_range": list(self.grid.beta_range),
            "resolution": self.grid.resolution,
        }
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "data" in raw:
                d = dict(raw["data"])
                extra = set(d) - {"d1", "d2", "zeta_dist", "m_norm_law", "m_norm_range"}
                if extra:
                    raise ConfigError(f"unknown data keys {sorted(extra)}")
                law = d.pop("m_norm_law", "uniform")
                a, b = d.pop("m_norm_range", [0.0, 2.0])
                md = MDistribution.point(a) if law == "point" else MDistribution(norm_law=law, a=float(a), b=float(b))
                raw["data"] = DataConfig(m_dist=md, **d)
            if "grid" in raw:
                g = dict(raw["grid"])
                for k in ("alpha_range", "beta_range"):
                    if k in g:
                        g[k] = tuple(float(v) for v in g[k])
                raw["grid"] = LandscapeGrid(**g)
            return cls(**raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    variant: str
    sweep: float
    mean: float
    std: float
    n: int
    seed: int
    flag: str = ""


ROW_FIELDS = [f.name for f in dataclasses.fields(ResultRow)]


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (r.variant, r.sweep))

    def select(self, variant: str) -> list:
        return [r for r in self.rows if r.variant == variant]

    def value(self, variant: str, sweep) -> ResultRow:
        for r in self.rows:
            if r.variant == variant and r.sweep == sweep:
                return r
        raise KeyError((variant, sweep))


@dataclass
class LossSurface:
    """Two-parameter loss on an ``(alpha, beta)`` grid; ``values[j, i]`` sits
    at ``(alphas[i], betas[j])``."""

    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray
    T: int
    quadrature_nodes: int
    seed: int
    profiled: np.ndarray  # columns beta, alpha*(beta), F_T(beta)
    normalized: Optional[dict] = None
    metadata: dict = field(default_factory=dict)

    @property
    def log_values(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log10(self.values)

    def grid_argmin(self):
        j, i = np.unravel_index(np.argmin(self.values), self.values.shape)
        return float(self.alphas[i]), float(self.betas[j])


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def _pmap(fn, items):
    items = list(items)
    workers = min(n_workers(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _rng(seed: int, purpose: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, index])


def train_variant(variant: str, batch, T: int, zm: losses.ZMoments):
    """Fit one model on a training batch; returns ``(model, flag)``."""
    cfg = optim.OptimConfig(**TRAIN_OPTIM)
    try:
        if variant == "sample_mean":
            return SampleMean(), ""
        if variant == "single_lsa":
            p, _ = optim.fit_single_lsa(batch, target="label")
            return p, ""
        if variant == "lca_two_param":
            init = optim.theorem_init(T, zm)
            tr = optim.train("empirical", variant, T, init, cfg, data=batch, profile_alpha=True)
        elif variant == "deep_lsa_with_skip":
            tr = optim.train("empirical", variant, T, [0.1, 0.0], cfg, data=batch)
        elif variant in optim.ONE_PARAM_MODELS:
            # the no-skip variants output zero for every alpha, so the start is immaterial
            tr = optim.train("empirical", variant, T, [0.0 if variant == "lca_one_param" else 0.1], cfg, data=batch)
        else:
            raise ValueError(f"unknown variant {variant!r}")
    except optim.TrainingDiverged as exc:
        return None, f"diverged: {exc}"
    flag = "" if tr.stop_reason in ("gradient", "precision") else tr.stop_reason
    return optim.make_model(variant, tr.final_params, T), flag


def _squared_errors(model, batch, target: str) -> np.ndarray:
    t = batch.y_q if target == "label" else batch.bayes
    with np.errstate(over="ignore", invalid="ignore"):
        return (t - predict_batch(batch, model)) ** 2


def _train_job(args):
    cfg_dict, variants, repeat, T = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    zm = losses.ZMoments(cfg.data.m_dist, losses.QuadratureSpec(cfg.quadrature_nodes))
    batch = sample_batch(cfg.data, cfg.N, cfg.L_tr, _rng(cfg.seed, _TRAIN, repeat))
    return {v: train_variant(v, batch, T, zm) for v in variants}


def _train_all(cfg: ExperimentConfig, variants, T: int):
    jobs = [(cfg.to_dict(), tuple(variants), r, T) for r in range(cfg.n_repeats)]
    return _pmap(_train_job, jobs)


def _evaluate(trained, variants, test_batch, target):
    """Per-variant ``(n_repeats, n_test)`` squared errors (NaN rows for failed fits) and flags."""
    errs, flags = {}, {}
    for v in variants:
        rows, fl = [], []
        for fits in trained:
            model, flag = fits[v]
            if flag:
                fl.append(flag.split(":")[0])
            if model is None:
                rows.append(np.full(len(test_batch), np.nan))
            else:
                rows.append(_squared_errors(model, test_batch, target))
        errs[v] = np.array(rows)
        flags[v] = ";".join(sorted(set(fl)))
    return errs, flags


def _over_prompts(experiment, v, sweep, e, cfg, flag) -> ResultRow:
    per_prompt = e.mean(axis=0)
    return ResultRow(experiment, v, sweep, float(np.mean(per_prompt)), float(np.std(per_prompt)), per_prompt.size, cfg.seed, flag)


def _over_repeats(experiment, v, sweep, e, cfg, flag) -> ResultRow:
    per_run = e.mean(axis=1)
    return ResultRow(experiment, v, sweep, float(np.mean(per_run)), float(np.std(per_run)), per_run.size, cfg.seed, flag)


def _metadata(cfg: ExperimentConfig) -> dict:
    return {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
    }


def _sweep_L(cfg: ExperimentConfig, variants, aggregate) -> ResultTable:
    trained = _train_all(cfg, variants, cfg.T)
    rows = []
    for L_te in cfg.L_te_grid:
        test = sample_batch(cfg.data, cfg.n_test_prompts, L_te, _rng(cfg.seed, _TEST, L_te))
        errs, flags = _evaluate(trained, variants, test, cfg.target_metric)
        rows += [aggregate(cfg.experiment, v, L_te, errs[v], cfg, flags[v]) for v in variants]
    return ResultTable(rows, _metadata(cfg))


def run_fig2(cfg: ExperimentConfig) -> ResultTable:
    """Error against test context length; error bars over test prompts."""
    if cfg.experiment != "fig2":
        raise ConfigError("run_fig2 needs experiment = fig2")
    return _sweep_L(cfg, FIG2_VARIANTS, _over_prompts)


def run_ablations(cfg: ExperimentConfig) -> ResultTable:
    """Fig2 sweep plus ablated variants; error bars over training repeats."""
    if cfg.experiment not in ABLATION_VARIANTS:
        raise ConfigError("run_ablations needs an ablation experiment")
    return _sweep_L(cfg, ABLATION_VARIANTS[cfg.experiment], _over_repeats)


def run_fig3(cfg: ExperimentConfig) -> ResultTable:
    """Error at ``L_te = 64`` against depth; error bars over test prompts."""
    if cfg.experiment != "fig3":
        raise ConfigError("run_fig3 needs experiment = fig3")
    test = sample_batch(cfg.data, cfg.n_test_prompts, FIG3_L_TE, _rng(cfg.seed, _TEST, FIG3_L_TE))
    rows = []
    for T in cfg.T_grid:
        trained = _train_all(cfg, FIG3_VARIANTS, T)
        errs, flags = _evaluate(trained, FIG3_VARIANTS, test, cfg.target_metric)
        rows += [_over_prompts("fig3", v, T, errs[v], cfg, flags[v]) for v in FIG3_VARIANTS]
    return ResultTable(rows, _metadata(cfg))


def run_landscape(cfg: ExperimentConfig) -> LossSurface:
    """Population two-parameter loss on the grid at depth ``cfg.T``, the
    profiled valley, and optionally the pre-normalised empirical surface."""
    if cfg.experiment != "landscape":
        raise ConfigError("run_landscape needs experiment = landscape")
    zm = losses.ZMoments(cfg.data.m_dist, losses.QuadratureSpec(cfg.quadrature_nodes))
    alphas, betas = cfg.grid.axes()
    values = np.empty((betas.size, alphas.size))
    with np.errstate(over="ignore", invalid="ignore"):
        for j, b in enumerate(betas):
            for i, a in enumerate(alphas):
                values[j, i] = losses.pop_loss_two_param(a, b, cfg.T, zm)
    prof = np.array([(b, losses.profiled_alpha(b, cfg.T, zm), losses.reduced_loss(b, cfg.T, zm)) for b in betas])
    normalized = None
    if cfg.landscape_normalized:
        batch = sample_batch(cfg.data, cfg.normalized_batch, cfg.L_tr, _rng(cfg.seed, _SURFACE, 0))
        na = np.linspace(*cfg.grid.alpha_range, cfg.normalized_resolution)
        nb = np.linspace(*cfg.grid.beta_range, cfg.normalized_resolution)
        nv = np.empty((nb.size, na.size))
        with np.errstate(over="ignore", invalid="ignore"):
            for j, b in enumerate(nb):
                for i, a in enumerate(na):
                    model = CaParams("lca_two_param", a, b, cfg.T, normalize=True)
                    nv[j, i] = losses.empirical_loss(model, batch, "label")
        normalized = {"alphas": na, "betas": nb, "values": nv, "batch_size": cfg.normalized_batch}
    return LossSurface(alphas, betas, values, cfg.T, cfg.quadrature_nodes, cfg.seed, prof, normalized, _metadata(cfg))


RUNNERS = {
    "fig2": run_fig2,
    "fig3": run_fig3,
    "ablation_no_skip": run_ablations,
    "ablation_deep_lsa": run_ablations,
    "landscape": run_landscape,
}


def run(cfg: ExperimentConfig):
    return RUNNERS[cfg.experiment](cfg)


def _num(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _json(obj) -> str:
    """JSON with every float written to 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _json(v) for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_json(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _json(obj.tolist())
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return json.dumps(obj if not isinstance(obj, np.bool_) else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        s = _num(obj)
        return s if s not in ("nan", "inf", "-inf") else json.dumps(s)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _surface_records(s: LossSurface):
    for j, b in enumerate(s.betas):
        for i, a in enumerate(s.alphas):
            yield ("surface", a, b, s.values[j, i])
    for b, a, v in s.profiled:
        yield ("profiled", a, b, v)
    if s.normalized is not None:
        nv = s.normalized["values"]
        for j, b in enumerate(s.normalized["betas"]):
            for i, a in enumerate(s.normalized["alphas"]):
                yield ("normalized", a, b, nv[j, i])


SURFACE_FIELDS = ["kind", "alpha", "beta", "loss", "log10_loss"]


def _log10(v) -> float:
    return math.log10(v) if v > 0 else -math.inf


def render(obj, fmt: str) -> str:
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    if isinstance(obj, ResultTable):
        if fmt == "csv":
            lines = [",".join(ROW_FIELDS)]
            for r in obj.rows:
                lines.append(
                    ",".join([r.experiment, r.variant, _num(r.sweep), _num(r.mean), _num(r.std), str(r.n), str(r.seed), r.flag.replace(",", ";")])
                )
            return "\n".join(lines) + "\n"
        rows = [dataclasses.asdict(r) for r in obj.rows]
        for r in rows:
            r["sweep"] = float(r["sweep"])
        return _json({"metadata": obj.metadata, "rows": rows}) + "\n"
    if isinstance(obj, LossSurface):
        recs = [(k, a, b, v, _log10(v)) for k, a, b, v in _surface_records(obj)]
        if fmt == "csv":
            lines = [",".join(SURFACE_FIELDS)]
            lines += [",".join([k] + [_num(x) for x in rest]) for k, *rest in recs]
            return "\n".join(lines) + "\n"
        meta = dict(obj.metadata, T=obj.T, quadrature_nodes=obj.quadrature_nodes, seed=obj.seed)
        return _json({"metadata": meta, "fields": SURFACE_FIELDS, "rows": [list(r) for r in recs]}) + "\n"
    raise TypeError(f"cannot emit {type(obj).__name__}")


def emit(obj, path, fmt: str = "csv") -> None:
    text = render(obj, fmt)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise EmitError(f"cannot write {path}: {exc}") from exc


def read_csv_table(path) -> list:
    """Parse an emitted result CSV back into :class:`ResultRow` objects."""
    import csv

    with open(path, encoding="utf-8", newline="") as fh:
        rdr = csv.DictReader(fh)
        return [
            ResultRow(r["experiment"], r["variant"], float(r["sweep"]), float(r["mean"]), float(r["std"]), int(r["n"]), int(r["seed"]), r["flag"])
            for r in rdr
        ]
