"""
Composite penalty loss and the gradient-descent training loop.

A :class:`LossSpec` is an ordered list of weighted terms. Objective terms are
loss-oriented (Sharpe enters negated); constraint terms are nonnegative
penalties. ``train`` minimises the weighted sum over pre-weights ``z`` that
are mapped to the simplex by sparsemax or softmax.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import finance, oracle, tape
from .data import ReturnsPanel
from .errors import ConfigError, EvaluationError, GdfolioError, TrainingError
from .projection import PROJECTIONS, project

log = logging.getLogger(__name__)

_REQUIRED = object()

OBJECTIVE_KINDS: dict[str, dict] = {
    "mean_variance": {"risk_aversion": 1.0},
    "sharpe": {"risk_free": 0.0},
    "cvar": {"alpha": 0.05},
    "volatility": {},
}
CONSTRAINT_KINDS: dict[str, dict] = {
    "te": {"te_max": _REQUIRED},
    "ucits10": {"cap": finance.UCITS_SINGLE_CAP},
    "ucits540": {"lower": finance.UCITS_AGGREGATE_LOWER, "upper": finance.UCITS_AGGREGATE_UPPER},
    "min_weight": {"m": _REQUIRED},
    "count_range": {"low": _REQUIRED, "high": _REQUIRED},
    "group_mask": {"matrix": _REQUIRED, "max_weights": _REQUIRED},
}

# compliance tolerances for the final weights
CAP_TOL = 1e-6
AGGREGATE_TOL = 1e-3
TE_TOL = 1e-5
MIN_WEIGHT_TOL = 1e-6
GROUP_TOL = 1e-3

WEIGHT_SUM_TOL = 1e-9


@dataclass
class Term:
    kind: str
    weight: float = 1.0
    params: dict = field(default_factory=dict)
    name: str | None = None

    def __post_init__(self):
        defaults = OBJECTIVE_KINDS.get(self.kind, CONSTRAINT_KINDS.get(self.kind))
        if defaults is None:
            raise ConfigError(f"unknown term kind {self.kind!r}")
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"term {self.label!r}: unknown parameters {sorted(unknown)}")
        merged = {}
        for key, default in defaults.items():
            if key in self.params:
                merged[key] = self.params[key]
            elif default is _REQUIRED:
                raise ConfigError(f"term {self.label!r}: missing parameter {key!r}")
            else:
                merged[key] = default
        self.params = merged
        self.weight = float(self.weight)
        if not self.weight >= 0 or not math.isfinite(self.weight):
            raise ConfigError(f"term {self.label!r}: multiplier must be finite and >= 0")
        self._validate()

    def _validate(self):
        p = self.params
        try:
            if self.kind == "cvar" and not 0 < p["alpha"] < 1:
                raise ConfigError("alpha must lie in (0, 1)")
            if self.kind == "te" and p["te_max"] < 0:
                raise ConfigError("te_max must be >= 0")
            if self.kind == "min_weight" and not 0 < p["m"] < 1:
                raise ConfigError("m must lie in (0, 1)")
            if self.kind == "count_range" and not 0 < p["low"] <= p["high"]:
                raise ConfigError("need 0 < low <= high")
            if self.kind == "group_mask":
                groups = finance.GroupMaskSet(p["matrix"], p["max_weights"])
                p["matrix"], p["max_weights"] = groups.matrix, groups.max_weights
        except ConfigError as exc:
            raise ConfigError(f"term {self.label!r}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"term {self.label!r}: {exc}") from None

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def is_objective(self) -> bool:
        return self.kind in OBJECTIVE_KINDS


@dataclass
class LossSpec:
    terms: list[Term]

    def __post_init__(self):
        self.terms = [t if isinstance(t, Term) else Term(**t) for t in self.terms]
        if not any(t.is_objective for t in self.terms):
            raise ConfigError("loss needs at least one objective term")
        labels = [t.label for t in self.terms]
        dup = {x for x in labels if labels.count(x) > 1}
        if dup:
            raise ConfigError(f"duplicate term labels {sorted(dup)}; set distinct names")

    @property
    def objectives(self) -> list[Term]:
        return [t for t in self.terms if t.is_objective]

    @property
    def constraints(self) -> list[Term]:
        return [t for t in self.terms if not t.is_objective]

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]

    def term(self, label: str) -> Term:
        for t in self.terms:
            if t.label == label:
                return t
        raise ConfigError(f"no term labelled {label!r}")

    def with_weights(self, weights: Mapping[str, float]) -> "LossSpec":
        for label in weights:
            self.term(label)
        return LossSpec([replace(t, weight=weights.get(t.label, t.weight), params=dict(t.params))
                         for t in self.terms])

    def oracle_terms(self):
        """``(kind, weight, params)`` triples for :func:`oracle.batch_loss`."""
        return [(t.kind, t.weight, t.params) for t in self.terms]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 500
    optimizer: str = "adam"
    projection: str = "sparsemax"
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError("epochs must be an integer >= 1")
        self.epochs = int(self.epochs)
        if self.optimizer not in ("adam", "gd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected 'adam' or 'gd'")
        if self.projection not in PROJECTIONS:
            raise ConfigError(f"unknown projection {self.projection!r}")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be >= 0")


# ---------------------------------------------------------------------------
# loss graph

@dataclass
class ComposedLoss:
    total: tape.Node
    terms: dict[str, tape.Node]      # weighted, loss-oriented
    raw: dict[str, tape.Node]        # unweighted, loss-oriented
    z: tape.Node
    weights: tape.Node
    returns: tape.Node


def _raw_term(term: Term, w, R, panel: ReturnsPanel):
    p = term.params
    if term.kind == "mean_variance":
        return finance.mean_variance_objective(R, p["risk_aversion"])
    if term.kind == "sharpe":
        return -finance.sharpe_ratio(R, p["risk_free"])
    if term.kind == "cvar":
        return finance.cvar(R, p["alpha"])
    if term.kind == "volatility":
        return finance.volatility(R)
    if term.kind == "te":
        if panel.benchmark is None:
            raise ConfigError("tracking-error term needs a benchmark column")
        return finance.constraint_te(R, tape.constant(panel.benchmark, "benchmark"), p["te_max"])
    if term.kind == "ucits10":
        return finance.constraint_ucits_10(w, p["cap"])
    if term.kind == "ucits540":
        return finance.constraint_ucits_5_40(w, p["lower"], p["upper"])
    if term.kind == "min_weight":
        return finance.constraint_min_weight(w, p["m"])
    if term.kind == "count_range":
        return finance.constraint_count_range(w, p["low"], p["high"])
    if term.kind == "group_mask":
        groups = finance.GroupMaskSet(p["matrix"], p["max_weights"])
        if groups.n_assets != panel.n_assets:
            raise ConfigError(f"group mask has {groups.n_assets} rows, panel has {panel.n_assets} assets")
        return finance.constraint_group_mask(w, groups)
    raise ConfigError(f"unknown term kind {term.kind!r}")


def compose_loss(spec: LossSpec, panel: ReturnsPanel, z=None,
                 projection: str = "sparsemax") -> ComposedLoss:
    """Build the graph of ``sum_k weight_k * term_k`` over pre-weights ``z``.

    ``z`` may be an input node, an array (bound immediately) or None.
    """
    if isinstance(z, tape.Node):
        z_node = z
    else:
        z_node = tape.input("z")
        if z is not None:
            z = np.asarray(z, dtype=float)
            if z.shape != (panel.n_assets,):
                raise ConfigError(f"{z.size} pre-weights for {panel.n_assets} assets")
            z_node.value = z
    w = project(z_node, projection)
    R = finance.portfolio_returns(w, panel.returns)
    raw, weighted = {}, {}
    total = None
    for term in spec.terms:
        node = _raw_term(term, w, R, panel)
        raw[term.label] = node
        weighted[term.label] = term.weight * node
        total = weighted[term.label] if total is None else total + weighted[term.label]
    return ComposedLoss(total, weighted, raw, z_node, w, R)


# ---------------------------------------------------------------------------
# optimisers

class GradientDescent:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate)
    return GradientDescent(cfg.learning_rate)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainTrace:
    assets: list[str]
    losses: np.ndarray                 # total loss at the start of each epoch
    terms: dict[str, np.ndarray]       # weighted term values per epoch
    weights: np.ndarray                # final weights (after the last update)
    pre_weights: np.ndarray
    final_loss: float
    final_terms: dict[str, float]
    objective: float                   # weighted objective terms at the final weights
    metrics: dict[str, float]
    non_monotonic: bool

    @property
    def epochs(self) -> int:
        return len(self.losses)


def initial_pre_weights(n: int, cfg: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(-0.01, 0.01, size=n) * cfg.init_scale


def _check_weights(w, epoch):
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise TrainingError(f"projection left the simplex at epoch {epoch}", epoch)


def train(spec: LossSpec, panel: ReturnsPanel, cfg: TrainConfig,
          z0: np.ndarray | None = None) -> TrainTrace:
    """Minimise the composite loss by (projected) gradient descent on ``z``."""
    if panel.n_periods < 2 or panel.n_assets < 2:
        raise ConfigError("training needs at least 2 periods and 2 assets")
    loss = compose_loss(spec, panel, projection=cfg.projection)
    z = initial_pre_weights(panel.n_assets, cfg) if z0 is None else np.array(z0, dtype=float)
    opt = make_optimizer(cfg)
    labels = spec.labels
    losses = np.empty(cfg.epochs)
    terms = {label: np.empty(cfg.epochs) for label in labels}

    def breakdown():
        return {lab: float(loss.terms[lab].value) for lab in labels
                if loss.terms[lab].value is not None}

    for epoch in range(cfg.epochs):
        try:
            tape.forward(loss.total, {loss.z: z})
        except EvaluationError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}; last terms {breakdown()}",
                                epoch, breakdown()) from exc
        _check_weights(loss.weights.value, epoch)
        losses[epoch] = float(loss.total.value)
        for label in labels:
            terms[label][epoch] = float(loss.terms[label].value)
        grad = tape.backward(loss.total)[loss.z]
        z = opt.step(z, grad)
        if not np.all(np.isfinite(z)):
            raise TrainingError(f"epoch {epoch}: non-finite pre-weights", epoch, breakdown())

    try:
        tape.forward(loss.total, {loss.z: z})
    except EvaluationError as exc:
        raise TrainingError(f"final evaluation: {exc}", cfg.epochs, breakdown()) from exc
    weights = loss.weights.value.copy()
    _check_weights(weights, cfg.epochs)
    final_terms = {label: float(loss.terms[label].value) for label in labels}
    final_loss = float(loss.total.value)
    objective = sum(final_terms[t.label] for t in spec.objectives)
    non_monotonic = final_loss > losses[0]
    if non_monotonic:
        log.warning("final loss %.6g exceeds initial loss %.6g", final_loss, losses[0])
    return TrainTrace(
        assets=list(panel.assets),
        losses=losses,
        terms=terms,
        weights=weights,
        pre_weights=z,
        final_loss=final_loss,
        final_terms=final_terms,
        objective=objective,
        metrics=portfolio_metrics(weights, panel, **metric_params(spec)),
        non_monotonic=bool(non_monotonic),
    )


def metric_params(spec: LossSpec) -> dict:
    alpha = next((t.params["alpha"] for t in spec.terms if t.kind == "cvar"), 0.05)
    rf = next((t.params["risk_free"] for t in spec.terms if t.kind == "sharpe"), 0.0)
    return {"alpha": alpha, "risk_free": rf}


def portfolio_metrics(weights, panel: ReturnsPanel, alpha: float = 0.05,
                      risk_free: float = 0.0) -> dict[str, float]:
    """Sharpe, tracking error, VaR, CVaR and volatility of a fixed portfolio."""
    R = finance.portfolio_returns(np.asarray(weights, dtype=float), panel.returns)
    try:
        sharpe = finance.sharpe_ratio(R, risk_free)
    except EvaluationError:
        sharpe = float("nan")
    te = float("nan") if panel.benchmark is None else finance.tracking_error(R, panel.benchmark)
    return {
        "mean_return": float(np.mean(R)),
        "sharpe": sharpe,
        "tracking_error": te,
        "var": finance.value_at_risk(R, alpha),
        "cvar": finance.cvar(R, alpha),
        "volatility": finance.volatility(R),
    }


@dataclass
class ComplianceRow:
    label: str
    kind: str
    residual: float      # the unweighted penalty at the final weights
    satisfied: bool
    measure: float       # the quantity the tolerance is checked against


def compliance(spec: LossSpec, weights, panel: ReturnsPanel) -> list[ComplianceRow]:
    """Check every constraint term of ``spec`` at fixed weights."""
    w = np.asarray(weights, dtype=float)
    R = finance.portfolio_returns(w, panel.returns)
    rows = []
    for term in spec.constraints:
        p = term.params
        residual = float(tape.evaluate(_raw_term(term, tape.constant(w), tape.constant(R), panel)))
        if term.kind == "ucits10":
            measure = float(w.max())
            ok = measure <= p["cap"] + CAP_TOL
        elif term.kind == "ucits540":
            measure = finance.ucits_masked_sum(w, p["lower"])
            ok = measure <= p["upper"] + AGGREGATE_TOL
        elif term.kind == "te":
            measure = finance.tracking_error(R, panel.benchmark)
            ok = measure <= p["te_max"] + TE_TOL
        elif term.kind == "min_weight":
            active = w[w > 0]
            measure = float(active.min()) if active.size else float("nan")
            ok = bool(np.all(active >= p["m"] - MIN_WEIGHT_TOL))
        elif term.kind == "count_range":
            measure = float(np.count_nonzero(w > 0))
            ok = p["low"] <= measure <= p["high"]
        elif term.kind == "group_mask":
            dev = np.abs(p["max_weights"] - finance.group_weights(w, p["matrix"]))
            measure = float(dev.max())
            ok = measure <= GROUP_TOL
        else:  # pragma: no cover - guarded by Term validation
            raise ConfigError(f"unknown constraint {term.kind!r}")
        rows.append(ComplianceRow(term.label, term.kind, residual, bool(ok), float(measure)))
    return rows


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class GridRow:
    lambdas: dict[str, float]
    objective: float
    residuals: dict[str, float]
    feasible: bool
    error: str | None = None
    weights: np.ndarray | None = None
    metrics: dict[str, float] | None = None


def _grid_cell(args) -> GridRow:
    spec, lambdas, panel, cfg = args
    try:
        cell_spec = spec.with_weights(lambdas)
        trace = train(cell_spec, panel, cfg)
        checks = compliance(cell_spec, trace.weights, panel)
    except GdfolioError as exc:
        return GridRow(dict(lambdas), float("nan"), {}, False, f"{type(exc).__name__}: {exc}")
    return GridRow(
        lambdas=dict(lambdas),
        objective=trace.objective,
        residuals={c.label: c.residual for c in checks},
        feasible=all(c.satisfied for c in checks),
        weights=trace.weights,
        metrics=trace.metrics,
    )


def _dispatch(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def grid_search(spec: LossSpec, grid: Mapping[str, Sequence[float]], panel: ReturnsPanel,
                cfg: TrainConfig, workers: int = 1) -> list[GridRow]:
    """Train once per multiplier combination, in row-major order of ``grid``."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must name at least one term with at least one value")
    for label in grid:
        spec.term(label)
    labels = list(grid)
    jobs = [(spec, dict(zip(labels, combo)), panel, cfg)
            for combo in itertools.product(*(grid[k] for k in labels))]
    return _dispatch(_grid_cell, jobs, workers)


@dataclass
class ReplicationRow:
    replication: int
    assets: list[str]
    start: int
    length: int
    weight_mse: float
    objective_gd: float
    objective_oracle: float
    objective_gap: float
    weights_gd: np.ndarray
    weights_oracle: np.ndarray
    error: str | None = None


@dataclass
class ReplicationResult:
    rows: list[ReplicationRow]

    def _ok(self):
        return [r for r in self.rows if r.error is None]

    @property
    def weight_mse(self) -> float:
        return float(np.mean([r.weight_mse for r in self._ok()]))

    @property
    def objective_mse(self) -> float:
        return float(np.mean([r.objective_gap ** 2 for r in self._ok()]))

    @property
    def mean_gap(self) -> float:
        return float(np.mean([r.objective_gap for r in self._ok()]))


def _replicate_one(args) -> ReplicationRow:
    k, panel, cols, start, length, spec, cfg, step = args
    sub = panel.subset(cols, start, start + length)
    loss_fn = oracle.batch_loss(spec.oracle_terms(), sub.returns, sub.benchmark)
    try:
        trace = train(spec, sub, cfg)
        best_w, best_v = oracle.simplex_grid_search(loss_fn, sub.n_assets, step)
    except GdfolioError as exc:
        nan = float("nan")
        return ReplicationRow(k, sub.assets, start, length, nan, nan, nan, nan,
                              np.full(sub.n_assets, nan), np.full(sub.n_assets, nan),
                              f"{type(exc).__name__}: {exc}")
    gd_v = float(loss_fn(trace.weights[None, :])[0])
    return ReplicationRow(
        replication=k,
        assets=sub.assets,
        start=start,
        length=length,
        weight_mse=float(np.mean((trace.weights - best_w) ** 2)),
        objective_gd=gd_v,
        objective_oracle=float(best_v),
        objective_gap=gd_v - float(best_v),
        weights_gd=trace.weights,
        weights_oracle=best_w,
    )


def replication_study(universe: ReturnsPanel, k: int, min_assets: int, spec: LossSpec,
                      cfg: TrainConfig, max_assets: int | None = None,
                      min_periods: int | None = None, step: float = 0.01,
                      seed: int = 0, workers: int = 1) -> ReplicationResult:
    """Compare gradient descent with the simplex-grid oracle on random sub-problems.

    Each replication draws an asset subset (``min_assets``..``max_assets``
    names) and a contiguous time window (at least ``min_periods`` long), then
    records the weight MSE and the loss gap ``gd - oracle`` (both losses are
    evaluated by the oracle's own numpy code).
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    max_assets = min_assets if max_assets is None else max_assets
    if not 2 <= min_assets <= max_assets <= universe.n_assets:
        raise ConfigError(
            f"cannot sample {min_assets}..{max_assets} assets from {universe.n_assets}")
    T = universe.n_periods
    min_periods = max(2, T // 2) if min_periods is None else min_periods
    if not 2 <= min_periods <= T:
        raise ConfigError(f"min_periods must lie in [2, {T}]")
    rng = np.random.default_rng(seed)
    jobs = []
    for rep in range(k):
        d = int(rng.integers(min_assets, max_assets + 1))
        cols = np.sort(rng.choice(universe.n_assets, size=d, replace=False))
        length = int(rng.integers(min_periods, T + 1))
        start = int(rng.integers(0, T - length + 1))
        jobs.append((rep, universe, cols, start, length, spec, cfg, step))
    return ReplicationResult(_dispatch(_replicate_one, jobs, workers))
