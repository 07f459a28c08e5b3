"""Reconstruction/generalization scoring, R^2 accuracy, and estimators.

An estimator turns one dataset record into a plain vector-field callable;
the harness integrates that callable from the task's initial states with
the same solver settings used for the ground truth and scores the result
against the noise-free trajectories (or, optionally, the noisy
observations).  Failed or diverged integrations score -inf and stay in the
denominator of the aggregate accuracy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .datagen import DatasetRecord
from .errors import NumericFailure, SolverFailure
from .fields import MAX_DEGREE, PolynomialVectorField, enumerate_monomials
from .model import FieldOperator
from .solver import SolverConfig, TimeGrid, Trajectory, integrate

FAILED = float("-inf")
R2_THRESHOLD = 0.9
_SST_GUARD = 1e-12


def r2_score(truth: Trajectory, pred: Trajectory) -> float:
    """Coefficient of determination pooled over time points and dimensions.

    Means are taken per dimension; a diverged or non-finite prediction (or
    one truncated short of the grid) scores -inf.
    """
    if truth.states.shape[1] != pred.states.shape[1]:
        raise ValueError("trajectory dimensions differ")
    if not np.array_equal(truth.grid.times, pred.grid.times):
        raise ValueError("trajectories live on different grids")
    if pred.diverged or pred.states.shape[0] != truth.states.shape[0]:
        return FAILED
    if not np.all(np.isfinite(pred.states)):
        return FAILED
    x = truth.states
    sse = float(np.sum((x - pred.states) ** 2))
    sst = float(np.sum((x - x.mean(axis=0)) ** 2))
    return 1.0 - sse / max(sst, _SST_GUARD)


def r2_accuracy(scores: list[float]) -> float:
    """Fraction of scores strictly greater than 0.9; failures (-inf) count
    against the denominator."""
    if len(scores) == 0:
        raise ValueError("cannot aggregate an empty score list")
    hits = sum(1 for s in scores if s > R2_THRESHOLD)
    return hits / len(scores)


# ---------------------------------------------------------------------------
# Estimators


class OracleEstimator:
    """Scoring ceiling: returns the record's true field."""

    name = "oracle"

    def build(self, record: DatasetRecord):
        return record.field


class ZeroEstimator:
    """Scoring floor: the identically-zero field."""

    name = "zero"

    def build(self, record: DatasetRecord):
        dim = record.dim
        zero = np.zeros(dim)

        def f(x):
            return zero

        return f


class ModelEstimator:
    """The pretrained operator, conditioned on the record's observations."""

    name = "model"

    def __init__(self, model: FieldOperator, context_series: int = 0):
        self.model = model
        self.context_series = context_series  # 0 = use all

    def build(self, record: DatasetRecord):
        obs = record.observations
        if self.context_series:
            obs = obs.subset(min(self.context_series, len(obs)))
        _, f = self.model.context_function(obs)
        return f


class PolyfitEstimator:
    """Ridge least squares of finite-difference slopes on the monomial basis.

    Derivative targets (y_{l+1}-y_l)/(t_{l+1}-t_l) are attached to interval
    midpoints and regressed on the degree-<=3 basis, one ridge solve per
    dimension.
    """

    name = "polyfit"

    def __init__(self, ridge: float = 1e-6, max_degree: int = MAX_DEGREE):
        self.ridge = ridge
        self.max_degree = max_degree

    def build(self, record: DatasetRecord):
        obs = record.observations
        basis = enumerate_monomials(obs.dim, self.max_degree)
        mids, slopes = [], []
        for s in obs.series:
            dt = np.diff(s.times)[:, None]
            mids.append(0.5 * (s.values[1:] + s.values[:-1]))
            slopes.append(np.diff(s.values, axis=0) / dt)
        mids = np.concatenate(mids, axis=0)
        slopes = np.concatenate(slopes, axis=0)
        if mids.shape[0] < len(basis):
            raise ValueError("not enough observation pairs for the basis")
        exps = np.asarray(basis)  # (P, D)
        design = np.prod(mids[:, None, :] ** exps[None, :, :], axis=2)  # (N, P)
        gram = design.T @ design + self.ridge * np.eye(len(basis))
        coeffs = np.linalg.solve(gram, design.T @ slopes)  # (P, D)
        components = [
            [(float(coeffs[p, d]), tuple(basis[p])) for p in range(len(basis))]
            for d in range(obs.dim)
        ]
        return PolynomialVectorField(obs.dim, components)


class NearestSlopeEstimator:
    """Context-memorizing baseline: the finite-difference slope of the
    nearest observed interval midpoint.  Strong on reconstruction, weak off
    the observed trajectories."""

    name = "knn"

    def build(self, record: DatasetRecord):
        obs = record.observations
        mids, slopes = [], []
        for s in obs.series:
            dt = np.diff(s.times)[:, None]
            mids.append(0.5 * (s.values[1:] + s.values[:-1]))
            slopes.append(np.diff(s.values, axis=0) / dt)
        mids = np.concatenate(mids, axis=0)
        slopes = np.concatenate(slopes, axis=0)

        def f(x):
            d2 = np.sum((mids - x) ** 2, axis=1)
            return slopes[int(np.argmin(d2))]

        return f


def make_estimator(name: str, model: FieldOperator | None = None, context_series: int = 0):
    if name == "oracle":
        return OracleEstimator()
    if name == "zero":
        return ZeroEstimator()
    if name == "polyfit":
        return PolyfitEstimator()
    if name == "knn":
        return NearestSlopeEstimator()
    if name == "model":
        if model is None:
            raise ValueError("the model estimator needs a checkpoint")
        return ModelEstimator(model, context_series)
    raise ValueError(f"unknown estimator {name!r}")


# ---------------------------------------------------------------------------
# Tasks


def _score_trajectories(f_hat, targets: list[Trajectory], initial_states, solver_cfg) -> list[float]:
    scores = []
    for target, x0 in zip(targets, initial_states):
        try:
            pred = integrate(f_hat, x0, target.grid, solver_cfg)
            scores.append(r2_score(target, pred))
        except (SolverFailure, NumericFailure, FloatingPointError):
            scores.append(FAILED)
    return scores


def run_reconstruction(
    record: DatasetRecord,
    estimator,
    solver_cfg: SolverConfig | None = None,
    score_against: str = "clean",
) -> list[float]:
    """Integrate the estimated field from each context series' first
    observed state over its grid and score against the clean trajectory
    (or the noisy observations with score_against='observed')."""
    if score_against not in ("clean", "observed"):
        raise ValueError("score_against must be 'clean' or 'observed'")
    if not record.clean_trajectories:
        raise ValueError("record has no context trajectories")
    try:
        f_hat = estimator.build(record)
    except (ValueError, NumericFailure):
        return [FAILED] * len(record.clean_trajectories)
    if score_against == "clean":
        targets = record.clean_trajectories
    else:
        targets = [
            Trajectory(TimeGrid(s.times), s.values) for s in record.observations.series
        ]
    x0s = [s.values[0] for s in record.observations.series]
    return _score_trajectories(f_hat, targets, x0s, solver_cfg)


def run_generalization(
    record: DatasetRecord, estimator, solver_cfg: SolverConfig | None = None
) -> list[float]:
    """Integrate the estimated field from held-out initial states over the
    held-out grids and score against the held-out clean trajectories."""
    if not record.holdout_trajectories:
        raise ValueError("record has no held-out trajectories")
    try:
        f_hat = estimator.build(record)
    except (ValueError, NumericFailure):
        return [FAILED] * len(record.holdout_trajectories)
    x0s = [t.states[0] for t in record.holdout_trajectories]
    return _score_trajectories(f_hat, record.holdout_trajectories, x0s, solver_cfg)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    estimator: str
    systems: list[dict] = dc_field(default_factory=list)
    aggregate: dict = dc_field(default_factory=dict)

    def to_json(self) -> str:
        def encode(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None  # failures; the counts carry the information
            return x

        payload = {
            "estimator": self.estimator,
            "systems": [
                {**entry, "r2": [encode(v) for v in entry["r2"]]} for entry in self.systems
            ],
            "aggregate": self.aggregate,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def summary_lines(self) -> list[str]:
        agg = self.aggregate
        lines = [
            f"estimator: {self.estimator}",
            f"systems:   {agg['n_systems']}",
            "task             scores  failures  r2_accuracy",
        ]
        for task in ("reconstruction", "generalization"):
            if f"r2_accuracy_{task}" not in agg:
                continue
            lines.append(
                f"{task:<15} {agg[f'n_scores_{task}']:>7} "
                f"{agg[f'n_failures_{task}']:>9} "
                f"{agg[f'r2_accuracy_{task}']:>12.4f}"
            )
        return lines


def _eval_one(record: DatasetRecord, estimator, solver_cfg, score_against, tasks):
    entry = {"id": record.record_id, "dim": record.dim}
    out = {}
    if "reconstruction" in tasks:
        out["reconstruction"] = run_reconstruction(record, estimator, solver_cfg, score_against)
    if "generalization" in tasks and record.holdout_trajectories:
        out["generalization"] = run_generalization(record, estimator, solver_cfg)
    return entry, out


def evaluate_dataset(
    records: list[DatasetRecord],
    estimator,
    solver_cfg: SolverConfig | None = None,
    score_against: str = "clean",
    tasks: tuple[str, ...] = ("reconstruction", "generalization"),
    workers: int = 1,
) -> EvalReport:
    """Score every record on the requested tasks and aggregate R^2 accuracy.

    Systems are independent, so evaluation parallelizes over records; the
    report is assembled in record order either way.
    """
    if not records:
        raise ValueError("no records to evaluate")
    args = [(r, estimator, solver_cfg, score_against, tasks) for r in records]
    if workers > 1 and len(records) > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers) as pool:
            results = pool.starmap(_eval_one, args)
    else:
        results = [_eval_one(*a) for a in args]

    report = EvalReport(estimator=getattr(estimator, "name", "unknown"))
    pooled: dict[str, list[float]] = {t: [] for t in tasks}
    for (entry, out), record in zip(results, records):
        for task, scores in out.items():
            report.systems.append({**entry, "task": task, "r2": scores})
            pooled[task].extend(scores)
    agg: dict = {"n_systems": len(records)}
    for task, scores in pooled.items():
        if not scores:
            continue
        agg[f"r2_accuracy_{task}"] = r2_accuracy(scores)
        agg[f"n_scores_{task}"] = len(scores)
        agg[f"n_failures_{task}"] = sum(1 for s in scores if s == FAILED)
    report.aggregate = agg
    return report
