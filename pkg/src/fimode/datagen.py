"""Sampling, simulation, corruption and serialization of synthetic ODE data.

A dataset record couples one polynomial vector field with K noisy context
series (the conditioning data), the K clean trajectories they were read off,
and H held-out clean trajectories from fresh initial states.  Records are
written as JSON lines so files stay inspectable and diffable; serialization
is canonical (sorted keys, shortest round-trip floats), which makes
re-serialization byte-identical and seeded generation reproducible.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DatasetParseError, GenerationFailure, SolverFailure
from .fields import MAX_DEGREE, PolynomialVectorField, canonicalize, enumerate_monomials
from .solver import SolverConfig, TimeGrid, Trajectory, integrate


@dataclass
class GeneratorConfig:
    """Distribution over systems plus the observation protocol."""

    dim_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    max_terms_per_component: int = 4
    coeff_scale: float = 1.0
    grid_mode: str = "regular"  # "regular" | "irregular"
    obs_per_series: int = 200  # L
    series_per_system: int = 9  # K
    horizon: float = 9.95  # T
    noise_level: float = 0.05  # additive noise, fraction of per-dim std
    init_state_std: float = 1.0
    seed: int = 0
    holdout_series: int = 4  # H
    rejection_budget: int = 100
    # reject systems whose trajectories move faster than this in normalized
    # units (|du/dtau| after the fit_normalization rescaling); such systems
    # race through steep regions and put extreme targets into training.
    # 0 disables the check.
    max_normalized_slope: float = 25.0
    solver: SolverConfig = dc_field(default_factory=SolverConfig)

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        self.dim_weights = tuple(float(w) for w in self.dim_weights)
        if len(self.dim_weights) != 3 or any(w < 0 for w in self.dim_weights):
            raise ValueError("dim_weights must be three non-negative numbers")
        if abs(sum(self.dim_weights) - 1.0) > 1e-9:
            raise ValueError("dim_weights must sum to 1")
        if self.grid_mode not in ("regular", "irregular"):
            raise ValueError(f"unknown grid_mode {self.grid_mode!r}")
        if self.obs_per_series < 2:
            raise ValueError("need at least 2 observations per series")
        if self.series_per_system < 1:
            raise ValueError("need at least 1 series per system")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.max_terms_per_component < 1:
            raise ValueError("need at least one term per component")
        if self.holdout_series < 0:
            raise ValueError("holdout_series must be >= 0")
        if self.max_normalized_slope < 0:
            raise ValueError("max_normalized_slope must be >= 0")


@dataclass
class ObservationSeries:
    times: np.ndarray  # (L,)
    values: np.ndarray  # (L, D)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.times.ndim != 1 or self.times.size != self.values.shape[0]:
            raise ValueError("times and values must have matching length")
        if not np.all(np.diff(self.times) > 0):
            raise ValueError("observation times must be strictly increasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.values))):
            raise ValueError("observations must be finite")

    def __len__(self) -> int:
        return self.times.size


@dataclass
class ObservationSet:
    """The conditioning data: K observed series of one system."""

    dim: int
    series: list[ObservationSeries]

    def __post_init__(self):
        if not self.series:
            raise ValueError("observation set must hold at least one series")
        for s in self.series:
            if s.values.shape[1] != self.dim:
                raise ValueError("all series must share the set dimension")

    def __len__(self) -> int:
        return len(self.series)

    def stacked_values(self) -> np.ndarray:
        return np.concatenate([s.values for s in self.series], axis=0)

    def subset(self, n_series: int) -> "ObservationSet":
        if not 1 <= n_series <= len(self.series):
            raise ValueError("invalid context subset size")
        return ObservationSet(self.dim, self.series[:n_series])


@dataclass
class NormalizationTransform:
    """Affine rescaling of times and states fitted to one observation set.

    normalized time  tau = t / time_scale
    normalized state u_d = (x_d - state_shift_d) / state_scale_d
    """

    time_scale: float
    state_shift: np.ndarray  # (D,)
    state_scale: np.ndarray  # (D,)

    def __post_init__(self):
        self.state_shift = np.asarray(self.state_shift, dtype=float)
        self.state_scale = np.asarray(self.state_scale, dtype=float)
        if self.time_scale <= 0 or np.any(self.state_scale <= 0):
            raise ValueError("normalization scales must be positive")

    def normalize_states(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.state_shift) / self.state_scale

    def denormalize_states(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float) * self.state_scale + self.state_shift

    def normalize_series(self, s: ObservationSeries) -> ObservationSeries:
        return ObservationSeries(s.times / self.time_scale, self.normalize_states(s.values))

    def denormalize_series(self, s: ObservationSeries) -> ObservationSeries:
        return ObservationSeries(s.times * self.time_scale, self.denormalize_states(s.values))

    def normalize_field_output(self, f_value: np.ndarray) -> np.ndarray:
        """Chain rule: du/dtau = (time_scale / state_scale_d) * f_d(x)."""
        return np.asarray(f_value, dtype=float) * (self.time_scale / self.state_scale)

    def denormalize_field_output(self, f_norm_value: np.ndarray) -> np.ndarray:
        """Inverse chain rule: f_d(x) = f_norm_d(u) * state_scale_d / time_scale."""
        return np.asarray(f_norm_value, dtype=float) * (self.state_scale / self.time_scale)


def denormalize_field_output(f_norm_value: np.ndarray, tf: NormalizationTransform) -> np.ndarray:
    return tf.denormalize_field_output(f_norm_value)


def fit_normalization(obs: ObservationSet) -> tuple[NormalizationTransform, ObservationSet]:
    """Fit the affine transform putting times in [0, 1] and states in [-1, 1].

    Each state dimension is shifted by its pooled mean and scaled by the
    largest absolute deviation from it; zero-spread dimensions keep scale 1.
    """
    t_max = max(float(s.times[-1]) for s in obs.series)
    time_scale = t_max if t_max > 0 else 1.0
    pooled = obs.stacked_values()
    shift = pooled.mean(axis=0)
    spread = np.max(np.abs(pooled - shift), axis=0)
    scale = np.where(spread > 0, spread, 1.0)
    tf = NormalizationTransform(time_scale, shift, scale)
    normalized = ObservationSet(obs.dim, [tf.normalize_series(s) for s in obs.series])
    return tf, normalized


@dataclass
class DatasetRecord:
    record_id: int
    field: PolynomialVectorField
    observations: ObservationSet
    clean_trajectories: list[Trajectory]
    holdout_trajectories: list[Trajectory]
    config: dict

    @property
    def dim(self) -> int:
        return self.field.dim


def sample_field(rng: np.random.Generator, cfg: GeneratorConfig) -> PolynomialVectorField:
    """Draw a random polynomial field: dim ~ dim_weights, per component
    1..max_terms distinct monomials with N(0, coeff_scale^2) coefficients."""
    dim = int(rng.choice(3, p=cfg.dim_weights)) + 1
    basis = enumerate_monomials(dim, MAX_DEGREE)
    components = []
    for _ in range(dim):
        n_terms = int(rng.integers(1, cfg.max_terms_per_component + 1))
        picks = rng.choice(len(basis), size=n_terms, replace=False)
        coeffs = rng.normal(0.0, cfg.coeff_scale, size=n_terms)
        components.append([(float(c), basis[int(i)]) for c, i in zip(coeffs, picks)])
    return canonicalize(PolynomialVectorField(dim, components))


def sample_grid(rng: np.random.Generator, cfg: GeneratorConfig) -> TimeGrid:
    """Observation grid on [0, T]: regular spacing, or uniform draws with a
    minimum separation of T/(10 L) enforced by per-point resampling."""
    n, horizon = cfg.obs_per_series, cfg.horizon
    if cfg.grid_mode == "regular":
        return TimeGrid(np.linspace(0.0, horizon, n))
    min_gap = horizon / (10 * n)
    accepted: list[float] = []
    budget = 200 * n
    attempts = 0
    while len(accepted) < n:
        attempts += 1
        if attempts > budget:
            raise GenerationFailure("irregular grid resampling budget exceeded")
        candidate = float(rng.uniform(0.0, horizon))
        if all(abs(candidate - a) >= min_gap for a in accepted):
            accepted.append(candidate)
    return TimeGrid(np.sort(np.asarray(accepted)))


def corrupt(traj: Trajectory, noise_level: float, rng: np.random.Generator) -> ObservationSeries:
    """Additive Gaussian noise, per-dimension std = noise_level * std of the
    clean trajectory.  Constant dimensions stay noise-free."""
    if traj.diverged:
        raise ValueError("cannot corrupt a diverged trajectory")
    std = traj.states.std(axis=0)
    eps = rng.normal(0.0, 1.0, size=traj.states.shape) * (noise_level * std)
    return ObservationSeries(traj.grid.times, traj.states + eps)


def _record_rng(seed: int, record_id: int) -> np.random.Generator:
    # independent stream per record: seed XOR record id, folded to 64 bits
    return np.random.Generator(np.random.PCG64((seed ^ record_id) & 0xFFFFFFFFFFFFFFFF))


_PROBE_OFFSET = 0.15  # in normalized units, slightly past the query jitter


def _normalized_slope(field: PolynomialVectorField, trajectories: list[Trajectory]) -> float:
    """Largest |du/dtau| = |f_d(x)| * time_scale / scale_d under the same
    rescaling fit_normalization would apply, probed at the sampled states
    and at a stencil displaced by +-0.15 normalized units per dimension
    (where training queries will land).  Evaluated through the field itself
    so under-resolved fast oscillations cannot alias away."""
    pooled = np.concatenate([t.states for t in trajectories], axis=0)
    shift = pooled.mean(axis=0)
    spread = np.max(np.abs(pooled - shift), axis=0)
    scale = np.where(spread > 0, spread, 1.0)
    t_max = max(float(t.grid.times[-1]) for t in trajectories)
    time_scale = t_max if t_max > 0 else 1.0
    probes = [pooled]
    for d in range(field.dim):
        for sign in (1.0, -1.0):
            shifted = pooled.copy()
            shifted[:, d] += sign * _PROBE_OFFSET * scale[d]
            probes.append(shifted)
    rates = field.eval_many(np.concatenate(probes, axis=0)) * (time_scale / scale)
    return float(np.max(np.abs(rates)))


def generate_record(cfg: GeneratorConfig, record_id: int) -> DatasetRecord:
    return generate_record_with_stats(cfg, record_id)[0]


def generate_record_with_stats(cfg: GeneratorConfig, record_id: int) -> tuple[DatasetRecord, int]:
    """Sample one system and simulate it; reject-and-resample the whole
    system whenever any of its K + H trajectories diverges.  Also returns
    how many candidate systems were rejected along the way."""
    rng = _record_rng(cfg.seed, record_id)
    k, h = cfg.series_per_system, cfg.holdout_series
    for attempt in range(cfg.rejection_budget):
        field = sample_field(rng, cfg)
        grid = sample_grid(rng, cfg)
        x0s = rng.normal(0.0, cfg.init_state_std, size=(k + h, field.dim))
        trajectories = []
        ok = True
        for x0 in x0s:
            try:
                traj = integrate(field, x0, grid, cfg.solver)
            except SolverFailure:
                ok = False
                break
            if traj.diverged or not np.all(np.isfinite(traj.states)) or (
                np.max(np.abs(traj.states)) > cfg.solver.divergence_threshold
            ):
                ok = False
                break
            trajectories.append(traj)
        if not ok:
            continue
        if cfg.max_normalized_slope and (
            _normalized_slope(field, trajectories) > cfg.max_normalized_slope
        ):
            continue
        context = [corrupt(t, cfg.noise_level, rng) for t in trajectories[:k]]
        record = DatasetRecord(
            record_id=record_id,
            field=field,
            observations=ObservationSet(field.dim, context),
            clean_trajectories=trajectories[:k],
            holdout_trajectories=trajectories[k:],
            config=config_to_dict(cfg),
        )
        return record, attempt
    raise GenerationFailure(
        f"record {record_id}: rejection budget {cfg.rejection_budget} exhausted"
    )


def generate_dataset(
    cfg: GeneratorConfig, n_systems: int, workers: int = 1
) -> list[DatasetRecord]:
    return generate_dataset_with_stats(cfg, n_systems, workers)[0]


def generate_dataset_with_stats(
    cfg: GeneratorConfig, n_systems: int, workers: int = 1
) -> tuple[list[DatasetRecord], int]:
    """Records 0..n_systems-1 plus the total rejected-system count; each id
    owns an independent rng stream, so the result does not depend on the
    worker count."""
    ids = list(range(n_systems))
    if workers > 1 and n_systems > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers) as pool:
            results = pool.starmap(generate_record_with_stats, [(cfg, i) for i in ids])
    else:
        results = [generate_record_with_stats(cfg, i) for i in ids]
    results.sort(key=lambda pair: pair[0].record_id)
    records = [r for r, _ in results]
    rejected = sum(n for _, n in results)
    return records, rejected


def config_to_dict(cfg: GeneratorConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["dim_weights"] = list(d["dim_weights"])
    return d


# ---------------------------------------------------------------------------
# JSON-lines serialization


def _series_to_dict(times: np.ndarray, states: np.ndarray) -> dict:
    return {"times": times.tolist(), "states": states.tolist()}


def record_to_dict(record: DatasetRecord) -> dict:
    return {
        "id": record.record_id,
        "dim": record.dim,
        "field": {
            "components": [
                [[coeff, list(exps)] for coeff, exps in comp]
                for comp in record.field.components
            ]
        },
        "context": [_series_to_dict(s.times, s.values) for s in record.observations.series],
        "clean": [
            _series_to_dict(t.grid.times, t.states) for t in record.clean_trajectories
        ],
        "holdout": [
            _series_to_dict(t.grid.times, t.states) for t in record.holdout_trajectories
        ],
        "config": record.config,
    }


def record_from_dict(obj: dict) -> DatasetRecord:
    required = {"id", "dim", "field", "context", "clean", "holdout", "config"}
    missing = required - obj.keys()
    if missing:
        raise KeyError(f"missing keys: {sorted(missing)}")
    dim = int(obj["dim"])
    components = [
        [(float(coeff), tuple(int(e) for e in exps)) for coeff, exps in comp]
        for comp in obj["field"]["components"]
    ]
    field = PolynomialVectorField(dim, components)
    context = [
        ObservationSeries(np.asarray(s["times"]), np.asarray(s["states"]))
        for s in obj["context"]
    ]
    clean = [
        Trajectory(TimeGrid(np.asarray(s["times"])), np.asarray(s["states"]))
        for s in obj["clean"]
    ]
    holdout = [
        Trajectory(TimeGrid(np.asarray(s["times"])), np.asarray(s["states"]))
        for s in obj["holdout"]
    ]
    return DatasetRecord(
        record_id=int(obj["id"]),
        field=field,
        observations=ObservationSet(dim, context),
        clean_trajectories=clean,
        holdout_trajectories=holdout,
        config=obj["config"],
    )


def dumps_record(record: DatasetRecord) -> str:
    return json.dumps(record_to_dict(record), sort_keys=True, separators=(",", ":"))


def write_dataset(records: list[DatasetRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps_record(record))
            fh.write("\n")


def read_dataset(path) -> list[DatasetRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(record_from_dict(obj))
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise DatasetParseError(line_no, str(exc)) from exc
    return records
