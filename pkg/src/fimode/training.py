"""Supervised pretraining: match predicted and true fields at query points.

Each step draws a batch of systems, rebuilds their normalized context
(optionally with a random subset of the context series, so the model stays
robust to how many series it is given at inference), samples query points
near the observed states, and regresses the operator output onto the
analytically evaluated ground-truth field in normalized coordinates.

Every random choice in step t is drawn from a generator seeded by
(seed, t), so a run can be resumed from any checkpoint and will reproduce
the uninterrupted loss trajectory exactly.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from .datagen import (
    DatasetRecord,
    GeneratorConfig,
    ObservationSet,
    fit_normalization,
    generate_record,
)
from .errors import NumericFailure, TrainingFailure
from .model import FieldOperator, ModelConfig, pad_queries, tokenize
from .nn import global_grad_norm


@dataclass
class TrainConfig:
    batch_systems: int = 8
    queries_per_system: int = 32  # M
    jitter_scale: float = 0.1  # query spread around observed states
    learning_rate: float = 3e-4
    warmup_steps: int = 500
    total_steps: int = 2000
    gradient_clip_norm: float = 1.0
    checkpoint_every: int = 1000
    seed: int = 0
    # 0 disables context subsampling; k >= 1 trains on a uniformly drawn
    # number of context series between k and the record's full count
    min_context_series: int = 0

    def __post_init__(self):
        for name in ("batch_systems", "queries_per_system", "warmup_steps",
                     "gradient_clip_norm", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # zero is allowed for total_steps (no-op run) and learning_rate (frozen run)
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.jitter_scale < 0:
            raise ValueError("jitter_scale must be >= 0")
        if self.min_context_series < 0:
            raise ValueError("min_context_series must be >= 0")


def sample_queries(
    obs_norm: ObservationSet, n_queries: int, jitter_scale: float, rng: np.random.Generator
) -> np.ndarray:
    """Query locations: uniformly chosen observed states plus N(0, a^2 I)
    jitter, all in normalized coordinates.  Returns (n_queries, D)."""
    if n_queries < 1:
        raise ValueError("need at least one query")
    pool = obs_norm.stacked_values()
    idx = rng.integers(0, pool.shape[0], size=n_queries)
    jitter = rng.normal(0.0, 1.0, size=(n_queries, obs_norm.dim)) * jitter_scale
    return pool[idx] + jitter


def loss_value(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over queries of the squared Euclidean error."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise NumericFailure("non-finite loss inputs")
    diff = pred - truth
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    """1-based step; linear warmup, then cosine decay to zero."""
    if step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamState:
    """Adam moments plus the step counter and the safety LR multiplier."""

    def __init__(self, model: FieldOperator, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.lr_scale = 1.0
        self.m = {name: np.zeros_like(p) for name, p, _ in model.named_params()}
        self.v = {name: np.zeros_like(p) for name, p, _ in model.named_params()}

    def update(self, model: FieldOperator, lr: float, clip_norm: float) -> float:
        """Clip gradients to `clip_norm` globally, apply one Adam step,
        return the pre-clip gradient norm."""
        named = model.named_params()
        gnorm = global_grad_norm(named)
        factor = 1.0 if gnorm <= clip_norm else clip_norm / gnorm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        lr_eff = lr * self.lr_scale
        for name, p, g in named:
            grad = g * factor
            self.m[name] = b1 * self.m[name] + (1 - b1) * grad
            self.v[name] = b2 * self.v[name] + (1 - b2) * grad * grad
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p -= lr_eff * m_hat / (np.sqrt(v_hat) + self.eps)
            if not np.all(np.isfinite(p)):
                raise NumericFailure(f"parameter {name} became non-finite")
        return gnorm


@dataclass
class Checkpoint:
    step: int
    model: FieldOperator
    opt: AdamState
    train_config: TrainConfig
    last_loss: float
    ema_loss: float


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 7, int(step)])


def prepare_batch(records: list[DatasetRecord], cfg: TrainConfig, rng: np.random.Generator):
    """Normalized tokens, padded queries and normalized ground truth for a
    batch of systems.  Token sets of unequal length are zero-padded and
    masked out of the attention.

    With subsampling enabled, half of the steps keep the full context and
    the rest draw a context size uniformly from [min_context_series, K-1]:
    small contexts leave the field underdetermined, so training purely on
    uniform sizes floors the loss at the posterior uncertainty instead of
    driving it down.
    """
    items = []
    if cfg.min_context_series > 0:
        k_full = min(len(r.observations) for r in records)
        lo = min(cfg.min_context_series, k_full)
        if rng.random() < 0.5 or lo == k_full:
            k_t = k_full
        else:
            k_t = int(rng.integers(lo, k_full))
    else:
        k_t = 0
    for record in records:
        obs = record.observations
        if k_t:
            picks = rng.choice(len(obs), size=min(k_t, len(obs)), replace=False)
            obs = ObservationSet(obs.dim, [obs.series[int(i)] for i in picks])
        tf, obs_n = fit_normalization(obs)
        tokens, dim_mask = tokenize(obs_n)
        q_norm = sample_queries(obs_n, cfg.queries_per_system, cfg.jitter_scale, rng)
        truth = tf.normalize_field_output(record.field.eval_many(tf.denormalize_states(q_norm)))
        items.append((tokens, pad_queries(q_norm, obs.dim), pad_queries(truth, obs.dim), dim_mask))

    b = len(items)
    n_max = max(t.shape[0] for t, _, _, _ in items)
    m = cfg.queries_per_system
    tokens = np.zeros((b, n_max, items[0][0].shape[1]))
    key_mask = np.zeros((b, n_max), dtype=bool)
    queries = np.zeros((b, m, 3))
    truth = np.zeros((b, m, 3))
    dmask = np.zeros((b, 3))
    for i, (tok, q3, t3, dm) in enumerate(items):
        tokens[i, : tok.shape[0]] = tok
        key_mask[i, : tok.shape[0]] = True
        queries[i], truth[i], dmask[i] = q3, t3, dm
    if key_mask.all():
        key_mask = None
    return tokens, key_mask, queries, truth, dmask


def train_step(
    model: FieldOperator,
    opt: AdamState,
    records: list[DatasetRecord],
    cfg: TrainConfig,
    step: int,
) -> tuple[float, float, float]:
    """One optimizer step on a batch of systems; returns (loss, grad_norm, lr).

    A non-finite loss aborts the update, halves the effective learning rate
    and retries once with fresh query draws; a second failure raises.
    """
    rng = _step_rng(cfg.seed, step)
    lr = learning_rate_at(step, cfg)
    for attempt in range(2):
        tokens, key_mask, queries, truth, dmask = prepare_batch(records, cfg, rng)
        try:
            pred = model.forward(tokens, queries, key_mask, train=True, rng=rng)
            masked_diff = (pred - truth) * dmask[:, None, :]
            loss = float(np.mean(np.sum(masked_diff**2, axis=2)))
        except NumericFailure:
            loss = float("nan")
        if math.isfinite(loss):
            d_pred = (2.0 / (len(records) * cfg.queries_per_system)) * masked_diff
            model.zero_grad()
            model.backward(d_pred)
            gnorm = opt.update(model, lr, cfg.gradient_clip_norm)
            return loss, gnorm, lr * opt.lr_scale
        model.zero_grad()
        opt.lr_scale *= 0.5
        if attempt == 1:
            raise TrainingFailure(f"non-finite loss at step {step} after LR backoff")
    raise AssertionError("unreachable")


class PoolSource:
    """Fixed pool of records; batches are drawn without replacement."""

    def __init__(self, records: list[DatasetRecord]):
        if not records:
            raise ValueError("training pool is empty")
        self.records = records

    def batch(self, step: int, n: int, rng: np.random.Generator) -> list[DatasetRecord]:
        if n >= len(self.records):
            return list(self.records)
        picks = rng.choice(len(self.records), size=n, replace=False)
        return [self.records[int(i)] for i in picks]


class StreamSource:
    """Unbounded synthetic stream; record ids are derived from the step so
    any step regenerates the same systems."""

    def __init__(self, gen_cfg: GeneratorConfig):
        self.gen_cfg = gen_cfg

    def batch(self, step: int, n: int, rng: np.random.Generator) -> list[DatasetRecord]:
        base = step * n
        return [generate_record(self.gen_cfg, base + j) for j in range(n)]


def save_training_checkpoint(path, state: Checkpoint) -> None:
    from .model import save_model

    extra = {"train_config": dataclasses.asdict(state.train_config),
             "step": state.step,
             "opt": {"t": state.opt.t, "lr_scale": state.opt.lr_scale},
             "loss_stats": {"last": state.last_loss, "ema": state.ema_loss}}
    tensors = {}
    for name, mom in state.opt.m.items():
        tensors["adam_m." + name] = mom
    for name, mom in state.opt.v.items():
        tensors["adam_v." + name] = mom
    save_model(path, state.model, extra_meta=extra, extra_tensors=tensors)


def load_training_checkpoint(path) -> Checkpoint:
    from .model import load_model

    model, meta, rest = load_model(path)
    if "train_config" not in meta:
        raise ValueError(f"{path}: not a training checkpoint")
    cfg = TrainConfig(**meta["train_config"])
    opt = AdamState(model)
    opt.t = int(meta["opt"]["t"])
    opt.lr_scale = float(meta["opt"]["lr_scale"])
    for name in opt.m:
        opt.m[name] = rest["adam_m." + name]
        opt.v[name] = rest["adam_v." + name]
    stats = meta.get("loss_stats", {})
    return Checkpoint(
        step=int(meta["step"]),
        model=model,
        opt=opt,
        train_config=cfg,
        last_loss=float(stats.get("last", math.nan)),
        ema_loss=float(stats.get("ema", math.nan)),
    )


def train_loop(
    source,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    on_step=None,
) -> tuple[Checkpoint, list[tuple[int, float, float, float]]]:
    """Run `total_steps` optimizer steps and return the final checkpoint
    plus the (step, loss, grad_norm, lr) history of the executed steps.

    `source` must provide batch(step, n, rng); out_dir (optional) receives
    periodic checkpoints and a loss CSV with the schema step,loss,grad_norm,lr.
    """
    if resume is not None:
        model, opt = resume.model, resume.opt
        start = resume.step
        ema = resume.ema_loss
        if dataclasses.asdict(resume.train_config) != dataclasses.asdict(cfg):
            raise ValueError("resume checkpoint was produced by a different train config")
    else:
        model = FieldOperator(model_cfg, seed=cfg.seed)
        opt = AdamState(model)
        start = 0
        ema = math.nan

    csv_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "loss.csv")
        _prepare_csv(csv_path, start)

    history = []
    last_loss = math.nan
    for step in range(start + 1, cfg.total_steps + 1):
        batch_rng = np.random.default_rng([int(cfg.seed), 11, step])
        batch = source.batch(step, cfg.batch_systems, batch_rng)
        loss, gnorm, lr = train_step(model, opt, batch, cfg, step)
        last_loss = loss
        ema = loss if not math.isfinite(ema) else 0.99 * ema + 0.01 * loss
        history.append((step, loss, gnorm, lr))
        if csv_path is not None:
            with open(csv_path, "a", encoding="utf-8") as fh:
                fh.write(f"{step},{loss!r},{gnorm!r},{lr!r}\n")
        if on_step is not None:
            on_step(step, loss, gnorm, lr)
        if out_dir is not None and (step % cfg.checkpoint_every == 0 or step == cfg.total_steps):
            state = Checkpoint(step, model, opt, cfg, last_loss, ema)
            save_training_checkpoint(
                os.path.join(out_dir, f"checkpoint_{step:07d}.ckpt"), state
            )
    state = Checkpoint(start if not history else history[-1][0], model, opt, cfg, last_loss, ema)
    if out_dir is not None:
        save_training_checkpoint(os.path.join(out_dir, "checkpoint_final.ckpt"), state)
    return state, history


def _prepare_csv(csv_path: str, start_step: int) -> None:
    """Start a fresh log or truncate rows past the resume step."""
    if start_step == 0 or not os.path.exists(csv_path):
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("step,loss,grad_norm,lr\n")
        return
    with open(csv_path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    kept = [lines[0]] if lines else ["step,loss,grad_norm,lr\n"]
    for line in lines[1:]:
        try:
            if int(line.split(",", 1)[0]) <= start_step:
                kept.append(line)
        except ValueError:
            continue
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.writelines(kept)
