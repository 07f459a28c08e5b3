"""Command-line entry point: gen | train | eval | infer | plot.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
All outputs are deterministic functions of the inputs and seeds; runs with
--workers 1 define the canonical byte-for-byte artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import datagen, evaluation, training
from .config import RunConfig, UsageError, echo_config, resolve_config
from .errors import DatasetParseError, GenerationFailure, SolverFailure, TrainingFailure
from .model import load_model
from .quiver import export_quiver

SEED_ENV_VAR = "FIM_ODE_SEED"


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--seed", type=int, default=None, help="overrides every section seed")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel workers (default: available cores)")


def _workers(args) -> int:
    if args.workers is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.workers
    return os.cpu_count() or 1


def _resolve(args, overrides: dict) -> RunConfig:
    seed = args.seed if args.seed is not None else _env_seed()
    if seed is not None:
        overrides.setdefault("generator", {})["seed"] = seed
        overrides.setdefault("training", {})["seed"] = seed
    return resolve_config(args.config, overrides)


def _load_records(path):
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    return datagen.read_dataset(path)


def cmd_gen(args) -> int:
    gen_overrides = {
        "series_per_system": args.k,
        "obs_per_series": args.l,
        "noise_level": args.noise,
        "grid_mode": args.grid_mode,
        "horizon": args.horizon,
    }
    cfg = _resolve(args, {"generator": gen_overrides})
    gen = cfg.generator
    if args.dt is not None:
        if args.horizon is not None:
            raise UsageError("--dt and --horizon are mutually exclusive")
        gen = datagen.GeneratorConfig(
            **{**datagen.config_to_dict(gen), "horizon": args.dt * (gen.obs_per_series - 1)}
        )
        cfg = RunConfig(gen, cfg.model, cfg.training, cfg.eval)
    records, rejected = datagen.generate_dataset_with_stats(gen, args.systems, _workers(args))
    datagen.write_dataset(records, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    echo_config(cfg, out_dir)
    print(f"wrote {len(records)} systems to {args.out} "
          f"(accepted {len(records)}, rejected {rejected})")
    return 0


def cmd_train(args) -> int:
    overrides = {"training": {"total_steps": args.steps,
                              "batch_systems": args.batch,
                              "min_context_series": args.min_context}}
    cfg = _resolve(args, overrides)
    resume_state = None
    if args.resume:
        if not os.path.exists(args.resume):
            raise UsageError(f"checkpoint not found: {args.resume}")
        resume_state = training.load_training_checkpoint(args.resume)
    if args.dataset:
        source = training.PoolSource(_load_records(args.dataset))
    elif args.systems:
        pool, _ = datagen.generate_dataset_with_stats(cfg.generator, args.systems, _workers(args))
        source = training.PoolSource(pool)
    else:
        source = training.StreamSource(cfg.generator)
    os.makedirs(args.out_dir, exist_ok=True)
    echo_config(cfg, args.out_dir)

    def on_step(step, loss, gnorm, lr):
        if step % args.log_every == 0 or step == cfg.training.total_steps:
            print(f"step {step:>7}  loss {loss:.6f}  grad_norm {gnorm:.4f}  lr {lr:.2e}")

    state, _ = training.train_loop(
        source, cfg.model, cfg.training, out_dir=args.out_dir,
        resume=resume_state, on_step=on_step,
    )
    final = os.path.join(args.out_dir, "checkpoint_final.ckpt")
    print(f"finished at step {state.step}; final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    overrides = {"eval": {"estimator": args.estimator,
                          "score_against": args.score_against,
                          "context_series": args.context_trajectories}}
    cfg = _resolve(args, overrides)
    records = _load_records(args.dataset)
    opts = cfg.eval
    model = None
    if opts.estimator == "model":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for the model estimator")
        if not os.path.exists(args.checkpoint):
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        model, _, _ = load_model(args.checkpoint)
    if opts.context_series:
        records = [
            datagen.DatasetRecord(
                r.record_id, r.field,
                r.observations.subset(min(opts.context_series, len(r.observations))),
                r.clean_trajectories[: opts.context_series],
                r.holdout_trajectories, r.config,
            )
            for r in records
        ]
    estimator = evaluation.make_estimator(opts.estimator, model, 0)
    report = evaluation.evaluate_dataset(
        records, estimator,
        solver_cfg=cfg.generator.solver,
        score_against=opts.score_against,
        workers=_workers(args),
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    echo_config(cfg, os.path.dirname(os.path.abspath(args.out)))
    for line in report.summary_lines():
        print(line)
    print(f"report written to {args.out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve(args, {})
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, _, _ = load_model(args.checkpoint)
    records = {r.record_id: r for r in _load_records(args.dataset)}
    if args.record_id not in records:
        raise UsageError(f"record id {args.record_id} not in dataset")
    record = records[args.record_id]
    obs = record.observations
    if args.context_trajectories:
        obs = obs.subset(min(args.context_trajectories, len(obs)))
    try:
        with open(args.queries, "r", encoding="utf-8") as fh:
            points = np.asarray(json.load(fh), dtype=float)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read queries file: {exc}") from exc
    if points.ndim == 1:
        points = points[None, :]
    if points.ndim != 2 or points.shape[1] != record.dim:
        raise UsageError(f"queries must be (N, {record.dim}) for record {args.record_id}")
    estimates = model.estimate_field(obs, points)
    payload = {
        "record_id": record.record_id,
        "dim": record.dim,
        "queries": points.tolist(),
        "estimates": estimates.tolist(),
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        echo_config(cfg, os.path.dirname(os.path.abspath(args.out)))
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_plot(args) -> int:
    cfg = _resolve(args, {})
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, _, _ = load_model(args.checkpoint)
    records = {r.record_id: r for r in _load_records(args.dataset)}
    if args.record_id not in records:
        raise UsageError(f"record id {args.record_id} not in dataset")
    record = records[args.record_id]
    if record.dim < 2:
        raise UsageError("quiver requires D>=2")
    try:
        counts = [int(tok) for tok in args.num_context.split(",") if tok]
    except ValueError as exc:
        raise UsageError(f"--num-context must be a comma list of ints: {exc}") from exc
    if not counts or any(c < 1 for c in counts):
        raise UsageError("--num-context entries must be >= 1")

    pooled = record.observations.stacked_values()
    if args.region:
        try:
            region = tuple(float(tok) for tok in args.region.split(","))
            assert len(region) == 4
        except (ValueError, AssertionError) as exc:
            raise UsageError("--region must be xmin,xmax,ymin,ymax") from exc
    else:
        lo, hi = pooled.min(axis=0), pooled.max(axis=0)
        pad = 0.1 * np.maximum(hi - lo, 1e-3)
        region = (lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1])

    third = args.fixed_third

    def slice2(f):
        if record.dim == 2:
            return lambda p: np.asarray(f(p), dtype=float)
        return lambda p: np.asarray(f(np.array([p[0], p[1], third])), dtype=float)[:2]

    os.makedirs(args.out_dir, exist_ok=True)
    echo_config(cfg, args.out_dir)
    truth2 = slice2(record.field)
    for n in counts:
        obs = record.observations.subset(min(n, len(record.observations)))
        _, f_hat = model.context_function(obs)
        lines = [s.values[:, :2] for s in obs.series]
        base = os.path.join(args.out_dir, f"quiver_ctx{n}")
        export_quiver(
            slice2(f_hat), truth2, region, args.grid_n,
            base + ".csv", base + ".svg", context_polylines=lines,
        )
        print(f"wrote {base}.csv and {base}.svg")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fimode",
        description="Zero-shot ODE vector-field inference: synthetic data, "
                    "pretraining, evaluation and figure export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--systems", type=int, required=True)
    p.add_argument("--out", default="dataset.jsonl")
    p.add_argument("--k", type=int, default=None, help="context series per system")
    p.add_argument("--l", type=int, default=None, help="observations per series")
    p.add_argument("--dt", type=float, default=None,
                   help="regular-grid spacing; sets horizon to dt*(l-1)")
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--grid-mode", choices=("regular", "irregular"), default=None)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="pretrain the estimator")
    _add_common(p)
    p.add_argument("--dataset", help="train on a fixed dataset file")
    p.add_argument("--systems", type=int, default=None,
                   help="train on a freshly generated fixed pool of this size")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--min-context", type=int, default=None,
                   help="subsample context series per step, at least this many")
    p.add_argument("--out-dir", default="train_out")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score an estimator on a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--estimator", choices=("model", "oracle", "polyfit", "knn", "zero"),
                   default=None)
    p.add_argument("--score-against", choices=("clean", "observed"), default=None)
    p.add_argument("--context-trajectories", type=int, default=None,
                   help="restrict the context to the first N series")
    p.add_argument("--out", default="eval_report.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="estimate the field at query points")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--record-id", type=int, required=True)
    p.add_argument("--queries", required=True, help="JSON file with an (N, D) point list")
    p.add_argument("--context-trajectories", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("plot", help="export quiver CSV/SVG comparisons")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--record-id", type=int, required=True)
    p.add_argument("--num-context", default="9",
                   help="comma list of context-series counts, e.g. 1,5,9")
    p.add_argument("--grid-n", type=int, default=20)
    p.add_argument("--region", help="xmin,xmax,ymin,ymax (default: data box +10%%)")
    p.add_argument("--fixed-third", type=float, default=0.0,
                   help="slice value of x3 for 3D systems")
    p.add_argument("--out-dir", default="plots")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetParseError, GenerationFailure, SolverFailure, TrainingFailure,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
