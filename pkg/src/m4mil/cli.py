"""Command-line surface: synth, train, eval, heatmap, gradcheck.

Configuration is a plain-text file of ``key = value`` lines; blank
lines and ``#`` comments are ignored and unknown keys are rejected.
Every command is deterministic given its configuration (seeds
included). Exit codes: 0 success, 1 verification or training failure,
2 usage/configuration error, 3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, model as model_mod, train as train_mod
from .errors import (
    BagFormatError,
    CalibrationError,
    ConfigError,
    TrainingDivergedError,
)
from .model import ModelConfig
from .train import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_float_list(text: str) -> list[float] | None:
    if not text.strip():
        return None
    return [float(cell) for cell in text.split(",")]


# key -> (parser, default, help)
SCHEMA = {
    "variant": (str, "M4", "model variant: AMIL_single, MMoE_AMIL, MMoE_MPAMIL or M4"),
    "d": (int, 64, "instance feature width (synth and gradcheck; train infers it from bags)"),
    "d_f": (int, 32, "expert output width, divisible by 4"),
    "d_1": (int, 32, "gate reduction width, divisible by 4"),
    "attn_width": (int, 16, "attention hidden width"),
    "experts": (int, 5, "number of experts"),
    "tasks": (int, 10, "task count (synth and gradcheck; train infers it from the manifest)"),
    "tower_hidden": (int, 16, "tower hidden width"),
    "shape_mode": (str, "preserve", "conv geometry: preserve or literal"),
    "seed": (int, 0, "run seed; --seed overrides"),
    "lr": (float, 1e-4, "Adam learning rate"),
    "epochs": (int, 30, "training epochs"),
    "folds": (int, 5, "cross-validation folds; 1 trains a single model on the train split"),
    "shuffle": (_parse_bool, True, "reshuffle bags every epoch"),
    "workers": (int, 1, "fold-parallel worker threads"),
    "bags": (int, 400, "synthetic bag count"),
    "patches_min": (int, 20, "minimum instances per synthetic bag"),
    "patches_max": (int, 50, "maximum instances per synthetic bag"),
    "latent_dim": (int, 4, "latent signals shared across tasks"),
    "signal_fraction": (float, 0.3, "fraction of instances carrying signal"),
    "signal_strength": (float, 2.0, "additive signal scale"),
    "noise_sd": (float, 0.5, "noise standard deviation (features and labels)"),
    "prevalence": (_parse_float_list, None, "per-task positive rates; empty = descend 0.6 to 0.07"),
    "shared_loading": (float, 1.0, "weight every task puts on the shared latent"),
    "unique_loading": (float, 0.7, "weight each task puts on its own latent mix"),
}


def load_run_config(path: str | None) -> dict:
    config = {key: default for key, (_, default, _) in SCHEMA.items()}
    if path is None:
        return config
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        parser = SCHEMA[key][0]
        try:
            config[key] = parser(value)
        except ValueError as err:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {err}") from err
    return config


def default_prevalence(tasks: int) -> np.ndarray:
    """Positive rates descending geometrically from 0.6 to 0.07."""
    if tasks == 1:
        return np.array([0.6])
    ratio = (0.07 / 0.6) ** (1.0 / (tasks - 1))
    return 0.6 * ratio ** np.arange(tasks)


def default_task_loadings(
    tasks: int, latent_dim: int, shared: float, unique: float, seed: int
) -> np.ndarray:
    """Every task loads on latent 0; the rest is a per-task random mix."""
    loadings = np.zeros((tasks, latent_dim))
    loadings[:, 0] = shared
    if latent_dim > 1:
        rng = np.random.default_rng([seed, 7])
        extra = rng.standard_normal((tasks, latent_dim - 1))
        extra /= np.linalg.norm(extra, axis=1, keepdims=True)
        loadings[:, 1:] = unique * extra
    return loadings


def build_synth_spec(cfg: dict) -> data.SyntheticSpec:
    tasks = cfg["tasks"]
    prevalence = cfg["prevalence"]
    if prevalence is None:
        prevalence = default_prevalence(tasks)
    prevalence = np.asarray(prevalence, dtype=np.float64)
    if prevalence.shape != (tasks,):
        raise ConfigError(
            f"prevalence lists {prevalence.size} rates but tasks = {tasks}"
        )
    return data.SyntheticSpec(
        tasks=tasks,
        bags=cfg["bags"],
        patch_range=(cfg["patches_min"], cfg["patches_max"]),
        d=cfg["d"],
        prevalence=prevalence,
        latent_dim=cfg["latent_dim"],
        task_loadings=default_task_loadings(
            tasks, cfg["latent_dim"], cfg["shared_loading"], cfg["unique_loading"], cfg["seed"]
        ),
        signal_fraction=cfg["signal_fraction"],
        signal_strength=cfg["signal_strength"],
        noise_sd=cfg["noise_sd"],
        seed=cfg["seed"],
    )


def build_model_config(cfg: dict, d: int, tasks: int) -> ModelConfig:
    return ModelConfig(
        d=d,
        tasks=tasks,
        d_f=cfg["d_f"],
        d_1=cfg["d_1"],
        attn_width=cfg["attn_width"],
        experts=cfg["experts"],
        tower_hidden=cfg["tower_hidden"],
        variant=cfg["variant"],
        shape_mode=cfg["shape_mode"],
        seed=cfg["seed"],
    )


def build_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"], epochs=cfg["epochs"], seed=cfg["seed"], shuffle=cfg["shuffle"]
    )


def _load_labelled_bags(manifest_path: str) -> tuple[list[data.Bag], list[str]]:
    bags, task_names = data.load_dataset(manifest_path)
    widths = {b.d for b in bags}
    if len(widths) > 1:
        raise ConfigError(f"bags disagree on feature width: {sorted(widths)}")
    return bags, task_names


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    spec = build_synth_spec(cfg)
    bags, manifest = data.generate_synthetic(spec)
    out_dir = Path(args.out)
    manifest_path = data.write_dataset(bags, manifest, out_dir)
    with open(out_dir / "signal_patches.csv", "w", newline="") as fh:
        fh.write("id,signal_indices\n")
        for bag in bags:
            indices = " ".join(str(i) for i in np.flatnonzero(bag.signal_mask))
            fh.write(f"{bag.id},{indices}\n")
    labels = np.array([b.labels for b in bags])
    print(f"wrote {len(bags)} bags and {manifest_path}")
    for t, name in enumerate(manifest.task_names):
        print(f"prevalence {name}: target {spec.prevalence[t]:.3f} achieved {labels[:, t].mean():.3f}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    bags, task_names = _load_labelled_bags(args.manifest)
    model_config = build_model_config(cfg, d=bags[0].d, tasks=len(task_names))
    train_config = build_train_config(cfg)
    report, models = train_mod.cross_validate(
        bags,
        task_names,
        model_config,
        train_config,
        k=cfg["folds"],
        workers=cfg["workers"],
        return_models=True,
    )
    out_model = Path(args.out)
    model_mod.save_params(models[-1], out_model)
    report_path = out_model.with_name(out_model.name + ".report.csv")
    report.to_csv(report_path)
    _print_report(report)
    print(f"saved parameters to {out_model} and report to {report_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    bags, task_names = _load_labelled_bags(args.manifest)
    model_config = build_model_config(cfg, d=bags[0].d, tasks=len(task_names))
    # the saved model came from the last fold; rebuild with the same seed offset
    folds = cfg["folds"]
    trained = model_mod.build(replace(model_config, seed=model_config.seed + folds - 1))
    model_mod.load_params(trained, args.model)
    split = data.make_fold_split([b.id for b in bags], k=folds, seed=cfg["seed"])
    by_id = {b.id: b for b in bags}
    test_bags = [by_id[i] for i in split.test_ids]
    aucs = train_mod.evaluate(trained, test_bags)
    report = train_mod.EvalReport(task_names=task_names, fold_aucs=aucs[None, :])
    report.to_csv(args.out)
    _print_report(report)
    print(f"wrote report to {args.out}")
    return 0


def _print_report(report: train_mod.EvalReport) -> None:
    k = report.fold_aucs.shape[0]
    header = "task".ljust(12) + "".join(f"fold{i + 1}".rjust(9) for i in range(k)) + "mean".rjust(9)
    print(header)
    for t, name in enumerate(report.task_names):
        cells = "".join(
            (f"{report.fold_aucs[f, t]:.4f}" if np.isfinite(report.fold_aucs[f, t]) else "-").rjust(9)
            for f in range(k)
        )
        mean = report.mean_per_task[t]
        mean_cell = (f"{mean:.4f}" if np.isfinite(mean) else "-").rjust(9)
        print(name.ljust(12) + cells + mean_cell)
    print(f"mean AUC over tasks: {report.mean_auc:.4f}")


def _heatmap_side(bag: data.Bag) -> int:
    side = math.isqrt(bag.n)
    if side * side < bag.n:
        side += 1
    if bag.grid_coords is not None:
        # real slides need not be square; widen to fit the actual grid
        side = max(side, int(bag.grid_coords.max()) + 1)
    return side


def _write_pgm(path: Path, scores: np.ndarray, coords: np.ndarray, side: int) -> None:
    cells = np.zeros((side, side))
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        scaled = np.round(255.0 * (scores - lo) / (hi - lo))
    else:
        scaled = np.full_like(scores, 255.0)
    cells[coords[:, 0], coords[:, 1]] = scaled
    with open(path, "wb") as fh:
        fh.write(f"P5\n{side} {side}\n255\n".encode())
        fh.write(cells.astype(np.uint8).tobytes())


def cmd_heatmap(args) -> int:
    cfg = _config_from_args(args)
    bag = data.read_bag(args.bag)
    model_config = build_model_config(cfg, d=bag.d, tasks=cfg["tasks"])
    trained = model_mod.build(replace(model_config, seed=model_config.seed + cfg["folds"] - 1))
    model_mod.load_params(trained, args.model)
    output = model_mod.forward(trained, bag)

    n_rows = output.expert_attention.shape[0]
    n_tasks = trained.config.tasks
    expert_scores = [model_mod.expert_heatmap(output, e) for e in range(n_rows)]
    task_scores = [model_mod.task_heatmap(output, t) for t in range(n_tasks)]

    prefix = Path(args.out)
    table_path = prefix.with_name(prefix.name + "_scores.csv")
    with open(table_path, "w", newline="") as fh:
        header = ["patch", "row", "col"]
        header += [f"expert_{e + 1}" for e in range(n_rows)]
        header += [f"task_{t + 1}" for t in range(n_tasks)]
        fh.write(",".join(header) + "\n")
        for i in range(bag.n):
            if bag.grid_coords is not None:
                row, col = (str(int(v)) for v in bag.grid_coords[i])
            else:
                row, col = "", ""
            cells = [str(i), row, col]
            cells += [repr(float(s[i])) for s in expert_scores]
            cells += [repr(float(s[i])) for s in task_scores]
            fh.write(",".join(cells) + "\n")
    print(f"wrote {table_path}")

    if bag.grid_coords is None:
        print("warning: bag has no grid coordinates, skipping graymap images", file=sys.stderr)
        return 0
    side = _heatmap_side(bag)
    for e, scores in enumerate(expert_scores):
        path = prefix.with_name(prefix.name + f"_expert{e + 1}.pgm")
        _write_pgm(path, scores, bag.grid_coords, side)
    for t, scores in enumerate(task_scores):
        path = prefix.with_name(prefix.name + f"_task{t + 1}.pgm")
        _write_pgm(path, scores, bag.grid_coords, side)
    print(f"wrote {n_rows} expert and {n_tasks} task graymaps ({side}x{side})")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config_from_args(args)
    model_config = build_model_config(cfg, d=cfg["d"], tasks=cfg["tasks"])
    checks = train_mod.gradcheck_suite(model_config, corrupt=args.corrupt_gradients)
    failures = 0
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        failures += 0 if check.passed else 1
        print(f"{status} {check.name} max_rel_err={check.max_rel_err:.3e} tol={check.tol:.1e}")
    print(f"{len(checks) - failures}/{len(checks)} checks passed")
    return 0 if failures == 0 else 1


def _config_from_args(args) -> dict:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def build_parser() -> argparse.ArgumentParser:
    key_lines = "\n".join(
        f"  {key} = {default!r}: {help_text}" for key, (_, default, help_text) in SCHEMA.items()
    )
    parser = argparse.ArgumentParser(
        prog="m4mil",
        description="Multi-proxy multi-gate mixture-of-experts bag models.",
        epilog="config keys and defaults:\n" + key_lines,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--config", help="path to a 'key = value' config file")
        sub.add_argument("--seed", type=int, help="override the config seed")

    synth = subparsers.add_parser("synth", help="generate a synthetic bag dataset")
    common(synth)
    synth.add_argument("--out", required=True, help="output dataset directory")
    synth.set_defaults(func=cmd_synth)

    train_p = subparsers.add_parser("train", help="train with cross-validation and save parameters")
    common(train_p)
    train_p.add_argument("manifest", help="dataset manifest path")
    train_p.add_argument("--out", default="model.mpr1", help="output parameter file")
    train_p.set_defaults(func=cmd_train)

    eval_p = subparsers.add_parser("eval", help="evaluate saved parameters on the held-out test set")
    common(eval_p)
    eval_p.add_argument("model", help="saved MPR1 parameter file")
    eval_p.add_argument("manifest", help="dataset manifest path")
    eval_p.add_argument("--out", default="report.csv", help="output report table")
    eval_p.set_defaults(func=cmd_eval)

    heatmap = subparsers.add_parser("heatmap", help="export per-expert and per-task heatmaps")
    common(heatmap)
    heatmap.add_argument("model", help="saved MPR1 parameter file")
    heatmap.add_argument("bag", help="MBG1 bag file")
    heatmap.add_argument("--out", default="heatmap", help="output file prefix")
    heatmap.set_defaults(func=cmd_heatmap)

    gradcheck = subparsers.add_parser("gradcheck", help="finite-difference checks for every layer and variant")
    common(gradcheck)
    gradcheck.add_argument(
        "--corrupt-gradients",
        action="store_true",
        help="debug: corrupt analytic gradients to prove the checker notices",
    )
    gradcheck.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except CalibrationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (BagFormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except TrainingDivergedError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
