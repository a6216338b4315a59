"""
Experiment runner: gen, train, eval, gates, gradcheck and bench subcommands.

Exit codes: 0 success, 1 failed check, 2 usage/config/file error, 3 numerical failure.
"""

import argparse
import logging
import math
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .attribution import pool_gates
from .config import ExperimentConfig, load_config, load_environment, log_level_from_env, threads_from_env
from .errors import ConfigError, ContractError, EvaluationError, LoadError, TrainingError
from .model import (
    FusionModel, forward_sequence, init_params, load_checkpoint, parameter_breakdown, save_checkpoint,
)
from .synthdata import Dataset, class_histogram, generate, load_dataset, save_dataset
from .tensorgrad import Tensor, concat, grad_check
from .train import (
    AdamState, MetricReport, TrainConfig, cross_entropy_per_frame, evaluate, mse_loss, train_tbptt,
)
from .utils import (
    format_bench_medians, format_gate_summary, format_grad_check, format_metric_report,
    format_parameter_breakdown, median,
)

logger = logging.getLogger("grfu.cli")

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEPS = 3
GRADCHECK_BATCH = 2
GRADCHECK_SCALE = 0.1


# ====== HELPERS ======

def _overrides(args) -> Dict:
    return {"seed": args.seed, "out": args.out, "checkpoint": args.checkpoint, "dataset": args.dataset}


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command", key="config")
    return load_config(args.config, _overrides(args))


def _config_for_checkpoint(args) -> ExperimentConfig:
    """eval/gates may run without a config; the task then follows the checkpoint's head."""
    if args.config:
        return load_config(args.config, _overrides(args))
    values = {k: v for k, v in _overrides(args).items() if v is not None}
    checkpoint = values.get("checkpoint") or os.path.join(values.get("out", "out"), "model.grfu")
    model = load_checkpoint(checkpoint)
    values["task"] = "classify" if model.spec.head == "classifier" else "regress"
    config = ExperimentConfig(values)
    config.threads = threads_from_env()
    return config


def _dataset_path(config: ExperimentConfig, split: str) -> str:
    """`--dataset` may name a file or a directory holding train.grfd / test.grfd."""
    if config.dataset and not os.path.isdir(config.dataset):
        return config.dataset
    return os.path.join(config.dataset or config.out, f"{split}.grfd")


def _check_compatible(model: FusionModel, dataset: Dataset) -> None:
    spec = model.spec
    task = "classify" if spec.head == "classifier" else "regress"
    if dataset.spec.task != task:
        raise ContractError(f"{spec.head} model cannot be evaluated on a {dataset.spec.task} dataset")
    if tuple(dataset.spec.sensor_dims) != spec.sensor_dims:
        raise ContractError(f"dataset sensor dims {dataset.spec.sensor_dims} differ from the model's {spec.sensor_dims}")
    if task == "classify" and dataset.spec.num_classes != spec.out_dim:
        raise ContractError(f"dataset has {dataset.spec.num_classes} classes, model predicts {spec.out_dim}")


def _window_settings(model: FusionModel, config: ExperimentConfig) -> TrainConfig:
    """Truncation settings stored in the checkpoint win over the config's."""
    train_config = config.train_config()
    window = model.extras.get("train.window")
    if window is not None:
        seq_len, reset = window.values.astype(int).tolist()
        train_config.seq_len = seq_len
        train_config.reset_state = bool(reset)
    return train_config


def metric_columns(task: str, num_classes: int) -> List[str]:
    columns = ["epoch", "split", "loss", "metric"]
    if task == "classify":
        # background class 0 is not part of the mean
        columns.extend(str(k) for k in range(1, num_classes))
    return columns


def metric_rows(epoch: int, reports: Dict[str, MetricReport]) -> List[Dict]:
    rows = []
    for split, report in reports.items():
        row = {"epoch": epoch, "split": split, "loss": report.loss, "metric": report.metric}
        for k, ap in report.per_class.items():
            row[str(k)] = ap
        rows.append(row)
    return rows


def _write_metrics(path: str, rows: List[Dict], columns: List[str]) -> None:
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)


# ====== COMMANDS ======

def cmd_gen(config: ExperimentConfig) -> int:
    os.makedirs(config.out, exist_ok=True)
    for split in ("train", "test"):
        dataset = generate(config.scenario(split))
        path = os.path.join(config.out, f"{split}.grfd")
        save_dataset(dataset, path)
        if config.task == "classify":
            summary = f"class histogram {class_histogram(dataset).tolist()}"
        else:
            targets = np.concatenate([s.targets for s in dataset]) if len(dataset) else np.zeros(0)
            summary = f"target range [{targets.min(initial=0.0):.3f}, {targets.max(initial=0.0):.3f}]"
        print(f"✅ {split}: {len(dataset)} sequences, {dataset.num_frames} frames, {summary} -> {path}")
    return 0


def cmd_train(config: ExperimentConfig) -> int:
    train_path = _dataset_path(config, "train")
    train_set = load_dataset(train_path)
    test_path = os.path.join(os.path.dirname(train_path) or ".", "test.grfd")
    eval_sets = {}
    if os.path.isfile(test_path) and os.path.abspath(test_path) != os.path.abspath(train_path):
        eval_sets["test"] = load_dataset(test_path)
    train_config = config.train_config()

    start_epoch, adam, rows = 0, None, []
    if config.checkpoint:
        model = load_checkpoint(config.checkpoint)
        if "train.epoch" not in model.extras:
            raise LoadError("checkpoint carries no training epoch to resume from", field="train.epoch")
        start_epoch = int(model.extras["train.epoch"].item())
        adam = AdamState.from_extras(model.extras, train_config.lr)
        model = FusionModel(model.spec, model.params)
        previous = os.path.join(config.out, "metrics.csv")
        if os.path.isfile(previous):
            frame = pd.read_csv(previous, float_precision="round_trip")
            rows = frame[frame["epoch"] <= start_epoch].to_dict("records")
        print(f"🔄 resuming {model.spec.cell} from epoch {start_epoch}")
    else:
        model = FusionModel.initialise(config.model_spec(), config.seed)
    _check_compatible(model, train_set)
    for split in eval_sets.values():
        _check_compatible(model, split)

    os.makedirs(config.out, exist_ok=True)
    checkpoint_path = os.path.join(config.out, "model.grfu")
    metrics_path = os.path.join(config.out, "metrics.csv")
    columns = metric_columns(config.task, model.spec.out_dim)
    window = {"train.window": np.array([train_config.seq_len, int(train_config.reset_state)], dtype=np.float64)}

    def on_epoch(epoch: int, current: FusionModel, state: AdamState, reports: Dict[str, MetricReport]) -> None:
        rows.extend(metric_rows(epoch, reports))
        _write_metrics(metrics_path, rows, columns)
        extras = {**state.to_extras(), **window, "train.epoch": np.array(float(epoch))}
        save_checkpoint(current, checkpoint_path, extras)

    print(f"🚀 training {model.spec.cell} ({model.count_parameters()} parameters)")
    logger.info("\n" + format_parameter_breakdown(parameter_breakdown(model.spec)))
    if start_epoch >= train_config.epochs:
        extras = {**(adam or AdamState(train_config.lr)).to_extras(), **window,
                  "train.epoch": np.array(float(start_epoch))}
        save_checkpoint(model, checkpoint_path, extras)
        _write_metrics(metrics_path, rows, columns)
        print(f"✅ nothing to train; checkpoint written to {checkpoint_path}")
        return 0

    result = train_tbptt(model, train_set, train_config, eval_sets, on_epoch, start_epoch, adam)
    final = result.history[-1]
    summary = ", ".join(f"{k} {r.metric_name} {r.metric:.4f}" for k, r in final.items())
    print(f"✅ trained {model.spec.cell} to epoch {train_config.epochs}: {summary}")
    return 0


def _model_and_dataset(config: ExperimentConfig) -> Tuple[FusionModel, Dataset]:
    model = load_checkpoint(config.checkpoint or os.path.join(config.out, "model.grfu"))
    dataset = load_dataset(_dataset_path(config, "test"))
    _check_compatible(model, dataset)
    return model, dataset


def cmd_eval(config: ExperimentConfig) -> int:
    model, dataset = _model_and_dataset(config)
    report = evaluate(model, dataset, _window_settings(model, config))
    print(format_metric_report(report, title=f"📊 {model.spec.cell}"))
    os.makedirs(config.out, exist_ok=True)
    epoch = int(model.extras["train.epoch"].item()) if "train.epoch" in model.extras else 0
    _write_metrics(os.path.join(config.out, "eval.csv"), metric_rows(epoch, {"eval": report}),
                   metric_columns(report.task, model.spec.out_dim))
    return 0


def cmd_gates(config: ExperimentConfig) -> int:
    model, dataset = _model_and_dataset(config)
    report = pool_gates(model, dataset, _window_settings(model, config))
    os.makedirs(config.out, exist_ok=True)
    path = os.path.join(config.out, "gates.csv")
    report.to_frame().to_csv(path, index=False)
    print(f"🔍 gate attribution for {model.spec.cell} over {len(dataset)} sequences -> {path}")
    print(format_gate_summary(report.pooled.tolist(), report.breakdown()))
    for row in report.window_breakdown():
        print(f"   sensor {row['sensor']} frames {row['start']}-{row['end']} ({row['mode']}): "
              f"inside {row['inside']:.4f}, outside {row['outside']:.4f}")
    return 0


def gradcheck_loss(config: ExperimentConfig, seed: int):
    """Spec, parameters and scalar loss of a short random window for grad_check."""
    spec = config.model_spec(d_e=config.gradcheck_d_e, d_h=config.gradcheck_d_h)
    params = init_params(spec, seed, scale=GRADCHECK_SCALE)
    rng = np.random.default_rng(seed)
    inputs = [rng.standard_normal((GRADCHECK_STEPS, GRADCHECK_BATCH, d)) for d in spec.sensor_dims]
    if spec.head == "classifier":
        labels = rng.integers(spec.out_dim, size=GRADCHECK_STEPS * GRADCHECK_BATCH)
    else:
        targets = rng.uniform(-0.9, 0.9, size=(GRADCHECK_STEPS * GRADCHECK_BATCH, spec.out_dim))

    def loss(p):
        out = forward_sequence(spec, p, inputs)
        frames = concat(out.outputs, axis=0)
        if spec.head == "classifier":
            return cross_entropy_per_frame(frames, labels)
        return mse_loss(frames, Tensor(targets))

    return spec, params, loss


def cmd_gradcheck(config: ExperimentConfig) -> int:
    spec, params, loss = gradcheck_loss(config, config.seed)
    report = grad_check(loss, params)
    print(format_grad_check(report.per_parameter, GRADCHECK_TOLERANCE))
    if report.passed(GRADCHECK_TOLERANCE):
        print(f"✅ gradient check passed for {spec.cell} (max relative error {report.max_error:.3e})")
        return 0
    print(f"❌ gradient check failed for {spec.cell}: {report.worst()} "
          f"has relative error {report.max_error:.3e}")
    return 1


# ====== BENCH ======

def _bench_variants(config: ExperimentConfig) -> List[Tuple[str, str, int]]:
    """(label, cell, sensor_index); single-sensor baselines run once per sensor."""
    variants = []
    for cell in config.bench_cells:
        if cell == "lstm_single_sensor":
            variants.extend((f"{cell}[{i}]", cell, i) for i in range(len(config.sensor_dims)))
        else:
            variants.append((cell, cell, config.sensor_index))
    return variants


def run_bench(config: ExperimentConfig) -> pd.DataFrame:
    """Generate, train and evaluate every bench variant for seeds 0..bench_seeds-1."""
    rows = []
    for seed in range(config.bench_seeds):
        seeded = config.with_seed(seed)
        train_set = generate(seeded.scenario("train"))
        test_set = generate(seeded.scenario("test"))
        train_config = seeded.train_config()
        for label, cell, sensor_index in _bench_variants(config):
            model = FusionModel.initialise(seeded.model_spec(cell, sensor_index), seed)
            result = train_tbptt(model, train_set, train_config, eval_train=False)
            report = evaluate(result.model, test_set, train_config)
            row = {"cell": label, "seed": seed, "metric": report.metric,
                   "gate_clean": float("nan"), "gate_corrupted": float("nan")}
            if result.model.spec.is_gated and test_set.spec.windows:
                gates = pool_gates(result.model, test_set, train_config)
                corrupted = sorted({w.sensor for w in test_set.spec.windows})
                split = gates.breakdown()
                row["gate_clean"] = float(np.mean([split[i]["clean"] for i in corrupted]))
                row["gate_corrupted"] = float(np.mean([split[i]["corrupted"] for i in corrupted]))
            rows.append(row)
            logger.info(f"bench seed {seed} {label}: {report.metric_name} {report.metric:.4f}")
    return pd.DataFrame(rows, columns=["cell", "seed", "metric", "gate_clean", "gate_corrupted"])


def bench_checks(frame: pd.DataFrame, task: str) -> List[Tuple[str, bool]]:
    """Qualitative orderings between median test metrics, plus the gate attribution check."""
    medians = frame.groupby("cell", sort=False)["metric"].median().to_dict()
    checks = []
    if task == "classify":
        singles = [v for k, v in medians.items() if k.startswith("lstm_single_sensor")]
        best_single = max(singles) if singles else None
        for baseline in ("early_add", "early_concat"):
            if "lgrf" in medians and baseline in medians:
                checks.append((f"lgrf >= {baseline}", medians["lgrf"] >= medians[baseline]))
        if best_single is not None:
            for cell in ("egrf", "lrs", "lgrf"):
                if cell in medians:
                    checks.append((f"{cell} >= best single-sensor lstm", medians[cell] >= best_single))
    elif "lgrf" in medians and "early_concat" in medians:
        checks.append(("lgrf <= early_concat", medians["lgrf"] <= medians["early_concat"]))

    gated = frame[(frame["cell"] == "lgrf") & frame["gate_clean"].notna()]
    if len(gated):
        lower = int((gated["gate_corrupted"] < gated["gate_clean"]).sum())
        needed = math.ceil(0.8 * len(gated))
        checks.append((f"corrupted sensor gated down in {lower}/{len(gated)} seeds", lower >= needed))
    return checks


def bench_comparisons(frame: pd.DataFrame, task: str, reference: str = "lgrf") -> List[Tuple[str, bool]]:
    """
    Every other cell's median against `reference`. Reported only; these do not
    change the bench exit code.
    """
    medians = frame.groupby("cell", sort=False)["metric"].median().to_dict()
    if reference not in medians:
        return []
    better = (lambda a, b: a >= b) if task == "classify" else (lambda a, b: a <= b)
    sign = ">=" if task == "classify" else "<="
    return [(f"{reference} {sign} {cell}", bool(better(medians[reference], value)))
            for cell, value in medians.items() if cell != reference]


def cmd_bench(config: ExperimentConfig) -> int:
    frame = run_bench(config)
    os.makedirs(config.out, exist_ok=True)
    path = os.path.join(config.out, "bench.csv")
    frame.to_csv(path, index=False)
    metric_name = "mAP" if config.task == "classify" else "MSE"
    medians = {cell: median(group["metric"].tolist()) for cell, group in frame.groupby("cell", sort=False)}
    print(format_bench_medians(medians, metric_name))
    for name, ok in bench_comparisons(frame, config.task):
        print(f"{'ℹ️' if ok else '⚠️'}  {name}")
    failed = 0
    for name, ok in bench_checks(frame, config.task):
        print(f"{'✅' if ok else '❌'} {name}")
        failed += not ok
    print(f"📄 bench results -> {path}")
    return 1 if failed else 0


# ====== ENTRY POINT ======

COMMANDS = {
    "gen": (cmd_gen, _config),
    "train": (cmd_train, _config),
    "eval": (cmd_eval, _config_for_checkpoint),
    "gates": (cmd_gates, _config_for_checkpoint),
    "gradcheck": (cmd_gradcheck, _config),
    "bench": (cmd_bench, _config),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grfu", description="Gated recurrent fusion experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="key = value experiment config")
        cmd.add_argument("--seed", type=int, help="overrides the config seed")
        cmd.add_argument("--out", help="output directory")
        cmd.add_argument("--checkpoint", help="model checkpoint (train: resume from it)")
        cmd.add_argument("--dataset", help="dataset file or directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    load_environment()
    try:
        logging.basicConfig(level=log_level_from_env(),
                            format="%(asctime)s - %(levelname)s - %(message)s")
        command, make_config = COMMANDS[args.command]
        config = make_config(args)
        if args.command == "gradcheck" or (args.command == "train" and not config.checkpoint):
            config.require("cell")
        return command(config)
    except (ConfigError, ContractError, LoadError, OSError) as e:
        print(f"❌ {e}")
        return 2
    except (TrainingError, EvaluationError) as e:
        print(f"❌ numerical failure: {e}")
        return 3
