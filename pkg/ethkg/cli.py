"""
Command-line entry point: train, eval, ablate, analyze and synth.

Configuration precedence, lowest first: dataclass defaults, --preset, the
JSON --config file, explicit flags.
"""

import argparse
from dataclasses import replace
import json
import logging
from pathlib import Path
import sys
from typing import (
    Any,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
)

from rich.console import Console
from rich.table import Table

from ethkg import __version__
from ethkg.analysis import (
    export_diagnostics,
    khs_report,
    summarize_rows,
)
from ethkg.data import (
    TkgDataset,
    load_dataset,
    load_dataset_dir,
    parse_synthetic_spec,
    write_dataset,
)
from ethkg.errors import (
    CheckpointError,
    DataError,
    EthError,
    InvalidArgumentError,
)
from ethkg.evaluation import (
    RankReport,
    evaluate,
    random_baseline_mrr,
)
from ethkg.load_environment import (
    get_env,
    load_environment,
    resolve_data_path,
)
from ethkg.log_setup import configure_logging
from ethkg.model import (
    EthParams,
    load_checkpoint,
    save_checkpoint,
)
from ethkg.system_config import (
    PRESETS,
    BetaMode,
    EthConfig,
    FilterSetting,
    RunConfig,
    preset_config,
)
from ethkg.train import fit


logger = logging.getLogger("ethkg.cli")
console = Console()

CHECKPOINT_NAME = "checkpoint.npz"
TRAIN_LOG_NAME = "train_log.jsonl"
METRICS_HEADER = "MRR  H@1  H@3  H@10"

# Ablation name -> EthConfig overrides; several spellings per mode
ABLATIONS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "-se": {"enable_semantic_encoder": False},
    "-tst": {"enable_tangent_transform": False},
    "-q": {"enable_query_transform": False},
    "beta0": {"beta_mode": BetaMode.FIXED_ZERO},
    "beta1": {"beta_mode": BetaMode.FIXED_ONE},
    "beta-learned": {"beta_mode": BetaMode.PER_RELATION_LEARNED},
}
ABLATION_ALIASES = {
    "β=0": "beta0",
    "beta=0": "beta0",
    "β=1": "beta1",
    "beta=1": "beta1",
    "β-learned": "beta-learned",
    "beta_learned": "beta-learned",
    "beta-learn": "beta-learned",
    "no-se": "-se",
    "no-tst": "-tst",
    "no-q": "-q",
}

# flag destination -> (config section, field)
FLAG_FIELDS: Dict[str, Tuple[str, str]] = {
    "d": ("model", "d"),
    "w": ("model", "w"),
    "layers": ("model", "layers"),
    "gamma": ("model", "gamma_kind"),
    "beta_mode": ("model", "beta_mode"),
    "loss": ("model", "loss_kind"),
    "lr": ("train", "lr"),
    "epochs": ("train", "max_epochs"),
    "patience": ("train", "patience"),
    "seed": ("train", "seed"),
    "dataset": ("paths", "root"),
    "train": ("paths", "train"),
    "valid": ("paths", "valid"),
    "test": ("paths", "test"),
    "stat": ("paths", "stat"),
    "synthetic": ("", "synthetic"),
    "out": ("", "out_dir"),
    "workers": ("", "workers"),
}
LOSS_NAMES = {"softmax": "softmax_ce", "binary": "binary_ce"}


# ---------------------------------------------------------------------------
# Configuration


def parse_m_list(raw: str) -> List[int]:
    """'10,24' -> [10, 24]"""
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise InvalidArgumentError(
            f"--m expects comma-separated integers, got '{raw}'"
        ) from e
    if not values or min(values) < 1:
        raise InvalidArgumentError("--m values must be >= 1")
    return values


def _read_config_file(path: str) -> Dict[str, Any]:
    config_path = Path(path)
    if not config_path.exists():
        raise DataError(f"missing config file: {config_path}")
    try:
        data = json.loads(config_path.read_text())
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"{config_path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"{config_path}: expected a JSON object")
    return data


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, preset, config file and flags into one RunConfig."""
    data = RunConfig().to_dict()
    file_data = _read_config_file(args.config) if args.config else {}

    preset = args.preset or file_data.get("preset")
    if preset:
        data["model"].update(preset_config(preset).to_dict())
        data["preset"] = preset

    for key, value in file_data.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key].update(value)
        else:
            data[key] = value

    for dest, (section, name) in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "loss":
            value = LOSS_NAMES[value]
        target = data[section] if section else data
        target[name] = value
    if args.grad_clip is not None:
        data["train"]["grad_clip_norm"] = args.grad_clip if args.grad_clip > 0 else None

    if args.m is not None:
        grid = parse_m_list(args.m)
        data["model"]["m"] = grid[0]
        data["m_grid"] = grid if len(grid) > 1 else []
    return RunConfig.from_dict(data)


def explicit_model_fields(args: argparse.Namespace) -> List[str]:
    """Model fields set by a flag or the --config file, history length excluded.

    The history length is left out because eval may override it on purpose.
    """
    names = set()
    if args.config:
        model = _read_config_file(args.config).get("model", {})
        if isinstance(model, dict):
            names.update(model)
    for dest, (section, name) in FLAG_FIELDS.items():
        if section == "model" and getattr(args, dest, None) is not None:
            names.add(name)
    known = set(EthConfig().to_dict())
    return sorted((names & known) - {"m"})


def check_checkpoint_config(
    requested: EthConfig, stored: EthConfig, names: Sequence[str], checkpoint: str
) -> None:
    """Raise CheckpointError when an explicitly requested field disagrees."""
    wanted = requested.to_dict()
    found = stored.to_dict()
    mismatched = [name for name in names if wanted[name] != found[name]]
    if mismatched:
        details = ", ".join(
            f"{name}={found[name]!r} (requested {wanted[name]!r})"
            for name in mismatched
        )
        raise CheckpointError(f"{checkpoint} was trained with {details}")


def load_run_checkpoint(
    run: RunConfig, checkpoint: str, dataset: TkgDataset, explicit: Sequence[str]
) -> EthParams:
    params, _ = load_checkpoint(checkpoint, dataset.vocab)
    check_checkpoint_config(run.model, params.config, explicit, checkpoint)
    return params


def write_effective_config(run: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_run_dataset(run: RunConfig) -> TkgDataset:
    """Synthetic spec, dataset directory, or four explicit files."""
    if run.synthetic:
        return parse_synthetic_spec(run.synthetic)
    paths = run.paths
    files = (paths.train, paths.valid, paths.test, paths.stat)
    if paths.root and not any(files):
        return load_dataset_dir(resolve_data_path(paths.root))
    if paths.root:
        root = resolve_data_path(paths.root)
        defaults = ("train.txt", "valid.txt", "test.txt", "stat.txt")
        files = tuple(f or str(root / name) for f, name in zip(files, defaults))
    flags = ("--train", "--valid", "--test", "--stat")
    missing = [flag for flag, f in zip(flags, files) if not f]
    if missing:
        raise DataError(
            f"no dataset given: pass --synthetic, --dataset or {', '.join(missing)}"
        )
    vocab, train, valid, test = load_dataset(*(resolve_data_path(f) for f in files))
    name = Path(files[0]).parent.name or "dataset"
    return TkgDataset(vocab, train, valid, test, name=name)


# ---------------------------------------------------------------------------
# Commands


def _train_one(run: RunConfig, model: EthConfig, dataset: TkgDataset, out_dir: Path):
    params = EthParams.initialize(model, dataset.vocab, seed=run.train.seed)
    result = fit(
        params,
        dataset,
        run.train,
        log_path=out_dir / TRAIN_LOG_NAME,
        checkpoint_path=out_dir / CHECKPOINT_NAME,
        workers=run.workers,
    )
    save_checkpoint(
        out_dir / CHECKPOINT_NAME,
        result.params,
        {"epoch": result.best_epoch, "val_mrr": result.best_val_mrr},
    )
    write_effective_config(replace(run, model=model, m_grid=[]), out_dir)
    return result


def cmd_train(run: RunConfig) -> int:
    dataset = load_run_dataset(run)
    out_dir = Path(run.out_dir)
    grid = run.m_grid or [run.model.m]
    outcomes = []
    for m in grid:
        run_dir = out_dir if len(grid) == 1 else out_dir / f"m{m}"
        result = _train_one(run, replace(run.model, m=m), dataset, run_dir)
        outcomes.append((m, result.best_val_mrr, run_dir))
        print(
            f"m={m}: best epoch {result.best_epoch}, "
            f"val MRR {100.0 * result.best_val_mrr:.2f}, "
            f"checkpoint {run_dir / CHECKPOINT_NAME}"
        )
    if len(grid) > 1:
        best_m, best_mrr, best_dir = max(outcomes, key=lambda o: o[1])
        print(f"best m={best_m} (val MRR {100.0 * best_mrr:.2f}) in {best_dir}")
    write_effective_config(run, out_dir)
    return 0


def print_metrics(report: RankReport, num_entities: int) -> None:
    print(METRICS_HEADER)
    print(report.format_table_row())
    print(f"random baseline MRR {100.0 * random_baseline_mrr(num_entities):.2f}")


def cmd_eval(
    run: RunConfig,
    checkpoint: str,
    setting: str,
    split: str,
    m: Optional[str],
    explicit: Sequence[str] = (),
) -> int:
    dataset = load_run_dataset(run)
    params = load_run_checkpoint(run, checkpoint, dataset, explicit)
    if m is not None:
        params.config = replace(params.config, m=parse_m_list(m)[0])
    report = evaluate(params, dataset, split, FilterSetting(setting), run.workers)
    out_dir = Path(run.out_dir)
    report.write_csv(out_dir / f"ranks_{split}.csv")
    write_effective_config(replace(run, model=params.config), out_dir)
    print_metrics(report, dataset.vocab.num_entities)
    return 0


def parse_ablation_modes(raw: Optional[str]) -> List[str]:
    """Comma-separated ablation names, normalized to canonical spellings."""
    names = [n.strip() for n in (raw or "").split(",") if n.strip()]
    if not names:
        raise InvalidArgumentError("no ablation modes given")
    modes = []
    for name in names:
        canonical = ABLATION_ALIASES.get(name, name)
        if canonical not in ABLATIONS:
            raise InvalidArgumentError(
                f"unknown ablation mode '{name}', expected one of {sorted(ABLATIONS)}"
            )
        modes.append(canonical)
    return modes


def ablation_config(model: EthConfig, mode: str) -> EthConfig:
    return replace(model, **ABLATIONS[mode])


def cmd_ablate(
    run: RunConfig,
    raw_modes: Optional[str],
    checkpoint: Optional[str],
    explicit: Sequence[str] = (),
) -> int:
    modes = parse_ablation_modes(raw_modes)
    dataset = load_run_dataset(run)
    out_dir = Path(run.out_dir)
    rows: List[Tuple[str, RankReport]] = []
    if checkpoint:
        params = load_run_checkpoint(run, checkpoint, dataset, explicit)
        report = evaluate(params, dataset, "test", workers=run.workers)
        rows.append(("checkpoint", report))
    for mode in modes:
        model = ablation_config(run.model, mode)
        run_dir = out_dir / mode.lstrip("-")
        result = _train_one(replace(run, model=model), model, dataset, run_dir)
        report = evaluate(result.params, dataset, "test", workers=run.workers)
        rows.append((mode, report))

    table = Table(title="MRR (%) by ablation")
    for column in ("Mode", "MRR", "H@1", "H@3", "H@10"):
        table.add_column(column, justify="left" if column == "Mode" else "right")
    for mode, report in rows:
        table.add_row(mode, *report.format_table_row().split())
    console.print(table)

    summary = {mode: report.metrics() for mode, report in rows}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_effective_config(run, out_dir)
    return 0


def cmd_analyze(
    run: RunConfig, checkpoint: Optional[str], explicit: Sequence[str] = ()
) -> int:
    dataset = load_run_dataset(run)
    out_dir = Path(run.out_dir)
    if checkpoint:
        params = load_run_checkpoint(run, checkpoint, dataset, explicit)
        diagnostics = export_diagnostics(
            params, dataset, out_dir / "diagnostics", run.workers
        )
        report = diagnostics.khs
        norms = Table(title="Tangent-space norms")
        for column in ("Embedding", "Count", "Mean", "Std", "q05", "q50", "q95"):
            norms.add_column(column)
        for kind, stats in diagnostics.norm_summaries().items():
            quantiles = stats.get("quantiles", {})
            norms.add_row(
                kind,
                str(stats["count"]),
                *(
                    f"{v:.4f}"
                    for v in (
                        stats.get("mean", 0.0),
                        stats.get("std", 0.0),
                        quantiles.get("q05", 0.0),
                        quantiles.get("q50", 0.0),
                        quantiles.get("q95", 0.0),
                    )
                ),
            )
        console.print(norms)
        for name, path in diagnostics.paths.items():
            print(f"{name}: {path}")
    else:
        report = khs_report(dataset)
        report.write_csv(out_dir / "khs.csv")

    table = Table(title=f"Khs over {report.scores.size} snapshots of {dataset.name}")
    table.add_column("Statistic")
    table.add_column("Khs", justify="right")
    for label, value in summarize_rows(report.summary()):
        table.add_row(label, value)
    console.print(table)
    write_effective_config(run, out_dir)
    return 0


def cmd_synth(run: RunConfig) -> int:
    dataset = parse_synthetic_spec(run.synthetic or "cycle")
    path = write_dataset(run.out_dir, dataset)
    print(
        f"wrote {dataset.name}: |V|={dataset.vocab.num_entities} "
        f"|E|={dataset.vocab.num_relations} train={len(dataset.train)} "
        f"valid={len(dataset.valid)} test={len(dataset.test)} to {path}"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser


def _common_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", type=str, help="JSON run configuration file")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="Dataset preset")
    parser.add_argument("--dataset", type=str, help="Dataset directory")
    parser.add_argument("--train", type=str, help="Training quadruples")
    parser.add_argument("--valid", type=str, help="Validation quadruples")
    parser.add_argument("--test", type=str, help="Test quadruples")
    parser.add_argument("--stat", type=str, help="File holding '|V| |E|'")
    parser.add_argument(
        "--synthetic", type=str, help="cycle[:n,r,T,shift] or chain[:n,T]"
    )
    parser.add_argument("--d", type=int, help="Embedding dimension")
    parser.add_argument("--w", type=int, help="Mixing-vector dimension")
    parser.add_argument("--layers", type=int, help="Graph convolution layers")
    parser.add_argument("--m", type=str, help="History length(s), comma separated")
    parser.add_argument(
        "--gamma", choices=["relu", "identity"], help="Tangent activation"
    )
    parser.add_argument(
        "--beta-mode",
        dest="beta_mode",
        choices=[mode.value for mode in BetaMode],
        help="Mixing coefficient source",
    )
    parser.add_argument("--loss", choices=sorted(LOSS_NAMES), help="Training objective")
    parser.add_argument("--lr", type=float, help="Adam learning rate")
    parser.add_argument("--epochs", type=int, help="Maximum training epochs")
    parser.add_argument("--patience", type=int, help="Early-stopping patience")
    parser.add_argument(
        "--grad-clip", dest="grad_clip", type=float, help="Clip norm, 0 disables"
    )
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--out", type=str, help="Output directory")
    parser.add_argument("--workers", type=int, help="Evaluation threads")
    parser.add_argument("--log-level", dest="log_level", type=str, help="Logging level")
    return parser


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="ethkg", description="Hybrid temporal KG extrapolation"
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("train", parents=[common], help="Train a model")

    eval_parser = commands.add_parser("eval", parents=[common], help="Rank a split")
    eval_parser.add_argument("--checkpoint", required=True, help="Checkpoint file")
    eval_parser.add_argument(
        "--filter",
        choices=[s.value for s in FilterSetting],
        default="time",
        help="Filter setting",
    )
    eval_parser.add_argument("--split", choices=["valid", "test"], default="test")

    ablate_parser = commands.add_parser(
        "ablate", parents=[common], help="Compare ablations"
    )
    ablate_parser.add_argument(
        "--ablate",
        dest="modes",
        required=True,
        help=f"Comma list of {', '.join(ABLATIONS)}",
    )
    ablate_parser.add_argument("--checkpoint", help="Also evaluate this checkpoint")

    analyze_parser = commands.add_parser(
        "analyze", parents=[common], help="Khs and checkpoint diagnostics"
    )
    analyze_parser.add_argument("--checkpoint", help="Checkpoint to diagnose")

    commands.add_parser("synth", parents=[common], help="Write a synthetic dataset")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    load_environment()
    try:
        run = build_run_config(args)
        configure_logging(args.log_level or get_env("ETH_LOG_LEVEL"), run.out_dir)
        logger.info(f"ethkg {args.command} -> {run.out_dir}")
        if args.command == "train":
            return cmd_train(run)
        explicit = explicit_model_fields(args)
        if args.command == "eval":
            return cmd_eval(
                run, args.checkpoint, args.filter, args.split, args.m, explicit
            )
        if args.command == "ablate":
            return cmd_ablate(run, args.modes, args.checkpoint, explicit)
        if args.command == "analyze":
            return cmd_analyze(run, args.checkpoint, explicit)
        return cmd_synth(run)
    except EthError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
