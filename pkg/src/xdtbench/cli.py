"""Command-line orchestration for the transfer benchmark.

Commands::

    xdtbench extract --config exp.cfg --dataset NAME [--out DIR]
    xdtbench extract --synthetic "dim=32,sep=2.0,n=200,seed=1" [--out DIR]
    xdtbench train   --config exp.cfg --dataset NAME [--loss lc] [--lambda X]
    xdtbench matrix  --config exp.cfg [--out DIR]
    xdtbench report  --results results.tsv [--baselines PATH] [--out DIR]

Configuration files are line-oriented ``key = value`` text with one
``[dataset:<name>]`` section per dataset; see the README for every key.
Exit codes: 0 success, 1 usage error, 2 data error, 3 adapter or runtime
error.  Every command writes a provenance block (config hash, seeds, format
versions) alongside its outputs; no output embeds wall-clock time, so reruns
with identical inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import DatasetManifest, SplitSpec, balance_classes, load_manifest, load_split
from .encoder import (
    CACHE_VERSION,
    DEFAULT_ENCODER_DIM,
    EmbeddingSet,
    EncoderAdapter,
    HashEncoderAdapter,
    SyntheticSpec,
    cache_checksum,
    disease_direction,
    extract_embeddings,
    load_cache,
    save_cache,
    synth_embeddings,
)
from .engine import (
    RESULT_COLUMNS,
    TrainConfig,
    TrainedModel,
    read_results,
    split_embedding_set,
    train,
    write_results,
    zero_shot_matrix,
)
from .errors import AdapterError, ConfigError, DataError, XdtError
from .losses import DEFAULT_CE_WEIGHT, DEFAULT_EPSILON, LOSS_KINDS, LossConfig
from .model import CHECKPOINT_VERSION, HeadConfig, save_checkpoint
from .reports import (
    load_baselines,
    load_statistical_best,
    statistical_best_rows,
    write_report_bundle,
    write_statistical_best,
)

_DATASET_SECTION = re.compile(r"^\[dataset:([A-Za-z0-9_.-]+)\]$")

_GLOBAL_KEYS = {
    "output_dir",
    "encoder_id",
    "seed",
    "losses",
    "head.num_layers",
    "head.model_dim",
    "head.num_heads",
    "head.ffn_dim",
    "head.projection_dim",
    "head.num_classes",
    "head.kind",
    "train.learning_rate",
    "train.optimizer",
    "train.batch_size",
    "train.max_epochs",
    "train.patience",
    "loss.epsilon",
    "loss.latent_norm_cap",
    "split.fractions",
    "split.stratified",
}

_DATASET_KEYS = {"manifest", "split", "synthetic", "balance"}


@dataclass
class DatasetConfig:
    name: str
    manifest: Path | None = None
    split: Path | None = None
    synthetic: str | None = None
    balance: bool = False


@dataclass
class ExperimentConfig:
    path: Path
    datasets: list[DatasetConfig] = field(default_factory=list)
    output_dir: Path = Path("runs")
    encoder_id: str = f"hash-sha256-{DEFAULT_ENCODER_DIM}"
    seed: int = 0
    loss_grid: list[LossConfig] = field(default_factory=lambda: [LossConfig(kind="lc")])
    head_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_stratified: bool = True

    def dataset(self, name: str) -> DatasetConfig:
        for d in self.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"{self.path}: no [dataset:{name}] section")

    def head_config(self, model_dim: int | None = None, seed: int | None = None) -> HeadConfig:
        kwargs = dict(self.head_overrides)
        if model_dim is not None and "model_dim" not in kwargs:
            kwargs["model_dim"] = model_dim
        kwargs.setdefault("init_seed", self.seed if seed is None else seed)
        return HeadConfig(**kwargs)

    def train_config(self, loss: LossConfig, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            loss=loss, seed=self.seed if seed is None else seed, **self.train_overrides
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            fractions=self.split_fractions, seed=self.seed, stratified=self.split_stratified
        )


def _parse_bool(raw: str, where: str) -> bool:
    token = raw.strip().lower()
    if token in ("true", "yes", "1"):
        return True
    if token in ("false", "no", "0"):
        return False
    raise ConfigError(f"{where}: expected true/false, got {raw!r}")


def parse_loss_grid(raw: str, epsilon: float, latent_norm_cap: float | None) -> list[LossConfig]:
    """Comma list of loss tokens: ``lc:0.001``, ``lc:0``, ``ec``, ``ce``."""
    grid = []
    for token in raw.split(","):
        token = token.strip()
        if not token:
            continue
        kind, _, weight = token.partition(":")
        kind = kind.strip()
        if kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss token {token!r} (kinds: {', '.join(LOSS_KINDS)})")
        if kind == "lc":
            ce_weight = float(weight) if weight else DEFAULT_CE_WEIGHT
        else:
            ce_weight = 0.0
        grid.append(
            LossConfig(kind=kind, ce_weight=ce_weight, epsilon=epsilon, latent_norm_cap=latent_norm_cap)
        )
    if not grid:
        raise ConfigError("loss grid is empty")
    return grid


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """Parse a ``key = value`` experiment file with [dataset:<name>] sections."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cfg = ExperimentConfig(path=p)
    base = p.parent
    section: DatasetConfig | None = None
    raw_globals: dict[str, str] = {}

    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        m = _DATASET_SECTION.match(text)
        if m:
            name = m.group(1)
            if any(d.name == name for d in cfg.datasets):
                raise ConfigError(f"{p}:{lineno}: duplicate dataset {name!r}")
            section = DatasetConfig(name=name)
            cfg.datasets.append(section)
            continue
        if "=" not in text:
            raise ConfigError(f"{p}:{lineno}: expected key = value")
        key, _, value = text.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{p}:{lineno}"
        if section is None:
            if key not in _GLOBAL_KEYS:
                raise ConfigError(f"{where}: unknown key {key!r}")
            raw_globals[key] = value
        else:
            if key not in _DATASET_KEYS:
                raise ConfigError(f"{where}: unknown dataset key {key!r}")
            if key == "manifest":
                section.manifest = base / value
            elif key == "split":
                section.split = base / value
            elif key == "synthetic":
                section.synthetic = value
            else:
                section.balance = _parse_bool(value, where)

    try:
        if "output_dir" in raw_globals:
            cfg.output_dir = base / raw_globals["output_dir"]
        if "encoder_id" in raw_globals:
            cfg.encoder_id = raw_globals["encoder_id"]
        if "seed" in raw_globals:
            cfg.seed = int(raw_globals["seed"])
        epsilon = float(raw_globals.get("loss.epsilon", DEFAULT_EPSILON))
        cap_raw = raw_globals.get("loss.latent_norm_cap", "")
        cap = float(cap_raw) if cap_raw else None
        cfg.loss_grid = parse_loss_grid(raw_globals.get("losses", "lc:0.001"), epsilon, cap)
        for key, attr in (
            ("head.num_layers", "num_layers"),
            ("head.model_dim", "model_dim"),
            ("head.num_heads", "num_heads"),
            ("head.ffn_dim", "ffn_dim"),
            ("head.projection_dim", "projection_dim"),
            ("head.num_classes", "num_classes"),
        ):
            if key in raw_globals:
                cfg.head_overrides[attr] = int(raw_globals[key])
        if "head.kind" in raw_globals:
            cfg.head_overrides["head_kind"] = raw_globals["head.kind"]
        for key, attr, conv in (
            ("train.learning_rate", "learning_rate", float),
            ("train.optimizer", "optimizer", str),
            ("train.batch_size", "batch_size", int),
            ("train.max_epochs", "max_epochs", int),
            ("train.patience", "patience", int),
        ):
            if key in raw_globals:
                cfg.train_overrides[attr] = conv(raw_globals[key])
        if "split.fractions" in raw_globals:
            parts = [float(x) for x in raw_globals["split.fractions"].split(",")]
            if len(parts) != 3:
                raise ConfigError(f"{p}: split.fractions needs three values")
            cfg.split_fractions = (parts[0], parts[1], parts[2])
        if "split.stratified" in raw_globals:
            cfg.split_stratified = _parse_bool(raw_globals["split.stratified"], str(p))
    except ValueError as exc:
        raise ConfigError(f"{p}: {exc}") from exc

    if not cfg.datasets:
        raise ConfigError(f"{p}: no [dataset:...] sections")
    return cfg


_SYNTH_KEYS = ("dim", "sep", "n", "seed", "spread", "axis", "shared", "name")


def parse_synthetic_spec(raw: str, name: str = "synthetic") -> SyntheticSpec:
    """Parse ``dim=32,sep=2.0,n=200,seed=1[,spread=...,axis=...,shared=...]``.

    The disease cluster sits ``sep`` away from the healthy cluster at the
    origin, along a direction mixing the common disease axis (coordinate 0,
    weight ``shared``) with the dataset's own ``axis`` coordinate.
    """
    values: dict[str, str] = {}
    for chunk in raw.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        key, sep_, value = chunk.partition("=")
        key = key.strip()
        if not sep_ or key not in _SYNTH_KEYS:
            raise ConfigError(f"bad synthetic spec entry {chunk!r} (keys: {', '.join(_SYNTH_KEYS)})")
        values[key] = value.strip()
    if "dim" not in values:
        raise ConfigError("synthetic spec needs dim=<int>")
    try:
        dim = int(values["dim"])
        sep = float(values.get("sep", "2.0"))
        n = int(values.get("n", "200"))
        seed = int(values.get("seed", "0"))
        spread = float(values.get("spread", "0.1"))
        axis = int(values.get("axis", "1"))
        shared = float(values.get("shared", "0.866"))
    except ValueError as exc:
        raise ConfigError(f"bad synthetic spec {raw!r}: {exc}") from exc
    direction = disease_direction(dim, axis, shared)
    return SyntheticSpec(
        dim=dim,
        healthy_center=np.zeros(dim),
        disease_center=sep * direction,
        spread=spread,
        n_per_class=n,
        seed=seed,
        name=values.get("name", name),
    )


def resolve_adapter(encoder_id: str) -> EncoderAdapter:
    """Adapter lookup; hash adapters encode their width in the id."""
    m = re.fullmatch(r"hash-sha256-(\d+)", encoder_id)
    if m:
        return HashEncoderAdapter(encoder_dim=int(m.group(1)))
    raise AdapterError(
        f"no adapter registered for encoder id {encoder_id!r}; "
        "use hash-sha256-<dim> or load precomputed vectors via the API"
    )


def _config_sha256(path: Path | None) -> str:
    if path is None:
        return "-"
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_provenance(out_dir: Path, command: str, entries: dict[str, str]) -> Path:
    lines = [
        f"command = {command}",
        f"package_version = {__version__}",
        f"cache_format_version = {CACHE_VERSION}",
        f"checkpoint_format_version = {CHECKPOINT_VERSION}",
        f"results_columns = {','.join(RESULT_COLUMNS)}",
    ]
    lines.extend(f"{k} = {entries[k]}" for k in sorted(entries))
    path = out_dir / f"provenance-{command}.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _build_embedding_set(cfg: ExperimentConfig, dataset: DatasetConfig) -> EmbeddingSet:
    if dataset.synthetic is not None:
        return synth_embeddings(parse_synthetic_spec(dataset.synthetic, name=dataset.name))
    if dataset.manifest is None:
        raise ConfigError(f"dataset {dataset.name!r} has neither manifest nor synthetic spec")
    manifest = load_manifest(dataset.manifest)
    if manifest.name != dataset.name:
        manifest = DatasetManifest.from_records(dataset.name, manifest.records)
    if dataset.balance:
        manifest = balance_classes(manifest, seed=cfg.seed)
    return extract_embeddings(manifest, resolve_adapter(cfg.encoder_id))


def _ensure_cache(cfg: ExperimentConfig, dataset: DatasetConfig, out_dir: Path) -> tuple[EmbeddingSet, Path]:
    cache_path = out_dir / f"{dataset.name}.xdte"
    if cache_path.is_file():
        cached = load_cache(cache_path)
        if cached.dataset_name != dataset.name:
            raise DataError(
                f"cache {cache_path} holds dataset {cached.dataset_name!r}, expected {dataset.name!r}"
            )
        return cached, cache_path
    built = _build_embedding_set(cfg, dataset)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_cache(built, cache_path)
    return built, cache_path


def _dataset_splits(
    cfg: ExperimentConfig, dataset: DatasetConfig, embedding_set: EmbeddingSet
) -> tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet]:
    if dataset.split is not None:
        assignment = load_split(dataset.split)
        known = set(embedding_set.ids)
        listed = set(assignment.train_ids) | set(assignment.val_ids) | set(assignment.test_ids)
        if listed != known:
            raise DataError(
                f"split file {dataset.split} does not partition dataset {dataset.name!r}"
            )
        return (
            embedding_set.subset(assignment.train_ids),
            embedding_set.subset(assignment.val_ids),
            embedding_set.subset(assignment.test_ids),
        )
    return split_embedding_set(embedding_set, cfg.split_spec())


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_extract(args: argparse.Namespace) -> int:
    if args.synthetic:
        out_dir = Path(args.out) if args.out else Path.cwd()
        out_dir.mkdir(parents=True, exist_ok=True)
        spec = parse_synthetic_spec(args.synthetic, name=args.dataset or "synthetic")
        embedding_set = synth_embeddings(spec)
        cache_path = out_dir / f"{embedding_set.dataset_name}.xdte"
        save_cache(embedding_set, cache_path)
        _write_provenance(
            out_dir,
            "extract",
            {
                "config_sha256": "-",
                "dataset": embedding_set.dataset_name,
                "seed": str(spec.seed),
                "synthetic": args.synthetic,
            },
        )
        print(f"wrote {cache_path} ({len(embedding_set)} x {embedding_set.dim}, crc32 {cache_checksum(cache_path)})")
        return 0
    if not args.config or not args.dataset:
        raise _Usage("extract needs --config and --dataset (or --synthetic)")
    cfg = load_experiment_config(args.config)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = cfg.dataset(args.dataset)
    embedding_set = _build_embedding_set(cfg, dataset)
    cache_path = out_dir / f"{dataset.name}.xdte"
    save_cache(embedding_set, cache_path)
    _write_provenance(
        out_dir,
        "extract",
        {
            "config_sha256": _config_sha256(cfg.path),
            "dataset": dataset.name,
            "seed": str(cfg.seed),
            "encoder_id": embedding_set.encoder_id,
        },
    )
    print(f"wrote {cache_path} ({len(embedding_set)} x {embedding_set.dim}, crc32 {cache_checksum(cache_path)})")
    return 0


def _loss_from_args(cfg: ExperimentConfig, args: argparse.Namespace) -> LossConfig:
    base = cfg.loss_grid[0]
    kind = args.loss or base.kind
    if kind == "lc":
        ce_weight = args.ce_weight if args.ce_weight is not None else (
            base.ce_weight if base.kind == "lc" else DEFAULT_CE_WEIGHT
        )
    else:
        ce_weight = 0.0
    return LossConfig(
        kind=kind, ce_weight=ce_weight, epsilon=base.epsilon, latent_norm_cap=base.latent_norm_cap
    )


def _loss_stem(loss: LossConfig) -> str:
    return f"lc-{loss.ce_weight:g}" if loss.kind == "lc" else loss.kind


def cmd_train(args: argparse.Namespace) -> int:
    if not args.config or not args.dataset:
        raise _Usage("train needs --config and --dataset")
    cfg = load_experiment_config(args.config)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = cfg.dataset(args.dataset)
    embedding_set, _ = _ensure_cache(cfg, dataset, out_dir)
    train_set, val_set, _ = _dataset_splits(cfg, dataset, embedding_set)
    seed = args.seed if args.seed is not None else cfg.seed
    loss = _loss_from_args(cfg, args)
    head_config = cfg.head_config(model_dim=embedding_set.dim, seed=seed)
    train_config = cfg.train_config(loss, seed=seed)
    model = train(train_set, val_set, head_config, train_config)

    stem = f"{dataset.name}-{_loss_stem(loss)}-seed{seed}"
    checkpoint_path = out_dir / f"{stem}.xdtm"
    save_checkpoint(
        model.params,
        checkpoint_path,
        extra={
            "meta.loss": loss.kind,
            "meta.lambda": f"{loss.ce_weight:g}",
            "meta.train_dataset": model.train_dataset,
            "meta.seed": str(seed),
            "meta.selected_epoch": str(model.selected_epoch),
        },
    )
    history_path = out_dir / f"{stem}-history.tsv"
    lines = ["epoch\ttrain_loss\tval_accuracy"]
    lines.extend(f"{h.epoch}\t{repr(h.train_loss)}\t{repr(h.val_accuracy)}" for h in model.history)
    history_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_provenance(
        out_dir,
        "train",
        {
            "config_sha256": _config_sha256(cfg.path),
            "dataset": dataset.name,
            "loss": loss.label(),
            "seed": str(seed),
        },
    )
    best = model.history[model.selected_epoch - 1]
    print(f"wrote {checkpoint_path} (epoch {model.selected_epoch}, val acc {best.val_accuracy:.4f})")
    print(f"wrote {history_path} ({len(model.history)} epochs)")
    return 0


def cmd_matrix(args: argparse.Namespace) -> int:
    if not args.config:
        raise _Usage("matrix needs --config")
    cfg = load_experiment_config(args.config)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.seed

    splits: dict[str, tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet]] = {}
    for dataset in cfg.datasets:
        embedding_set, _ = _ensure_cache(cfg, dataset, out_dir)
        splits[dataset.name] = _dataset_splits(cfg, dataset, embedding_set)

    test_sets = [splits[d.name][2] for d in cfg.datasets]
    results = []
    for loss in cfg.loss_grid:
        models: list[TrainedModel] = []
        for dataset in cfg.datasets:
            train_set, val_set, _ = splits[dataset.name]
            head_config = cfg.head_config(model_dim=train_set.dim, seed=seed)
            models.append(train(train_set, val_set, head_config, cfg.train_config(loss, seed=seed)))
        results.extend(zero_shot_matrix(models, test_sets))

    results_path = out_dir / "results.tsv"
    write_results(results, results_path)
    sb_path = out_dir / "statistical_best.tsv"
    write_statistical_best(statistical_best_rows(test_sets), sb_path)
    _write_provenance(
        out_dir,
        "matrix",
        {
            "config_sha256": _config_sha256(cfg.path),
            "seed": str(seed),
            "datasets": ",".join(d.name for d in cfg.datasets),
            "losses": ",".join(l.label() for l in cfg.loss_grid),
        },
    )
    print(f"wrote {results_path} ({len(results)} rows)")
    print(f"wrote {sb_path}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    if not args.results:
        raise _Usage("report needs --results")
    results_path = Path(args.results)
    results = read_results(results_path)
    baselines = load_baselines(args.baselines) if args.baselines else load_baselines()
    sb_path = results_path.with_name("statistical_best.tsv")
    sb_rows = load_statistical_best(sb_path) if sb_path.is_file() else None
    out_dir = Path(args.out) if args.out else results_path.parent / "report"
    written = write_report_bundle(results, out_dir, baselines=baselines, sb_rows=sb_rows)
    _write_provenance(
        out_dir,
        "report",
        {
            "config_sha256": "-",
            "results_file": results_path.name,
            "results_rows": str(len(results)),
        },
    )
    for path in written:
        print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


class _Usage(Exception):
    """Command-line usage problem (maps to exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="xdtbench", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser) -> None:
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--dataset", help="dataset name from the config")
        p.add_argument("--loss", choices=LOSS_KINDS, help="loss kind override")
        p.add_argument("--lambda", dest="ce_weight", type=float, help="lc prediction-error weight")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--synthetic", help="synthetic dataset spec, e.g. dim=32,sep=2.0,n=200,seed=1")
        p.add_argument("--baselines", help="baseline results file (tsv)")

    for name, func, blurb in (
        ("extract", cmd_extract, "compute and cache embeddings"),
        ("train", cmd_train, "train one head on one dataset"),
        ("matrix", cmd_matrix, "train per dataset and evaluate every pair"),
        ("report", cmd_report, "render tables and plot data from a results file"),
    ):
        p = sub.add_parser(name, help=blurb)
        common(p)
        if name == "report":
            p.add_argument("--results", help="results file to render")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"xdtbench: usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"xdtbench: data error: {exc}", file=sys.stderr)
        return 2
    except XdtError as exc:
        print(f"xdtbench: runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
