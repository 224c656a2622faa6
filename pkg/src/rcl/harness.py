"""Experiment runner: data splits, single runs, the ablation grid and comparisons."""

from __future__ import annotations

import configparser
import io
import logging
import shutil
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from threadpoolctl import threadpool_limits

from .data import Dataset, LongTailProfile, class_centers, gen_gaussian_mixture, make_longtail_counts
from .losses import LossConfig, LossVariant
from .metrics import (
    DegenerateClusteringError,
    MetricsReport,
    calinski_harabasz,
    davies_bouldin,
    evaluate_embeddings,
)
from .model import ModelParams, forward
from .train import (
    CompressionConfig,
    TrainConfig,
    TrainHistory,
    TrainingDiverged,
    fit,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

RUN_FILES = ("config.ini", "metrics.txt", "history.csv", "checkpoint.ckpt", "embeddings.txt")
TABLE1_COMBINATIONS = ("LC", "LC+SCL", "LC+SCL+BCL", "LC+SCL+RCL", "LC+SCL+BCL+RCL")
_TOKENS = ("LC", "SCL", "BCL", "RCL")


class ConfigError(ValueError):
    pass


class RunDirectoryExists(FileExistsError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


class RunFailed(RuntimeError):
    pass


def parse_combination(name: str) -> tuple[str, LossVariant | None]:
    """Canonical name and contrastive variant for a combination like ``LC+SCL+RCL``.

    ``LC`` (the logit-adjusted classifier) is mandatory. ``BCL`` and ``RCL``
    modify the supervised contrastive branch; both together select BCL+RCL.
    """
    tokens = {t.strip().upper() for t in name.split("+") if t.strip()}
    unknown = tokens - set(_TOKENS)
    if unknown:
        raise ConfigError(f"unknown loss component(s) {sorted(unknown)} in {name!r}")
    if "LC" not in tokens:
        raise ConfigError(f"combination {name!r} must include LC")
    if {"BCL", "RCL"} & tokens:
        tokens.add("SCL")
    canonical = "+".join(t for t in _TOKENS if t in tokens)
    if "BCL" in tokens and "RCL" in tokens:
        return canonical, LossVariant.BCL_RCL
    for tok, variant in (("BCL", LossVariant.BCL), ("RCL", LossVariant.RCL),
                         ("SCL", LossVariant.SCL)):
        if tok in tokens:
            return canonical, variant
    return canonical, None


@dataclass
class ExperimentConfig:
    profile: LongTailProfile = field(default_factory=lambda: LongTailProfile(5, 1000, 100.0))
    input_dim: int = 2
    center_scale: float = 3.0
    noise_sigma: float = 1.0
    test_per_class: int = 200
    train: TrainConfig = field(default_factory=TrainConfig)
    combinations: list[str] = field(default_factory=lambda: list(TABLE1_COMBINATIONS))
    seeds: int = 5
    base_seed: int = 0
    output_dir: str = "runs"
    # compression is only ever applied to combinations that include RCL
    compress_rcl: bool = True

    def __post_init__(self) -> None:
        if not self.combinations:
            raise ConfigError("at least one loss combination is required")
        self.combinations = [parse_combination(c)[0] for c in self.combinations]
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")

    def seed_list(self) -> list[int]:
        return [self.base_seed + r for r in range(self.seeds)]

    def strict(self) -> ExperimentConfig:
        """Copy with the literal ``1/|B_y|`` normalizer and the inverted
        compression assignment."""
        loss = replace(self.train.loss_config, strict_paper=True)
        comp = replace(self.train.compression, invert=True)
        return replace(self, train=replace(self.train, loss_config=loss, compression=comp))


# ---------------------------------------------------------------------------
# config file I/O

_SCHEMA: dict[str, dict[str, type]] = {
    "dataset": {"num_classes": int, "max_count": int, "imbalance_factor": float,
                "input_dim": int, "center_scale": float, "noise_sigma": float,
                "test_per_class": int, "jitter_sigma": float},
    "train": {"epochs": int, "batch_size": int, "learning_rate": float, "momentum": float,
              "weight_decay": float, "hidden_dim": int, "feat_dim": int, "embed_dim": int},
    "loss": {"classifier": str, "tau_logit": float, "temperature": float, "alpha": float,
             "beta": float, "strict_paper": bool},
    "compression": {"enabled": bool, "trigger_epoch_fraction": float,
                    "accuracy_threshold": float, "low_factor": float, "invert": bool},
    "experiment": {"combinations": str, "seeds": int, "base_seed": int, "output_dir": str},
    "run": {"combination": str, "seed": int},
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(section: str, key: str, raw: str):
    kind = _SCHEMA[section][key]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def config_to_ini(cfg: ExperimentConfig, run: tuple[str, int] | None = None) -> str:
    t, lc, comp = cfg.train, cfg.train.loss_config, cfg.train.compression
    sections = {
        "dataset": {"num_classes": cfg.profile.num_classes, "max_count": cfg.profile.max_count,
                    "imbalance_factor": float(cfg.profile.imbalance_factor),
                    "input_dim": cfg.input_dim, "center_scale": float(cfg.center_scale),
                    "noise_sigma": float(cfg.noise_sigma),
                    "test_per_class": cfg.test_per_class,
                    "jitter_sigma": float(t.jitter_sigma)},
        "train": {"epochs": t.epochs, "batch_size": t.batch_size,
                  "learning_rate": float(t.learning_rate), "momentum": float(t.momentum),
                  "weight_decay": float(t.weight_decay), "hidden_dim": t.hidden_dim,
                  "feat_dim": t.feat_dim, "embed_dim": t.embed_dim},
        "loss": {"classifier": lc.classifier.value, "tau_logit": float(lc.tau_logit),
                 "temperature": float(lc.temperature), "alpha": float(lc.alpha),
                 "beta": float(lc.beta), "strict_paper": lc.strict_paper},
        "compression": {"enabled": cfg.compress_rcl,
                        "trigger_epoch_fraction": float(comp.trigger_epoch_fraction),
                        "accuracy_threshold": float(comp.accuracy_threshold),
                        "low_factor": float(comp.low_factor), "invert": comp.invert},
        "experiment": {"combinations": ", ".join(cfg.combinations), "seeds": cfg.seeds,
                       "base_seed": cfg.base_seed, "output_dir": cfg.output_dir},
    }
    if run is not None:
        sections["run"] = {"combination": run[0], "seed": run[1]}
    out = io.StringIO()
    for name, values in sections.items():
        out.write(f"[{name}]\n")
        for key, value in values.items():
            out.write(f"{key} = {_fmt(value)}\n")
        out.write("\n")
    return out.getvalue()


def config_from_ini(text: str) -> tuple[ExperimentConfig, tuple[str, int] | None]:
    """Parse a config file. Unknown sections or keys are errors; missing keys
    take their defaults. Returns the config and the ``[run]`` entry, if any."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values.setdefault(section, {})[key] = _parse(section, key, raw)

    d = ExperimentConfig()
    ds, tr = values.get("dataset", {}), values.get("train", {})
    ls, cp = values.get("loss", {}), values.get("compression", {})
    ex = values.get("experiment", {})
    try:
        profile = LongTailProfile(ds.get("num_classes", d.profile.num_classes),
                                  ds.get("max_count", d.profile.max_count),
                                  ds.get("imbalance_factor", d.profile.imbalance_factor))
        loss = LossConfig(**{k: ls[k] for k in ls})
        compression = CompressionConfig(
            enabled=False, **{k: v for k, v in cp.items() if k != "enabled"})
        train_kwargs = {k: tr[k] for k in tr}
        if "jitter_sigma" in ds:
            train_kwargs["jitter_sigma"] = ds["jitter_sigma"]
        train = TrainConfig(loss_config=loss, compression=compression, **train_kwargs)
        combos = ex.get("combinations")
        cfg = ExperimentConfig(
            profile=profile,
            input_dim=ds.get("input_dim", d.input_dim),
            center_scale=ds.get("center_scale", d.center_scale),
            noise_sigma=ds.get("noise_sigma", d.noise_sigma),
            test_per_class=ds.get("test_per_class", d.test_per_class),
            train=train,
            combinations=[c.strip() for c in combos.split(",")] if combos else d.combinations,
            seeds=ex.get("seeds", d.seeds),
            base_seed=ex.get("base_seed", d.base_seed),
            output_dir=ex.get("output_dir", d.output_dir),
            compress_rcl=cp.get("enabled", d.compress_rcl),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    run = None
    if "run" in values:
        run = (parse_combination(values["run"]["combination"])[0], values["run"]["seed"])
    return cfg, run


def load_config(path: str | Path) -> tuple[ExperimentConfig, tuple[str, int] | None]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_ini(text)


# ---------------------------------------------------------------------------
# runs

@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def make_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    """Long-tailed train and validation sets plus a balanced test set.

    All three share the class centers drawn for ``seed``.
    """
    center_seed, train_seed, val_seed, test_seed = np.random.SeedSequence(seed).generate_state(4)
    counts = make_longtail_counts(cfg.profile)
    centers = class_centers(cfg.profile.num_classes, cfg.input_dim, cfg.center_scale,
                            np.random.default_rng(int(center_seed)))

    def draw(c, s):
        return gen_gaussian_mixture(c, cfg.input_dim, cfg.center_scale, cfg.noise_sigma,
                                    int(s), centers=centers)

    test_counts = np.full(cfg.profile.num_classes, cfg.test_per_class)
    return Splits(draw(counts, train_seed), draw(counts, val_seed), draw(test_counts, test_seed))


def train_config_for(cfg: ExperimentConfig, combination: str, seed: int) -> TrainConfig:
    _, variant = parse_combination(combination)
    loss = replace(cfg.train.loss_config, contrastive=variant)
    if variant is None:
        loss = replace(loss, beta=0.0)
    comp = replace(cfg.train.compression,
                   enabled=cfg.compress_rcl and variant is not None and variant.rebalanced)
    return replace(cfg.train, seed=seed, loss_config=loss, compression=comp)


def evaluate(params: ModelParams, dataset: Dataset) -> MetricsReport:
    logits, z, _ = forward(params, dataset.features)
    return evaluate_embeddings(np.argmax(logits, axis=1), dataset.labels, z,
                               dataset.num_classes)


def export_embeddings(params: ModelParams, dataset: Dataset, path: str | Path,
                      layer: str = "contrastive") -> None:
    """One line per instance: ``<label> <z_1> ... <z_K>``, full float precision."""
    _, z, feat = forward(params, dataset.features)
    if layer not in ("contrastive", "feature"):
        raise ValueError(f"unknown layer {layer!r}")
    values = z if layer == "contrastive" else feat
    lines = [" ".join([str(int(y))] + [repr(float(v)) for v in row])
             for y, row in zip(dataset.labels, values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_embeddings(path: str | Path) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    rows = [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip()]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    return labels, np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)


def run_dir_for(cfg: ExperimentConfig, combination: str, seed: int) -> Path:
    canonical, _ = parse_combination(combination)
    return Path(cfg.output_dir) / canonical.replace("+", "_") / f"seed-{seed}"


def _prepare_dir(path: Path, overwrite: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise RunDirectoryExists(f"{path} already holds a run; pass overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


@dataclass
class RunResult:
    combination: str
    seed: int
    run_dir: Path
    report: MetricsReport
    history: TrainHistory
    seconds: float


def run_single(cfg: ExperimentConfig, combination: str, seed: int, *,
               run_dir: str | Path | None = None, overwrite: bool = False) -> RunResult:
    """Generate data, train, evaluate on the balanced test set, write artifacts."""
    canonical, _ = parse_combination(combination)
    path = Path(run_dir) if run_dir is not None else run_dir_for(cfg, canonical, seed)
    _prepare_dir(path, overwrite)
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        splits = make_splits(cfg, seed)
        tcfg = train_config_for(cfg, canonical, seed)
        try:
            state = fit(splits.train, splits.val, tcfg)
        except TrainingDiverged as exc:
            raise RunFailed(f"{canonical} seed {seed}: {exc}") from exc
        report = evaluate(state.params, splits.test)
        (path / "config.ini").write_text(config_to_ini(cfg, (canonical, seed)), encoding="utf-8")
        (path / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
        (path / "history.csv").write_text(state.history.to_csv(), encoding="utf-8")
        save_checkpoint(state, path / "checkpoint.ckpt")
        export_embeddings(state.params, splits.test, path / "embeddings.txt")
    seconds = time.perf_counter() - start
    log.info("%s seed %d: arithmetic %.4f harmonic %.4f (%.1fs)", canonical, seed,
             report.arithmetic_mean, report.harmonic_mean, seconds)
    return RunResult(canonical, seed, path, report, state.history, seconds)


def rerun_from_snapshot(run_dir: str | Path, out_dir: str | Path, overwrite: bool = False
                        ) -> RunResult:
    cfg, run = load_config(Path(run_dir) / "config.ini")
    if run is None:
        raise ConfigError(f"{run_dir}/config.ini has no [run] section")
    return run_single(cfg, run[0], run[1], run_dir=out_dir, overwrite=overwrite)


def load_run_params(run_dir: str | Path) -> ModelParams:
    ckpt = Path(run_dir) / "checkpoint.ckpt"
    if not ckpt.exists():
        raise MissingArtifactError(f"run {run_dir} has no checkpoint")
    return load_checkpoint(ckpt).params


# ---------------------------------------------------------------------------
# ablation

@dataclass
class CellResult:
    combination: str
    seed: int
    report: MetricsReport | None
    seconds: float
    error: str | None = None


@dataclass
class AblationReport:
    combinations: list[str]
    seeds: list[int]
    cells: list[CellResult]

    def cell(self, combination: str, seed: int) -> CellResult:
        for c in self.cells:
            if c.combination == combination and c.seed == seed:
                return c
        raise KeyError((combination, seed))

    def median(self, combination: str, metric: str) -> float:
        vals = [getattr(c.report, metric) for c in self.cells
                if c.combination == combination and c.report is not None]
        return float(statistics.median(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        lines = ["combination,seed,arithmetic,harmonic,chi,dbi,seconds,error"]
        for c in self.cells:
            r = c.report
            nums = ["", "", "", ""] if r is None else [
                repr(r.arithmetic_mean), repr(r.harmonic_mean), repr(r.chi), repr(r.dbi)]
            lines.append(",".join([c.combination, str(c.seed), *nums, f"{c.seconds:.3f}",
                                   (c.error or "").replace(",", ";")]))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Table-1-shaped text: component checkmarks, then median metrics."""
        head = f"{'LC':>3} {'SCL':>4} {'BCL':>4} {'RCL':>4} {'arith':>8} {'harm':>8} " \
               f"{'CHI':>10} {'DBI':>8} {'ok':>4}"
        lines = [head, "-" * len(head)]
        for combo in self.combinations:
            parts = set(combo.split("+"))
            marks = [("x" if t in parts else "-") for t in _TOKENS]
            ok = sum(1 for c in self.cells if c.combination == combo and c.report is not None)
            lines.append(f"{marks[0]:>3} {marks[1]:>4} {marks[2]:>4} {marks[3]:>4} "
                         f"{100 * self.median(combo, 'arithmetic_mean'):8.2f} "
                         f"{100 * self.median(combo, 'harmonic_mean'):8.2f} "
                         f"{self.median(combo, 'chi'):10.2f} {self.median(combo, 'dbi'):8.4f} "
                         f"{ok:>2}/{len(self.seeds)}")
        return "\n".join(lines) + "\n"


def _cell(args: tuple[ExperimentConfig, str, int, bool]) -> CellResult:
    cfg, combo, seed, overwrite = args
    start = time.perf_counter()
    try:
        res = run_single(cfg, combo, seed, overwrite=overwrite)
        return CellResult(combo, seed, res.report, res.seconds)
    except (RunFailed, RunDirectoryExists, DegenerateClusteringError) as exc:
        return CellResult(combo, seed, None, time.perf_counter() - start, str(exc))


def run_ablation(cfg: ExperimentConfig, *, threads: int = 1, overwrite: bool = False
                 ) -> AblationReport:
    """Run every (combination, seed) cell and write ``ablation.txt``/``ablation.csv``.

    Cells are independent and individually deterministic, so running them in
    a process pool changes wall-clock only.
    """
    if len(cfg.combinations) < 1:
        raise ConfigError("ablation needs at least one combination")
    jobs = [(cfg, combo, seed, overwrite) for combo in cfg.combinations
            for seed in cfg.seed_list()]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_cell, jobs))
    else:
        cells = [_cell(job) for job in jobs]
    report = AblationReport(list(cfg.combinations), cfg.seed_list(), cells)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(report.to_table(), encoding="utf-8")
    (out / "ablation.csv").write_text(report.to_csv(), encoding="utf-8")
    return report


def load_ablation(cfg: ExperimentConfig) -> AblationReport:
    """Rebuild the ablation matrix from the per-run metrics files alone."""
    cells = []
    for combo in cfg.combinations:
        for seed in cfg.seed_list():
            metrics = run_dir_for(cfg, combo, seed) / "metrics.txt"
            if metrics.exists():
                report = MetricsReport.from_text(metrics.read_text(encoding="utf-8"))
                cells.append(CellResult(combo, seed, report, 0.0))
            else:
                cells.append(CellResult(combo, seed, None, 0.0, "missing metrics.txt"))
    return AblationReport(list(cfg.combinations), cfg.seed_list(), cells)


# ---------------------------------------------------------------------------
# embedding comparison

@dataclass
class Comparison:
    run_a: str
    run_b: str
    chi_a: float
    chi_b: float
    dbi_a: float
    dbi_b: float

    @property
    def delta_chi(self) -> float:
        return self.chi_b - self.chi_a

    @property
    def delta_dbi(self) -> float:
        return self.dbi_b - self.dbi_a

    def to_text(self) -> str:
        rows = [("run_a", self.run_a), ("run_b", self.run_b),
                ("chi_a", repr(self.chi_a)), ("chi_b", repr(self.chi_b)),
                ("dbi_a", repr(self.dbi_a)), ("dbi_b", repr(self.dbi_b)),
                ("delta_chi", repr(self.delta_chi)), ("delta_dbi", repr(self.delta_dbi))]
        return "".join(f"{k} = {v}\n" for k, v in rows)


def _indices_for(run_dir: Path) -> tuple[float, float]:
    dump = run_dir / "embeddings.txt"
    if not dump.exists():
        raise MissingArtifactError(f"run {run_dir} has no embedding dump ({dump.name})")
    labels, z = read_embeddings(dump)
    return calinski_harabasz(z, labels), davies_bouldin(z, labels)


def compare_embeddings(run_a: str | Path, run_b: str | Path) -> Comparison:
    """CHI/DBI of both runs' held-out embeddings; deltas are ``b - a``."""
    run_a, run_b = Path(run_a), Path(run_b)
    chi_a, dbi_a = _indices_for(run_a)
    chi_b, dbi_b = _indices_for(run_b)
    return Comparison(str(run_a), str(run_b), chi_a, chi_b, dbi_a, dbi_b)
