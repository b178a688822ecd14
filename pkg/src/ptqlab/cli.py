"""Config-driven experiment orchestration.

One TOML config describes a whole experiment: data, model dims, training,
the quantization grid (bitwidths x calibration schemes), a character-noise
grid, and seeds. Subcommands run the stages:

    prep      generate (or subsample) the corpus CSVs
    train     train one full-precision model and save a checkpoint
    quantize  quantize a checkpoint at every bitwidth with an audit log
    eval      accuracy of a checkpoint on the test set, optionally noised
    sweep     full factorial grid -> results.csv, summary.md, curves/
    ks-report distribution-shift tables for weights and activations
    kde-report token-loss density curves for the generative model

Exit codes: 0 on success, 1 when an experiment stage fails (training
divergence, infeasible calibration plan, no sweep cell survived), 2 on
usage errors (bad flags, missing files, malformed config). Relative
output directories resolve under $PTQLAB_OUTPUT_ROOT when that is set.

Sweep cells run in a worker pool (default one process, which keeps every
result bit-reproducible; more with --workers). Each cell derives its RNG
from (config.seed, cell index), so reruns of a cell are independent of
pool scheduling. Results are written by the parent process only, ordered
by cell index, and rerunning any cell with its recorded seed reproduces
its accuracy exactly on the same machine.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .analysis import (
    REPORT_SITES,
    activation_shift_report,
    kde,
    token_loss_samples,
    weight_shift_report,
)
from .checkpoint import (
    load_checkpoint,
    save_checkpoint,
    save_quantized_checkpoint,
)
from .corpus import (
    CalibrationPlan,
    Dataset,
    NoiseSpec,
    build_vocab,
    corrupt_dataset,
    load_dataset,
    sample_calibration,
    save_dataset_csv,
    split_dataset,
    tokenize_dataset,
)
from .gpfq import collect_layer_inputs, gpfq_refine
from .models import init_disc_model, init_gen_model, predict_batch, train_model
from .nn import DivergenceError, TrainConfig
from .quant import QuantSpec, QuantizedModel, calibrate, quantize_weights
from .synth import PROFILES, generate_rows, rows_to_dataset, write_rows_csv

OUTPUT_ROOT_ENV = "PTQLAB_OUTPUT_ROOT"
FP_BITWIDTH = "fp32"
DEFAULT_NOISE_GRID = (0.0, 0.02, 0.04, 0.06, 0.08, 0.1)
RESULT_COLUMNS = ("experiment", "cell_index", "model_type", "bitwidth",
                  "calib_scheme", "coverage_k", "noise_eps", "seed",
                  "accuracy", "gpfq_before", "gpfq_after")
FAILURE_COLUMNS = ("cell_index", "model_type", "bitwidth", "calib_scheme",
                   "noise_eps", "seed", "error")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, flat so TOML stays trivial.

    Empty dataset paths mean the corpus is generated per seed from the
    named profile; set paths pin one fixed corpus for every seed.
    """

    experiment: str = "exp"
    # data
    train_path: str = ""
    test_path: str = ""
    corpus_profile: str = "default"
    n_train: int = 2000
    n_test: int = 500
    # model
    model_types: tuple[str, ...] = ("disc", "gen")
    vocab_size: int = 5000
    max_len: int = 64
    embedding_dim: int = 64
    hidden_dim: int = 64
    label_dim: int = 64
    # training
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 10
    val_fraction: float = 0.15
    train_noise_eps: float = 0.0
    # quantization grid
    bitwidths: tuple[int, ...] = (8, 7, 6, 5, 4, 3)
    include_fp32: bool = True
    percentile: float = 99.99
    calib_schemes: tuple[str, ...] = ("conditional", "unconditional")
    calib_fraction: float = 0.25
    coverage_k: int = 1
    skip_gpfq: bool = False
    max_refine_rows: int = 20000
    save_quantized: bool = False
    # evaluation grid
    noise_eps: tuple[float, ...] = DEFAULT_NOISE_GRID
    seeds: tuple[int, ...] = (0, 1, 2)
    seed: int = 0
    # execution
    output_dir: str = "runs/exp"
    workers: int = 1

    def __post_init__(self) -> None:
        if self.corpus_profile not in PROFILES:
            raise ValueError(f"unknown corpus profile {self.corpus_profile!r};"
                             f" choose from {sorted(PROFILES)}")
        if not self.model_types:
            raise ValueError("need at least one model type")
        bad = [m for m in self.model_types if m not in ("disc", "gen")]
        if bad:
            raise ValueError(f"unknown model types {bad}; use 'disc' or 'gen'")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if any(not 2 <= b <= 8 for b in self.bitwidths):
            raise ValueError("bitwidths must be in [2, 8]")
        for scheme in self.calib_schemes:
            CalibrationPlan(scheme=scheme, fraction=self.calib_fraction,
                            coverage_k=self.coverage_k)
        if any(e < 0.0 or e > 1.0 for e in self.noise_eps):
            raise ValueError("noise eps must be in [0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


def load_config(path: str | Path | None = None,
                overrides: dict | None = None) -> ExperimentConfig:
    """Config from a TOML file with flag overrides applied on top."""
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    if overrides:
        raw.update(overrides)
    known = {f.name: f for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    coerced = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    return ExperimentConfig(**coerced)


def parse_override(text: str):
    """'key=value' from the command line; values parse as TOML scalars or
    arrays, falling back to a plain string."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, _, raw = text.partition("=")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def config_to_toml(config: ExperimentConfig) -> str:
    """Resolved config as TOML, written next to every run's outputs."""
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        lines.append(f"{f.name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, tuple):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return repr(value)


def resolve_output_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    if not out.is_absolute():
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            out = Path(root) / out
    return out


@dataclass(frozen=True)
class ResultRow:
    """One sweep cell's outcome; accuracy in [0, 1]."""

    experiment: str
    cell_index: int
    model_type: str
    bitwidth: str
    calib_scheme: str
    coverage_k: int | None
    noise_eps: float
    seed: int
    accuracy: float
    gpfq_before: float | None = None
    gpfq_after: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def as_record(self) -> dict:
        rec = dataclasses.asdict(self)
        for key in ("coverage_k", "gpfq_before", "gpfq_after"):
            if rec[key] is None:
                rec[key] = ""
        return rec


# ---------------------------------------------------------------------------
# pipeline stages


def _corpus_spec(config: ExperimentConfig):
    return PROFILES[config.corpus_profile]


def load_experiment_data(config: ExperimentConfig,
                         seed: int) -> tuple[Dataset, Dataset]:
    """Raw train/test splits: from the configured CSVs when set, else
    generated from the corpus profile with this seed."""
    if config.train_path or config.test_path:
        if not (config.train_path and config.test_path):
            raise FileNotFoundError("set both train_path and test_path")
        for p in (config.train_path, config.test_path):
            if not Path(p).exists():
                raise FileNotFoundError(f"dataset not found: {p}")
        train = load_dataset(config.train_path, split="train")
        test = load_dataset(config.test_path, num_classes=train.num_classes,
                            split="test")
        return train, test
    spec = _corpus_spec(config)
    train = rows_to_dataset(generate_rows(config.n_train, seed, spec),
                            "train", spec.num_classes)
    test = rows_to_dataset(
        generate_rows(config.n_test, seed + 1_000_003, spec),
        "test", spec.num_classes)
    return train, test


@dataclass
class PreparedData:
    vocab: object
    train: Dataset
    val: Dataset
    test: Dataset
    raw_train: Dataset
    train_full: Dataset


def prepare_data(config: ExperimentConfig, seed: int) -> PreparedData:
    raw_train, raw_test = load_experiment_data(config, seed)
    vocab = build_vocab(raw_train.texts(), max_size=config.vocab_size)
    train_tok = tokenize_dataset(raw_train, vocab, config.max_len)
    test_tok = tokenize_dataset(raw_test, vocab, config.max_len)
    train_split, val_split = split_dataset(train_tok,
                                           1.0 - config.val_fraction,
                                           seed=seed)
    return PreparedData(vocab=vocab, train=train_split, val=val_split,
                        test=test_tok, raw_train=raw_train,
                        train_full=train_tok)


def train_fp_model(config: ExperimentConfig, model_type: str, seed: int,
                   data: PreparedData):
    """Full-precision training job; returns (model, history)."""
    rng = np.random.default_rng(seed)
    n_classes = data.train.num_classes
    if model_type == "disc":
        model = init_disc_model(data.vocab.size, config.embedding_dim,
                                config.hidden_dim, n_classes, rng)
    else:
        model = init_gen_model(data.vocab.size, config.embedding_dim,
                               config.hidden_dim, n_classes,
                               config.label_dim, rng)
    noise = None
    if config.train_noise_eps > 0:
        noise = NoiseSpec(epsilon=config.train_noise_eps)
    cfg = TrainConfig(learning_rate=config.learning_rate,
                      batch_size=config.batch_size,
                      max_epochs=config.max_epochs,
                      patience=config.patience, seed=seed,
                      train_noise=noise)
    history = train_model(model, data.train, data.val, data.vocab, cfg,
                          max_len=config.max_len)
    return model, history


def quantize_model(config: ExperimentConfig, fp_model, data: PreparedData,
                   bitwidth: int, scheme: str, seed: int,
                   audit=None) -> QuantizedModel:
    """Weight quantization, calibration on the sampled subset, then greedy
    refinement of the final layer unless skip_gpfq is set."""
    log = audit if audit is not None else (lambda msg: None)
    plan = CalibrationPlan(
        scheme=scheme, fraction=config.calib_fraction, seed=seed,
        coverage_k=config.coverage_k if scheme == "coverage" else None)
    # The budget is a fraction of the training corpus, not of the 85%
    # left after the validation carve-out; coverage(1) on a balanced
    # corpus needs exactly one class's worth of documents.
    calib = sample_calibration(data.train_full, plan)
    counts = np.bincount(calib.labels(), minlength=calib.num_classes)
    log(f"bit={bitwidth} scheme={scheme} calibration set: "
        f"{len(calib)} docs, per-class {counts.tolist()}")
    spec = QuantSpec(bitwidth=bitwidth, percentile=config.percentile)
    qm = quantize_weights(fp_model, spec)
    log(f"bit={bitwidth} scheme={scheme} weights quantized: "
        f"{len(qm.weight_params)} tensors, biases untouched")
    calibrate(qm, calib, pad_id=data.vocab.pad_id)
    log(f"bit={bitwidth} scheme={scheme} calibrated sites: "
        f"{sorted(qm.act_params)}")
    if config.skip_gpfq:
        log(f"bit={bitwidth} scheme={scheme} refinement skipped")
        return qm
    acts = collect_layer_inputs(fp_model, qm, calib, pad_id=data.vocab.pad_id,
                                max_rows=config.max_refine_rows)
    gpfq_refine(qm, acts)
    report = qm.gpfq_report
    log(f"bit={bitwidth} scheme={scheme} refined final layer: "
        f"objective {report.objective_before:.6g} -> "
        f"{report.objective_after:.6g} over {report.rows} rows")
    return qm


def evaluate_accuracy(model, test: Dataset, vocab, noise_eps: float,
                      noise_seed, config: ExperimentConfig) -> float:
    """Accuracy of an FP or quantized model on the test split, after
    character noise when noise_eps > 0. The same path serves standalone
    eval and sweep cells, so the two agree bit for bit."""
    data = test
    if noise_eps > 0:
        rng = np.random.default_rng(noise_seed)
        data = corrupt_dataset(test, NoiseSpec(epsilon=noise_eps), rng,
                               vocab, config.max_len)
    tokens = data.token_lists()
    if isinstance(model, QuantizedModel):
        preds = model.predict(tokens, pad_id=vocab.pad_id)
    else:
        if model.model_type == "gen":
            tokens = [t if len(t) >= 2 else t + [vocab.pad_id]
                      for t in tokens]
        preds = predict_batch(model, tokens, pad_id=vocab.pad_id)
    return float(np.mean(preds == data.labels()))


# ---------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class Cell:
    index: int
    model_type: str
    seed: int
    bitwidth: str
    scheme: str
    noise_eps: float


def enumerate_cells(config: ExperimentConfig) -> list[Cell]:
    """The full factorial grid in deterministic order. The fp32 point
    carries no calibration axis, so it contributes one scheme slot."""
    cells = []
    index = 0
    bit_axis: list[tuple[str, tuple[str, ...]]] = []
    if config.include_fp32:
        bit_axis.append((FP_BITWIDTH, ("none",)))
    for b in config.bitwidths:
        bit_axis.append((str(b), tuple(config.calib_schemes)))
    for model_type in config.model_types:
        for seed in config.seeds:
            for bitwidth, schemes in bit_axis:
                for scheme in schemes:
                    for eps in config.noise_eps:
                        cells.append(Cell(index, model_type, seed,
                                          bitwidth, scheme, eps))
                        index += 1
    return cells


def expected_cell_count(config: ExperimentConfig) -> int:
    per_seed = (len(config.bitwidths) * len(config.calib_schemes)
                + (1 if config.include_fp32 else 0)) * len(config.noise_eps)
    return per_seed * len(config.model_types) * len(config.seeds)


def run_training_job(config: ExperimentConfig, model_type: str, seed: int,
                     cells: list[Cell], out_dir: str | None = None):
    """One (model type, seed) unit of sweep work: train once, quantize per
    grid point, evaluate every assigned cell. Returns (rows, failures,
    history). Independent of all other jobs, so jobs can run in separate
    processes; the parent writes all files except checkpoints."""
    rows: list[ResultRow] = []
    failures: list[dict] = []

    def fail(cell: Cell, exc: Exception) -> None:
        failures.append({"cell_index": cell.index,
                         "model_type": cell.model_type,
                         "bitwidth": cell.bitwidth,
                         "calib_scheme": cell.scheme,
                         "noise_eps": cell.noise_eps, "seed": cell.seed,
                         "error": f"{type(exc).__name__}: {exc}"})

    data = prepare_data(config, seed)
    model, history = train_fp_model(config, model_type, seed, data)
    if out_dir is not None:
        path = Path(out_dir) / "checkpoints" / f"{model_type}_s{seed}.json"
        save_checkpoint(path, model, data.vocab,
                        extra={"seed": seed, "experiment": config.experiment})

    by_point: dict[tuple[str, str], list[Cell]] = {}
    for cell in cells:
        by_point.setdefault((cell.bitwidth, cell.scheme), []).append(cell)

    for (bitwidth, scheme), point_cells in by_point.items():
        if bitwidth == FP_BITWIDTH:
            target, before, after = model, None, None
        else:
            try:
                target = quantize_model(config, model, data, int(bitwidth),
                                        scheme, seed)
            except Exception as exc:  # recorded per cell, sweep continues
                for cell in point_cells:
                    fail(cell, exc)
                continue
            report = target.gpfq_report
            before = report.objective_before if report else None
            after = report.objective_after if report else None
        for cell in point_cells:
            try:
                acc = evaluate_accuracy(
                    target, data.test, data.vocab, cell.noise_eps,
                    noise_seed=[config.seed, cell.index], config=config)
                rows.append(ResultRow(
                    experiment=config.experiment, cell_index=cell.index,
                    model_type=model_type, bitwidth=bitwidth,
                    calib_scheme=scheme,
                    coverage_k=(config.coverage_k if scheme == "coverage"
                                else None),
                    noise_eps=cell.noise_eps, seed=seed, accuracy=acc,
                    gpfq_before=before, gpfq_after=after))
            except Exception as exc:
                fail(cell, exc)
    return rows, failures, history


def _job_entry(args):
    return run_training_job(*args)


def run_sweep(config: ExperimentConfig):
    """The full grid; returns (rows, failures, out_dir)."""
    out = resolve_output_dir(config)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    (out / "resolved-config.toml").write_text(config_to_toml(config),
                                              encoding="utf-8")
    cells = enumerate_cells(config)
    jobs = []
    for model_type in config.model_types:
        for seed in config.seeds:
            assigned = [c for c in cells
                        if c.model_type == model_type and c.seed == seed]
            jobs.append((config, model_type, seed, assigned, str(out)))

    rows: list[ResultRow] = []
    failures: list[dict] = []
    histories: dict[tuple[str, int], object] = {}
    if config.workers == 1:
        outcomes = map(_job_entry, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=config.workers)
        outcomes = pool.map(_job_entry, jobs)
    for (_, model_type, seed, _, _), outcome in zip(jobs, outcomes):
        job_rows, job_failures, history = outcome
        rows.extend(job_rows)
        failures.extend(job_failures)
        histories[(model_type, seed)] = history
    if config.workers > 1:
        pool.shutdown()

    rows.sort(key=lambda r: r.cell_index)
    failures.sort(key=lambda f: f["cell_index"])
    write_results_csv(out / "results.csv", rows)
    if failures:
        write_failures_csv(out / "failures.csv", failures)
    for (model_type, seed), history in sorted(histories.items()):
        write_history_csv(
            out / "curves" / f"train_{model_type}_s{seed}.csv", history)
    (out / "summary.md").write_text(summarize(config, rows, failures),
                                    encoding="utf-8")
    return rows, failures, out


def write_results_csv(path: Path, rows: list[ResultRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_record())


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_failures_csv(path: Path, failures: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=FAILURE_COLUMNS)
        writer.writeheader()
        writer.writerows(failures)


def write_history_csv(path: Path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_accuracy"])
        for epoch, (loss, acc) in enumerate(
                zip(history.train_loss, history.val_accuracy), start=1):
            writer.writerow([epoch, f"{loss:.8f}", f"{acc:.6f}"])


def summarize(config: ExperimentConfig, rows: list[ResultRow],
              failures: list[dict]) -> str:
    """Mean and spread of accuracy per grid point, seeds pooled."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = (row.model_type, row.bitwidth, row.calib_scheme, row.noise_eps)
        groups.setdefault(key, []).append(row.accuracy)
    lines = [
        f"# Sweep summary: {config.experiment}",
        "",
        f"- cells: {len(rows)} ok, {len(failures)} failed "
        f"(grid size {expected_cell_count(config)})",
        f"- seeds: {list(config.seeds)}",
        "",
        "| model | bitwidth | calibration | noise eps | mean acc | std | n |",
        "|---|---|---|---|---|---|---|",
    ]
    for key in sorted(groups):
        accs = np.array(groups[key])
        model_type, bitwidth, scheme, eps = key
        lines.append(
            f"| {model_type} | {bitwidth} | {scheme} | {eps:g} "
            f"| {accs.mean():.4f} | {accs.std():.4f} | {accs.size} |")
    lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# reports


def _lowest_bitwidth(config: ExperimentConfig) -> int:
    if not config.bitwidths:
        raise ValueError("config has no bitwidths")
    return min(config.bitwidths)


def ks_report(config: ExperimentConfig):
    """KS distances FP vs quantized at the lowest configured bitwidth:
    per weight group, and per activation site under each calibration
    scheme. Returns (weight_rows, activation_rows, out_dir)."""
    out = resolve_output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seeds[0]
    bitwidth = _lowest_bitwidth(config)
    weight_rows: list[dict] = []
    act_rows: list[dict] = []
    for model_type in config.model_types:
        data = prepare_data(config, seed)
        model, _ = train_fp_model(config, model_type, seed, data)
        probe = Dataset(samples=data.test.samples[:200],
                        num_classes=data.test.num_classes, split="probe")
        for scheme in config.calib_schemes:
            qm = quantize_model(config, model, data, bitwidth, scheme, seed)
            fp_tensors = model.tensors()
            q_tensors = qm.model.tensors()
            groups = {
                "embedding": ("embedding",),
                "lstm_hidden": ("lstm_w_x", "lstm_w_h"),
                "linear": (model.final_layer_name,),
            }
            for site, names in groups.items():
                before = np.concatenate([fp_tensors[n].ravel() for n in names])
                after = np.concatenate([q_tensors[n].ravel() for n in names])
                result = weight_shift_report(before, after)
                weight_rows.append({
                    "model_type": model_type, "bitwidth": bitwidth,
                    "calib_scheme": scheme, "site": site,
                    "ks": f"{result.statistic:.6f}", "n": result.n_a})
            for site in REPORT_SITES:
                result = activation_shift_report(model, qm, probe, site,
                                                 pad_id=data.vocab.pad_id)
                act_rows.append({
                    "model_type": model_type, "bitwidth": bitwidth,
                    "calib_scheme": scheme, "site": site,
                    "ks": f"{result.statistic:.6f}", "n": result.n_a})
    for name, rows in (("ks_weights.csv", weight_rows),
                       ("ks_activations.csv", act_rows)):
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return weight_rows, act_rows, out


KDE_CURVES = ("fp", "lowbit_conditional", "lowbit_unconditional",
              "lowbit_conditional_noise")


def kde_report(config: ExperimentConfig):
    """Token-loss density curves for the generative model: FP, low-bit
    under conditional and unconditional calibration, and low-bit
    conditional on a noised test set. Returns (medians, out_dir)."""
    out = resolve_output_dir(config)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    seed = config.seeds[0]
    bitwidth = _lowest_bitwidth(config)
    noise = max(config.noise_eps) if config.noise_eps else 0.1
    data = prepare_data(config, seed)
    model, _ = train_fp_model(config, "gen", seed, data)
    qm_cond = quantize_model(config, model, data, bitwidth, "conditional",
                             seed)
    qm_uncond = quantize_model(config, model, data, bitwidth,
                               "unconditional", seed)
    noisy = corrupt_dataset(data.test, NoiseSpec(epsilon=noise),
                            np.random.default_rng([config.seed, 1]),
                            data.vocab, config.max_len)
    sources = {
        "fp": (model, data.test),
        "lowbit_conditional": (qm_cond, data.test),
        "lowbit_unconditional": (qm_uncond, data.test),
        "lowbit_conditional_noise": (qm_cond, noisy),
    }
    medians: dict[str, float] = {}
    for name, (m, ds) in sources.items():
        samples = token_loss_samples(m, ds, pad_id=data.vocab.pad_id)
        curve = kde(samples.losses)
        medians[name] = float(np.median(samples.losses))
        with open(out / "curves" / f"kde_{name}.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["loss", "density"])
            for x, y in zip(curve.grid, curve.density):
                writer.writerow([f"{x:.6f}", f"{y:.8f}"])
    with open(out / "kde_medians.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["curve", "median_token_loss"])
        for name in KDE_CURVES:
            writer.writerow([name, f"{medians[name]:.6f}"])
    return medians, out


# ---------------------------------------------------------------------------
# command line


def _load_config_or_die(config_path, overrides) -> ExperimentConfig:
    pairs = {}
    for text in overrides:
        try:
            key, value = parse_override(text)
        except ValueError as exc:
            raise click.UsageError(str(exc))
        pairs[key] = value
    try:
        return load_config(config_path, pairs)
    except FileNotFoundError as exc:
        raise click.UsageError(f"config not found: {exc}")
    except (tomllib.TOMLDecodeError, TypeError, ValueError) as exc:
        raise click.UsageError(f"bad config: {exc}")


config_option = click.option("--config", "-c", "config_path",
                             type=click.Path(), default=None,
                             help="TOML experiment config.")
override_option = click.option("--set", "-s", "overrides", multiple=True,
                               help="Override a config key, key=value.")


@click.group()
def main() -> None:
    """Quantization-lab experiment runner."""


@main.command()
@config_option
@override_option
@click.option("--source", type=click.Path(), default=None,
              help="Existing CSV to subsample instead of generating.")
def prep(config_path, overrides, source) -> None:
    """Write train/test CSVs (generated, or subsampled from --source)."""
    config = _load_config_or_die(config_path, overrides)
    out = resolve_output_dir(config) / "data"
    out.mkdir(parents=True, exist_ok=True)
    train_path = Path(config.train_path) if config.train_path else out / "train.csv"
    test_path = Path(config.test_path) if config.test_path else out / "test.csv"
    if source is not None:
        if not Path(source).exists():
            raise click.UsageError(f"source not found: {source}")
        full = load_dataset(source)
        rng = np.random.default_rng(config.seed)
        order = rng.permutation(len(full.samples))
        n = config.n_train + config.n_test
        if n > len(order):
            raise click.ClickException(
                f"source has {len(order)} rows, need {n}")
        picked = [full.samples[i] for i in order[:n]]
        train = Dataset(picked[:config.n_train], full.num_classes, "train")
        test = Dataset(picked[config.n_train:], full.num_classes, "test")
        save_dataset_csv(train, train_path)
        save_dataset_csv(test, test_path)
    else:
        spec = _corpus_spec(config)
        write_rows_csv(generate_rows(config.n_train, config.seed, spec),
                       train_path)
        write_rows_csv(
            generate_rows(config.n_test, config.seed + 1_000_003, spec),
            test_path)
    click.echo(f"wrote {train_path} ({config.n_train} rows) and "
               f"{test_path} ({config.n_test} rows)")


@main.command()
@config_option
@override_option
@click.option("--model-type", type=click.Choice(["disc", "gen"]),
              default=None, help="Defaults to the config's first entry.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Checkpoint path; default under the output dir.")
def train(config_path, overrides, model_type, out_path) -> None:
    """Train one full-precision model and save its checkpoint."""
    config = _load_config_or_die(config_path, overrides)
    model_type = model_type or config.model_types[0]
    seed = config.seeds[0]
    try:
        data = prepare_data(config, seed)
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc))
    try:
        model, history = train_fp_model(config, model_type, seed, data)
    except DivergenceError as exc:
        raise click.ClickException(f"training diverged: {exc}")
    out = resolve_output_dir(config)
    path = Path(out_path) if out_path else (
        out / "checkpoints" / f"{model_type}_s{seed}.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model, data.vocab,
                    extra={"seed": seed, "experiment": config.experiment})
    (out / "curves").mkdir(parents=True, exist_ok=True)
    write_history_csv(out / "curves" / f"train_{model_type}_s{seed}.csv",
                      history)
    click.echo(f"saved {path}; best val acc "
               f"{history.best_val_accuracy:.4f} "
               f"(epoch {history.best_epoch}/{history.stopped_epoch})")


@main.command()
@config_option
@override_option
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--scheme", default=None,
              help="Calibration scheme; defaults to the config's first.")
def quantize(config_path, overrides, checkpoint, scheme) -> None:
    """Quantize a checkpoint at every configured bitwidth."""
    config = _load_config_or_die(config_path, overrides)
    if not Path(checkpoint).exists():
        raise click.UsageError(f"checkpoint not found: {checkpoint}")
    loaded = load_checkpoint(checkpoint)
    if loaded.vocab is None:
        raise click.ClickException("checkpoint has no vocabulary")
    scheme = scheme or config.calib_schemes[0]
    seed = config.seeds[0]
    try:
        raw_train, raw_test = load_experiment_data(config, seed)
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc))
    vocab = loaded.vocab
    train_tok = tokenize_dataset(raw_train, vocab, config.max_len)
    test_tok = tokenize_dataset(raw_test, vocab, config.max_len)
    data = PreparedData(vocab=vocab, train=train_tok, val=train_tok,
                        test=test_tok, raw_train=raw_train,
                        train_full=train_tok)
    out = resolve_output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    audit_path = out / "audit.log"
    stem = Path(checkpoint).stem
    written = []
    with open(audit_path, "a", encoding="utf-8") as audit_fh:
        start = time.time()

        def audit(msg: str) -> None:
            audit_fh.write(f"[{time.time() - start:8.2f}s] {stem}: {msg}\n")

        for bitwidth in config.bitwidths:
            try:
                qm = quantize_model(config, loaded.model, data, bitwidth,
                                    scheme, seed, audit=audit)
            except ValueError as exc:
                raise click.ClickException(
                    f"calibration failed at {bitwidth}-bit: {exc}")
            path = out / "checkpoints" / f"{stem}_b{bitwidth}_{scheme}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_quantized_checkpoint(path, qm, vocab)
            written.append(path)
    click.echo(f"wrote {len(written)} quantized checkpoints under "
               f"{out / 'checkpoints'}; audit in {audit_path}")


@main.command("eval")
@config_option
@override_option
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--noise-eps", type=float, default=0.0)
def eval_cmd(config_path, overrides, checkpoint, noise_eps) -> None:
    """Test-set accuracy of a (possibly quantized) checkpoint."""
    config = _load_config_or_die(config_path, overrides)
    if not Path(checkpoint).exists():
        raise click.UsageError(f"checkpoint not found: {checkpoint}")
    loaded = load_checkpoint(checkpoint)
    if loaded.vocab is None:
        raise click.ClickException("checkpoint has no vocabulary")
    try:
        _, raw_test = load_experiment_data(config, config.seeds[0])
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc))
    test_tok = tokenize_dataset(raw_test, loaded.vocab, config.max_len)
    acc = evaluate_accuracy(loaded.best, test_tok, loaded.vocab, noise_eps,
                            noise_seed=[config.seed, 0], config=config)
    click.echo(f"accuracy {acc:.4f} (noise eps {noise_eps:g}, "
               f"{len(test_tok)} docs)")


@main.command()
@config_option
@override_option
def sweep(config_path, overrides) -> None:
    """Run the full factorial grid and write results + summary."""
    config = _load_config_or_die(config_path, overrides)
    try:
        rows, failures, out = run_sweep(config)
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc))
    click.echo(f"{len(rows)} cells ok, {len(failures)} failed; "
               f"results under {out}")
    if not rows:
        raise click.ClickException("every sweep cell failed")


@main.command("ks-report")
@config_option
@override_option
def ks_report_cmd(config_path, overrides) -> None:
    """Weight and activation distribution-shift tables."""
    config = _load_config_or_die(config_path, overrides)
    try:
        weight_rows, act_rows, out = ks_report(config)
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc))
    click.echo(f"wrote {out / 'ks_weights.csv'} ({len(weight_rows)} rows) "
               f"and {out / 'ks_activations.csv'} ({len(act_rows)} rows)")


@main.command("kde-report")
@config_option
@override_option
def kde_report_cmd(config_path, overrides) -> None:
    """Token-loss density curves for the generative model."""
    config = _load_config_or_die(config_path, overrides)
    try:
        medians, out = kde_report(config)
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc))
    parts = ", ".join(f"{k}={v:.3f}" for k, v in medians.items())
    click.echo(f"wrote {len(medians)} curves under {out / 'curves'}; "
               f"median token loss {parts}")


if __name__ == "__main__":
    sys.exit(main())
