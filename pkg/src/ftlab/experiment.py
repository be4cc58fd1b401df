"""Experiment configs, run directories, sweeps and the comparison report.

A run directory holds content files that depend only on (config, seed):
``config.json``, ``trace.jsonl``, ``vocab.json``, ``model.ckpt``. Wall-clock
data lives in the sidecars ``timing.jsonl`` and ``run.log``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import hpo
from . import tensor as T
from .data import SPLITS, build_vocab, read_splits, synthetic_splits, template_texts
from .lora import LoraConfig, inject
from .model import ModelConfig, build_model, save_checkpoint
from .training import (
    STRATEGIES,
    DistillConfig,
    MetricsTrace,
    TaskData,
    TrainConfig,
    TrainingError,
    make_teacher,
    read_trace,
    train,
)

log = logging.getLogger(__name__)

METHOD_LABELS = {
    "vft": "Vanilla",
    "pbft": "PBFT",
    "cd": "Context Distillation",
    "vft_lora": "VFT-LoRA",
    "pbft_lora": "PBFT-LoRA",
}

MB = 1024 * 1024


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class ReportError(RuntimeError):
    pass


@dataclass
class DataConfig:
    synthetic: bool = True
    n: int = 2000  # synthetic train size; each eval split gets n // 4
    dir: str | None = None  # prepared splits (train/id_eval/ood_eval.jsonl)


@dataclass
class ExperimentConfig:
    strategy: str = "vft"
    name: str | None = None  # report label; defaults to the strategy's
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig | None = None
    lora: LoraConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)
    space: str | None = None
    sampler: str = "tpe"
    n_trials: int = 50
    seed: int = 0
    out: str = "runs/experiment"

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = asdict(self.model)
        d["train"] = asdict(self.train)
        d["data"] = asdict(self.data)
        d["distill"] = asdict(self.distill) if self.distill else None
        d["lora"] = self.lora.to_dict() if self.lora else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            sections = {
                "model": ModelConfig(**d.pop("model", {})),
                "train": TrainConfig(**d.pop("train", {})),
                "data": DataConfig(**d.pop("data", {})),
            }
            distill = d.pop("distill", None)
            lora = d.pop("lora", None)
            sections["distill"] = DistillConfig(**distill) if distill is not None else None
            sections["lora"] = LoraConfig.from_dict({**LoraConfig().to_dict(), **lora}) if lora is not None else None
        except TypeError as e:
            raise ConfigError(f"bad config section: {e}") from None
        return cls(**d, **sections)

    def resolved(self) -> ExperimentConfig:
        """The config with the top-level seed pushed into the train section."""
        return replace(self, train=replace(self.train, seed=self.seed))

    def run_id(self) -> str:
        body = {k: v for k, v in self.resolved().to_dict().items() if k != "out"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    def validate(self) -> None:
        try:
            self._validate()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def _validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.strategy == "cd" and self.distill is None:
            raise ConfigError("strategy cd needs a 'distill' section")
        if self.strategy.endswith("_lora") and self.lora is None:
            raise ConfigError(f"strategy {self.strategy} needs a 'lora' section")
        if self.strategy in ("pbft", "pbft_lora") and self.train.template is None:
            raise ConfigError(f"strategy {self.strategy} needs train.template")
        if self.strategy in ("vft", "vft_lora") and self.train.template is not None:
            raise ConfigError(f"strategy {self.strategy} does not take train.template")
        self.model.validate()
        self.train.validate()
        if self.distill:
            self.distill.validate()
        if self.lora:
            self.lora.validate(self.model.d_model)
        if self.data.synthetic:
            if self.data.n < 8:
                raise ConfigError("data.n must be at least 8")
        elif self.data.dir is None:
            raise ConfigError("data needs either synthetic=true or a dir")
        else:
            for split in SPLITS:
                path = Path(self.data.dir) / f"{split}.jsonl"
                if not path.is_file():
                    raise ConfigError(f"missing data file {path}")
        if self.sampler not in ("tpe", "random"):
            raise ConfigError("sampler must be 'tpe' or 'random'")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        if self.space is not None:
            space = get_space(self.space)
            current = extract_assignment(self, space)
            try:
                space.check(current)
            except ValueError as e:
                raise ConfigError(f"config is outside {self.space}: {e}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# search-space names to config fields

# "dropout" drives both hidden and attention dropout
FIELD_MAP = {
    "num_epochs": [("train", "epochs")],
    "epochs": [("train", "epochs")],
    "batch_size": [("train", "batch_size")],
    "learning_rate": [("train", "learning_rate")],
    "optimizer": [("train", "optimizer")],
    "warmup_ratio": [("train", "warmup_ratio")],
    "k_per_class": [("train", "k_per_class")],
    "template": [("train", "template")],
    "hidden_dropout": [("train", "hidden_dropout")],
    "attention_dropout": [("train", "attention_dropout")],
    "dropout": [("train", "hidden_dropout"), ("train", "attention_dropout")],
    "rank": [("lora", "rank")],
    "alpha": [("lora", "alpha")],
    "lora_dropout": [("lora", "dropout")],
    "temperature": [("distill", "temperature")],
    "distill_weight": [("distill", "distill_weight")],
}


def get_space(name: str) -> hpo.SearchSpace:
    spaces = hpo.builtin_spaces()
    if name not in spaces:
        raise ConfigError(f"unknown space {name!r}; choose from {sorted(spaces)}")
    return spaces[name]


def _section(cfg: ExperimentConfig, section: str, param: str):
    obj = getattr(cfg, section)
    if obj is None:
        raise ConfigError(f"parameter {param} needs a '{section}' section")
    return obj


def extract_assignment(cfg: ExperimentConfig, space: hpo.SearchSpace) -> dict:
    """Current config values for every parameter of ``space``."""
    out = {}
    for name in space.names:
        if name not in FIELD_MAP:
            raise ConfigError(f"space parameter {name} has no config field")
        section, attr = FIELD_MAP[name][0]
        value = getattr(_section(cfg, section, name), attr)
        if value is None and attr in ("hidden_dropout", "attention_dropout"):
            value = getattr(cfg.model, attr)
        out[name] = value
    return out


def apply_assignment(cfg: ExperimentConfig, assignment: dict) -> ExperimentConfig:
    sections = {"train": cfg.train, "lora": cfg.lora, "distill": cfg.distill}
    for name, value in assignment.items():
        if name not in FIELD_MAP:
            raise ConfigError(f"space parameter {name} has no config field")
        for section, attr in FIELD_MAP[name]:
            _section(cfg, section, name)
            if section == "lora" and attr == "alpha":
                value = float(value)
            sections[section] = replace(sections[section], **{attr: value})
    return replace(cfg, **sections)


# ---------------------------------------------------------------------------
# runs


def load_task_data(cfg: ExperimentConfig) -> TaskData:
    if cfg.data.synthetic:
        splits = synthetic_splits(cfg.data.n, cfg.seed)
    else:
        splits = read_splits(cfg.data.dir)
    vocab = build_vocab(splits.train, 1, template_texts(), max_size=cfg.model.vocab_size)
    return TaskData(splits.train, splits.id_eval, splits.ood_eval, vocab)


def _hyperparameters(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    return {k: d[k] for k in ("model", "train", "distill", "lora") if d[k] is not None}


class _RunLog:
    """Attach a timestamped file handler to the package logger for one run."""

    def __init__(self, path: Path):
        self.handler = logging.FileHandler(path, mode="w", encoding="utf-8")
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        self.logger = logging.getLogger("ftlab")

    def __enter__(self):
        self.logger.addHandler(self.handler)
        self._level = self.logger.level
        if self.logger.getEffectiveLevel() > logging.INFO:
            self.logger.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        self.logger.removeHandler(self.handler)
        self.logger.setLevel(self._level)
        self.handler.close()


@dataclass
class RunResult:
    out_dir: Path
    trace: MetricsTrace
    objective: float  # max ID accuracy over epochs
    max_ood: float


def run_training(cfg: ExperimentConfig, out_dir=None, data: TaskData | None = None) -> RunResult:
    """Train one model per ``cfg`` and write its run directory."""
    cfg = cfg.resolved()
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.run_id()
    with _RunLog(out / "run.log"):
        log.info("run %s strategy %s -> %s", run_id, cfg.strategy, out)
        (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        data = data if data is not None else load_task_data(cfg)
        (out / "vocab.json").write_text(data.vocab.to_json() + "\n", encoding="utf-8")

        init_seq, lora_seq, teacher_seq = np.random.SeedSequence(cfg.seed).spawn(3)
        model = build_model(replace(cfg.model), np.random.Generator(np.random.PCG64(init_seq)))
        extra = {"run_id": run_id}
        if cfg.strategy.endswith("_lora"):
            inject(model, cfg.lora, np.random.Generator(np.random.PCG64(lora_seq)))
            extra["init_frozen_sha256"] = model.frozen_hash()
        teacher = None
        if cfg.strategy == "cd":
            teacher_rng = np.random.Generator(np.random.PCG64(teacher_seq))
            teacher = make_teacher(data, lambda: build_model(replace(cfg.model), teacher_rng), cfg.train, cfg.distill)

        trace = train(
            model,
            data,
            cfg.train,
            cfg.strategy,
            dc=cfg.distill,
            teacher=teacher,
            run_id=run_id,
            hyperparameters=_hyperparameters(cfg),
            trace_path=out / "trace.jsonl",
            timing_path=out / "timing.jsonl",
            method=cfg.name,
        )
        save_checkpoint(model, out / "model.ckpt", extra=extra)
        objective = max(r.id_acc for r in trace.records)
        max_ood = max(r.ood_acc for r in trace.records)
        log.info("run %s done: max id %.4f max ood %.4f", run_id, objective, max_ood)
    return RunResult(out, trace, objective, max_ood)


def run_optimize(cfg: ExperimentConfig, out_dir=None) -> tuple[hpo.Trial, list[hpo.Trial]]:
    """Sequential search over ``cfg.space``; the objective is max ID accuracy.

    Every trial trains with the same seed, so the written best config replays
    its stored objective exactly.
    """
    cfg = cfg.resolved()
    cfg.validate()
    if cfg.space is None:
        raise ConfigError("optimize needs a 'space' name")
    space = get_space(cfg.space)
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_task_data(cfg)

    def objective(assignment: dict, trial_id: int):
        trial_cfg = apply_assignment(cfg, assignment)
        try:
            res = run_training(trial_cfg, out / "trials" / f"{trial_id:04d}", data=data)
        except ValueError as e:
            # an infeasible combination (say, more shots than examples) fails the trial only
            raise TrainingError(f"trial {trial_id}: {e}") from e
        return res.objective, {"max_ood": res.max_ood, "run_id": res.trace.run_id}

    with _RunLog(out / "optimize.log"):
        best, trials = hpo.optimize(
            space,
            objective,
            cfg.n_trials,
            T.make_rng(cfg.seed),
            sampler=cfg.sampler,
            store_path=out / "trials.jsonl",
            seed=cfg.seed,
        )
        best_cfg = replace(apply_assignment(cfg, best.assignment), out=str(out / "best"))
        (out / "best_config.json").write_text(best_cfg.to_json(), encoding="utf-8")
        log.info("best trial %d objective %.4f", best.id, best.objective)
    return best, trials


# ---------------------------------------------------------------------------
# report


def find_traces(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_file():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(p.rglob("trace.jsonl")))
        else:
            raise ReportError(f"no such file or directory: {p}")
    if not found:
        raise ReportError("no traces found")
    return found


def load_traces(paths) -> list[MetricsTrace]:
    traces = []
    for path in find_traces(paths):
        timing = path.with_name("timing.jsonl")
        traces.append(read_trace(path, timing if timing.is_file() else None))
    return traces


def method_label(trace: MetricsTrace) -> str:
    return trace.method or METHOD_LABELS.get(trace.strategy, trace.strategy)


def summarize(traces) -> list[dict]:
    """One row per method (first-seen order), maxima over every epoch of every trace."""
    rows: dict[str, dict] = {}
    for tr in traces:
        if not tr.records:
            continue
        row = rows.setdefault(method_label(tr), {"id": 0.0, "ood": 0.0, "time": None, "mem": 0})
        row["id"] = max(row["id"], *(r.id_acc for r in tr.records))
        row["ood"] = max(row["ood"], *(r.ood_acc for r in tr.records))
        times = [r.iter_time_s for r in tr.records if r.iter_time_s is not None]
        if times:
            row["time"] = max(times + ([row["time"]] if row["time"] is not None else []))
        row["mem"] = max(row["mem"], *(r.mem_bytes for r in tr.records))
    if not rows:
        raise ReportError("traces contain no epochs")
    return [{"method": k, **v} for k, v in rows.items()]


TABLES = (
    (
        "Table 1: Accuracy comparison of methods (Max In-Domain / Max Out-Domain)",
        ("Method", "Max In-Domain", "Max Out-Domain"),
        lambda r: (f"{r['id']:.4f}", f"{r['ood']:.4f}"),
    ),
    (
        "Table 2: Efficiency comparison of methods (Max Iteration Time / Max Memory Usage)",
        ("Method", "Max Iteration Time (s)", "Max Memory Usage (MB)"),
        lambda r: (f"{r['time']:.4f}" if r["time"] is not None else "n/a", f"{r['mem'] / MB:.4f}"),
    ),
)
REPORT_FORMATS = ("markdown", "tsv")


def _markdown(title: str, header, body) -> str:
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([title, "", line(header), rule, *(line(r) for r in body)])


def _tsv(title: str, header, body) -> str:
    return "\n".join(["\t".join(header), *("\t".join(r) for r in body), "", title])


def format_report(rows: list[dict], fmt: str = "markdown") -> str:
    """Both tables, 4 decimals; ``tsv`` is tab-separated with the title after the rows."""
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}")
    render = _markdown if fmt == "markdown" else _tsv
    tables = [render(title, header, [[r["method"], *cells(r)] for r in rows]) for title, header, cells in TABLES]
    return "\n\n".join(tables) + "\n"


CURVE_FIELDS = ("method", "run_id", "strategy", "epoch", "loss", "id_acc", "ood_acc", "iter_time_s", "mem_bytes")


def write_curves(traces, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for tr in traces:
            for r in tr.records:
                w.writerow([method_label(tr), tr.run_id, tr.strategy, r.epoch, repr(r.loss), r.id_acc, r.ood_acc,
                            r.iter_time_s, r.mem_bytes])  # fmt: skip


def report(paths, curves_path=None, fmt: str = "markdown") -> str:
    traces = load_traces(paths)
    if curves_path is not None:
        write_curves(traces, curves_path)
    return format_report(summarize(traces), fmt)
