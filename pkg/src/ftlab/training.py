"""Optimizers, LR schedule, distillation loss and the training loop for all strategies."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import TEMPLATES, Example, Vocab, encode, render
from .model import TransformerClassifier, forward, trainable_parameters
from .tensor import Tensor, memory

log = logging.getLogger(__name__)

STRATEGIES = ("vft", "pbft", "vft_lora", "pbft_lora", "cd")
OPTIMIZERS = ("sgd", "adam", "adamw")
BETAS = (0.9, 0.999)
EPS = 1e-8


class TrainingError(RuntimeError):
    """Training aborted; the message carries the epoch/step context."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    warmup_ratio: float = 0.0
    hidden_dropout: float | None = None
    attention_dropout: float | None = None
    lora_dropout: float | None = None
    max_seq_len: int = 64
    k_per_class: int | None = None
    template: str | None = None
    scratchpad: bool = False  # append the reasoning cue to every prompt (cd teachers)
    seed: int = 0
    eval_batch_size: int = 64

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.warmup_ratio <= 0.2:
            raise ValueError("warmup_ratio must be in [0, 0.2]")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.k_per_class is not None and self.k_per_class < 1:
            raise ValueError("k_per_class must be positive")
        if self.template is not None and self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")


@dataclass
class DistillConfig:
    temperature: float = 2.0
    distill_weight: float = 0.5
    teacher_init: str = "finetuned"  # or "random": a frozen, untrained twin
    teacher_epochs: int | None = None

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.distill_weight <= 1.0:
            raise ValueError("distill_weight must be in [0, 1]")
        if self.teacher_init not in ("finetuned", "random"):
            raise ValueError("teacher_init must be 'finetuned' or 'random'")


# ---------------------------------------------------------------------------
# optimizers


def init_state(params: Sequence[np.ndarray], kind: str) -> dict:
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {kind!r}")
    state = {"t": 0}
    if kind != "sgd":
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    return state


def optimizer_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: dict,
    kind: str,
    lr: float,
    weight_decay: float = 0.0,
) -> list[np.ndarray]:
    """One update; returns new parameter arrays and advances ``state`` in place.

    adam folds weight decay into the gradient (L2); adamw applies it to the
    weights directly, decoupled from the moment estimates.
    """
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
    state["t"] += 1
    if kind == "sgd":
        return [p - lr * (g + weight_decay * p if weight_decay else g) for p, g in zip(params, grads)]
    b1, b2 = BETAS
    t = state["t"]
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if kind == "adam" and weight_decay:
            g = g + weight_decay * p
        m = state["m"][i] = b1 * state["m"][i] + (1.0 - b1) * g
        v = state["v"][i] = b2 * state["v"][i] + (1.0 - b2) * (g * g)
        if kind == "adamw" and weight_decay:
            p = p - lr * weight_decay * p
        out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + EPS))
    return out


class Optimizer:
    """Stateful wrapper applying :func:`optimizer_step` to Tensor parameters."""

    def __init__(self, params: Sequence[Tensor], kind: str = "adamw", weight_decay: float = 0.0):
        self.params = list(params)
        self.kind = kind
        self.weight_decay = weight_decay
        self.state = init_state([p.data for p in self.params], kind)
        self._bytes = self.state_bytes()
        memory.allocate(self._bytes)

    def __del__(self):
        memory.release(self._bytes)

    def state_bytes(self) -> int:
        return sum(a.nbytes for key in ("m", "v") for a in self.state.get(key, ()))

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = optimizer_step([p.data for p in self.params], grads, self.state, self.kind, lr, self.weight_decay)
        for p, data in zip(self.params, new):
            p.data = data

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, total_steps: int, warmup_ratio: float, peak_lr: float) -> float:
    """Linear warmup 0 -> peak over ceil(ratio * total) steps, then linear decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


# ---------------------------------------------------------------------------
# losses


def distill_terms(student_logits: Tensor, teacher_logits, labels, dc: DistillConfig) -> tuple[Tensor, Tensor]:
    """Cross-entropy against labels and KL(teacher || student) at temperature T."""
    dc.validate()
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=float)
    if teacher.shape != student_logits.shape:
        raise ValueError(f"teacher/student logits shape mismatch: {teacher.shape} vs {student_logits.shape}")
    return T.cross_entropy(student_logits, labels), T.kl_divergence(teacher, student_logits, dc.temperature)


def distill_loss(student_logits: Tensor, teacher_logits, labels, dc: DistillConfig) -> Tensor:
    """(1 - w) * CE(student, labels) + w * T^2 * KL(softmax(teacher/T) || softmax(student/T))."""
    ce, kl = distill_terms(student_logits, teacher_logits, labels, dc)
    w, temp = dc.distill_weight, dc.temperature
    return T.add(T.scale(ce, 1.0 - w), T.scale(kl, w * temp * temp))


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class EncodedSet:
    ids: np.ndarray  # [N, max_len]
    mask: np.ndarray  # [N, max_len]
    labels: np.ndarray  # [N]

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, rows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ids, mask = self.ids[rows], self.mask[rows]
        width = max(1, int(mask.sum(axis=1).max()))
        return ids[:, :width], mask[:, :width], self.labels[rows]


def encode_examples(
    examples: Sequence[Example],
    vocab: Vocab,
    max_len: int,
    template: str | None = None,
    scratchpad: bool = False,
) -> EncodedSet:
    if not examples:
        raise ValueError("dataset is empty")
    pairs = [encode(vocab, render(ex.sentence, template, scratchpad), max_len) for ex in examples]
    return EncodedSet(
        ids=np.stack([p[0] for p in pairs]),
        mask=np.stack([p[1] for p in pairs]),
        labels=np.array([ex.label for ex in examples], dtype=np.int64),
    )


@dataclass
class TaskData:
    train: list[Example]
    id_eval: list[Example]
    ood_eval: list[Example]
    vocab: Vocab


def predict(model: TransformerClassifier, data: EncodedSet, batch_size: int = 64) -> np.ndarray:
    preds = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            ids, mask, _ = data.batch(slice(start, start + batch_size))
            preds.append(np.argmax(forward(model, ids, mask, train_mode=False).data, axis=1))
    return np.concatenate(preds)


def evaluate(model: TransformerClassifier, data: EncodedSet, batch_size: int = 64) -> float:
    """Fraction of argmax-correct predictions in eval mode."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, data, batch_size) == data.labels))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    id_acc: float
    ood_acc: float
    iter_time_s: float
    mem_bytes: int
    kl: float | None = None  # cd only; kept in memory, not persisted


@dataclass
class MetricsTrace:
    run_id: str
    strategy: str
    hyperparameters: dict = field(default_factory=dict)
    records: list[EpochRecord] = field(default_factory=list)
    method: str | None = None  # display name for reports; defaults to the strategy's

    def append(self, rec: EpochRecord) -> None:
        if not (0.0 <= rec.id_acc <= 1.0 and 0.0 <= rec.ood_acc <= 1.0):
            raise ValueError("accuracy outside [0, 1]")
        self.records.append(rec)

    def header_line(self) -> str:
        head = {"run_id": self.run_id, "strategy": self.strategy, "hyperparameters": self.hyperparameters}
        if self.method is not None:
            head["method"] = self.method
        return json.dumps(head, sort_keys=True)

    def record_line(self, rec: EpochRecord, with_time: bool = True) -> str:
        return json.dumps(
            {
                "run_id": self.run_id,
                "strategy": self.strategy,
                "epoch": rec.epoch,
                "loss": rec.loss,
                "id_acc": rec.id_acc,
                "ood_acc": rec.ood_acc,
                "iter_time_s": rec.iter_time_s if with_time else None,
                "mem_bytes": rec.mem_bytes,
            }
        )

    def write(self, path, timing_path=None) -> None:
        """Persist the trace.

        Wall-clock time is host-dependent. With ``timing_path`` set, epoch times
        go to that sidecar and the trace carries ``null``, so the trace file
        itself is byte-reproducible.
        """
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.header_line() + "\n")
            for rec in self.records:
                f.write(self.record_line(rec, with_time=timing_path is None) + "\n")
        if timing_path is not None:
            with open(timing_path, "w", encoding="utf-8", newline="\n") as f:
                for rec in self.records:
                    f.write(json.dumps({"epoch": rec.epoch, "iter_time_s": rec.iter_time_s}) + "\n")


def read_trace(path, timing_path=None) -> MetricsTrace:
    """Load a trace; epoch times missing from it are filled from ``timing_path`` if given."""
    with open(path, encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines:
        raise ValueError(f"{path}: empty trace")
    times = {}
    if timing_path is not None:
        with open(timing_path, encoding="utf-8") as f:
            times = {d["epoch"]: d["iter_time_s"] for d in (json.loads(line) for line in f if line.strip())}
    head = lines[0]
    trace = MetricsTrace(head["run_id"], head["strategy"], head.get("hyperparameters", {}), method=head.get("method"))
    for d in lines[1:]:
        t = d["iter_time_s"] if d["iter_time_s"] is not None else times.get(d["epoch"])
        trace.records.append(EpochRecord(d["epoch"], d["loss"], d["id_acc"], d["ood_acc"], t, d["mem_bytes"]))
    return trace


# ---------------------------------------------------------------------------
# training


def _check_strategy(model, strategy, tc, dc, teacher) -> None:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy in ("pbft", "pbft_lora") and tc.template is None:
        raise ValueError(f"strategy {strategy} needs a template")
    if strategy in ("vft", "vft_lora") and tc.template is not None:
        raise ValueError(f"strategy {strategy} trains on raw sentences; drop the template")
    if strategy.endswith("_lora") and not model.adapters:
        raise ValueError(f"strategy {strategy} needs LoRA adapters injected first")
    if strategy == "cd":
        if dc is None or teacher is None:
            raise ValueError("strategy cd needs a DistillConfig and a teacher model")
        if any(p.requires_grad for p in teacher.parameters()):
            raise ValueError("cd teacher must be frozen")
        dc.validate()


def _param_bytes(model: TransformerClassifier | None) -> int:
    return 0 if model is None else sum(p.data.nbytes for p in model.parameters())


def train(
    model: TransformerClassifier,
    data: TaskData,
    tc: TrainConfig,
    strategy: str,
    dc: DistillConfig | None = None,
    teacher: TransformerClassifier | None = None,
    run_id: str = "run",
    hyperparameters: dict | None = None,
    trace_path=None,
    timing_path=None,
    method: str | None = None,
) -> MetricsTrace:
    """Run ``tc.epochs`` epochs of shuffled minibatch training, evaluating ID/OOD after each.

    Only tensors flagged trainable are updated. For ``cd`` the student sees
    :func:`student_template` and the teacher the same prompt followed by the
    scratchpad cue; the student is evaluated on its own prompt.
    """
    tc.validate()
    _check_strategy(model, strategy, tc, dc, teacher)
    if not data.train:
        raise TrainingError("training set is empty")

    cfg = model.config
    if tc.hidden_dropout is not None:
        cfg.hidden_dropout = tc.hidden_dropout
    if tc.attention_dropout is not None:
        cfg.attention_dropout = tc.attention_dropout
    if tc.lora_dropout is not None:
        for adapter in model.adapters.values():
            adapter.dropout = tc.lora_dropout
    cfg.validate()
    max_len = min(tc.max_seq_len, cfg.max_seq_len)

    shuffle_seq, dropout_seq, fewshot_seq = np.random.SeedSequence(tc.seed).spawn(3)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seq))
    dropout_rng = np.random.Generator(np.random.PCG64(dropout_seq))

    train_examples = data.train
    if tc.k_per_class:
        from .data import few_shot_sample

        train_examples = few_shot_sample(train_examples, tc.k_per_class, np.random.Generator(np.random.PCG64(fewshot_seq)))

    template = student_template(tc) if strategy == "cd" else tc.template
    train_set, id_set, ood_set = (
        encode_examples(exs, data.vocab, max_len, template, tc.scratchpad)
        for exs in (train_examples, data.id_eval, data.ood_eval)
    )
    teacher_set = encode_examples(train_examples, data.vocab, max_len, template, True) if strategy == "cd" else None

    params = [p for _, p in trainable_parameters(model)]
    if not params:
        raise TrainingError("model has no trainable parameters")
    # bytes owned by tensors unrelated to this run are excluded from the memory figure
    baseline = memory.live - _param_bytes(model) - _param_bytes(teacher)
    opt = Optimizer(params, tc.optimizer, tc.weight_decay)

    n = len(train_set)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    trace = MetricsTrace(run_id, strategy, dict(hyperparameters or {}), method=method)
    step = 0
    for epoch in range(1, tc.epochs + 1):
        memory.reset()
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        loss_sum, kl_sum = 0.0, 0.0
        for b in range(steps_per_epoch):
            rows = order[b * tc.batch_size : (b + 1) * tc.batch_size]
            ids, mask, labels = train_set.batch(rows)
            try:
                logits = forward(model, ids, mask, train_mode=True, rng=dropout_rng)
                if strategy == "cd":
                    t_ids, t_mask, _ = teacher_set.batch(rows)
                    with T.no_grad():
                        t_logits = forward(teacher, t_ids, t_mask, train_mode=False)
                    ce, kl = distill_terms(logits, t_logits, labels, dc)
                    w, temp = dc.distill_weight, dc.temperature
                    loss = T.add(T.scale(ce, 1.0 - w), T.scale(kl, w * temp * temp))
                    kl_sum += kl.item() * len(rows)
                    del t_logits, ce, kl
                else:
                    loss = T.cross_entropy(logits, labels)
                opt.zero_grad()
                loss.backward()
            except T.NonFiniteError as e:
                raise TrainingError(f"epoch {epoch} step {b}: {e}") from e
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingError(f"epoch {epoch} step {b}: non-finite loss {loss_val}")
            loss_sum += loss_val * len(rows)
            del loss, logits
            opt.step(lr_at(step, total_steps, tc.warmup_ratio, tc.learning_rate))
            step += 1
        opt.zero_grad()
        id_acc = evaluate(model, id_set, tc.eval_batch_size)
        ood_acc = evaluate(model, ood_set, tc.eval_batch_size)
        elapsed = time.perf_counter() - t0
        rec = EpochRecord(
            epoch=epoch,
            loss=loss_sum / n,
            id_acc=id_acc,
            ood_acc=ood_acc,
            iter_time_s=elapsed,
            mem_bytes=int(memory.peak - baseline),
            kl=kl_sum / n if strategy == "cd" else None,
        )
        trace.append(rec)
        log.info("%s epoch %d loss %.4f id %.4f ood %.4f", run_id, epoch, rec.loss, id_acc, ood_acc)
    if trace_path is not None:
        trace.write(trace_path, timing_path)
    return trace


def student_template(tc: TrainConfig) -> str:
    """Prompt of a distilled student: ``tc.template`` if set, else the instruction prompt."""
    return tc.template or "cd_student"


def freeze_all(model: TransformerClassifier) -> TransformerClassifier:
    for p in model.parameters():
        p.requires_grad = False
    return model


def parameter_checksum(model: TransformerClassifier) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def make_teacher(
    data: TaskData,
    model_factory,
    tc: TrainConfig,
    dc: DistillConfig,
) -> TransformerClassifier:
    """Teacher for context distillation, returned frozen.

    ``finetuned``: a fresh model fine-tuned on the student prompt plus the
    scratchpad cue.
    ``random``: the literal frozen, untrained twin.
    """
    dc.validate()
    teacher = model_factory()
    if dc.teacher_init == "finetuned":
        epochs = dc.teacher_epochs or tc.epochs
        teacher_tc = replace(tc, epochs=epochs, template=student_template(tc), scratchpad=True, k_per_class=None)
        train(teacher, data, teacher_tc, "pbft", run_id="teacher")
    return freeze_all(teacher)
