"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
"acceptance criteria" section of the terminal summary. Criteria 4 and 5 train
the toy model end to end and take a few minutes on one CPU core.
"""

import json
import re
import time
from pathlib import Path

import numpy as np

from ftlab import hpo
from ftlab import tensor as T
from ftlab.cli import main
from ftlab.data import TEMPLATES, apply_template, build_vocab, synthetic_splits, template_texts
from ftlab.gradcheck import check_gradients
from ftlab.lora import LoraConfig, inject, merge
from ftlab.model import ModelConfig, build_model, forward, trainable_parameters
from ftlab.training import (
    DistillConfig,
    Optimizer,
    TaskData,
    TrainConfig,
    distill_loss,
    make_teacher,
    parameter_checksum,
    train,
)

HERE = Path(__file__).parent
TOY = ModelConfig()  # vocab 1000, L 64, d 64, 2 layers, 4 heads, ffn 256


def synthetic_task(seed: int) -> TaskData:
    sp = synthetic_splits(2000, seed, n_eval=500)
    return TaskData(sp.train, sp.id_eval, sp.ood_eval, build_vocab(sp.train, 1, template_texts()))


def random_batch(rng, max_b=8, max_l=64, vocab=1000):
    B, L = int(rng.integers(1, max_b + 1)), int(rng.integers(1, max_l + 1))
    ids = rng.integers(2, vocab, size=(B, L))
    lengths = rng.integers(1, L + 1, size=B)
    mask = np.arange(L)[None, :] < lengths[:, None]
    return np.where(mask, ids, 0), mask


# 1 ---------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = build_model(TOY, T.make_rng(1))
    teacher = build_model(TOY, T.make_rng(2))
    ids = rng.integers(2, 1000, size=(6, 12))
    mask = np.ones((6, 12), dtype=bool)
    mask[0, 7:] = mask[3, 9:] = False
    labels = np.array([0, 1, 1, 0, 1, 0])
    with T.no_grad():
        t_logits = forward(teacher, ids, mask).data
    dc = DistillConfig(temperature=2.0, distill_weight=0.5)

    # train-mode forward with a fixed dropout stream so every evaluation is identical
    def vft_loss():
        return T.cross_entropy(forward(model, ids, mask, True, T.make_rng(5)), labels)

    def cd_loss():
        return distill_loss(forward(model, ids, mask, True, T.make_rng(5)), t_logits, labels, dc)

    params = list(model.named_parameters())
    worst_vft, _ = check_gradients(vft_loss, params, 200, np.random.default_rng(10), eps=1e-4, per_tensor=True, richardson=True)
    worst_cd, _ = check_gradients(cd_loss, params, 200, np.random.default_rng(11), eps=1e-4, per_tensor=True, richardson=True)
    elapsed = time.perf_counter() - t0
    ok = worst_vft < 1e-4 and worst_cd < 1e-4 and elapsed < 60
    criterion(
        1,
        "gradient fidelity",
        ok,
        f"max rel err vft {worst_vft:.2e}, cd {worst_cd:.2e} over 2x200 coords; {elapsed:.1f}s (< 60s)",
    )


# 2 ---------------------------------------------------------------------------


def test_criterion_02_lora_identity_and_merge(criterion):
    rng = np.random.default_rng(0)
    base = build_model(TOY, T.make_rng(0))
    batches = [random_batch(rng) for _ in range(100)]
    before = [forward(base, *b).data for b in batches]
    inject(base, LoraConfig(), T.make_rng(1))
    identical = all(np.array_equal(forward(base, *b).data, ref) for b, ref in zip(batches, before))

    # give B nonzero values by training a few steps, then merge
    opt = Optimizer([p for _, p in trainable_parameters(base)], "adamw")
    for step in range(5):
        ids, mask = random_batch(rng)
        labels = rng.integers(0, 2, size=len(ids))
        opt.zero_grad()
        T.cross_entropy(forward(base, ids, mask, True, T.make_rng(step)), labels).backward()
        opt.step(1e-2)
    adapted = [forward(base, *b).data for b in batches[:20]]
    merge(base)
    merge_err = max(float(np.max(np.abs(forward(base, *b).data - ref))) for b, ref in zip(batches[:20], adapted))
    criterion(
        2,
        "LoRA identity at init and merge",
        identical and merge_err <= 1e-9,
        f"bitwise identical on 100 batches: {identical}; max merge diff {merge_err:.1e} (<= 1e-9)",
    )


# 3 ---------------------------------------------------------------------------


def test_criterion_03_lora_efficiency(criterion):
    full = build_model(TOY, T.make_rng(0))
    lora = inject(build_model(TOY, T.make_rng(0)), LoraConfig(), T.make_rng(1))
    n_total = lora.num_parameters()
    n_lora = lora.num_parameters(trainable_only=True)
    vft_state = Optimizer([p for _, p in trainable_parameters(full)], "adam").state_bytes()
    lora_state = Optimizer([p for _, p in trainable_parameters(lora)], "adam").state_bytes()
    frac, ratio = n_lora / n_total, lora_state / vft_state
    criterion(
        3,
        "LoRA efficiency",
        frac < 0.10 and ratio < 0.50,
        f"trainable {n_lora}/{n_total} = {frac:.4f} (< 0.10); Adam state {lora_state}/{vft_state} B = {ratio:.4f} (< 0.50)",
    )


# 4 ---------------------------------------------------------------------------


def test_criterion_04_end_to_end_learning(criterion):
    data = synthetic_task(0)
    tc = TrainConfig(epochs=30, seed=0)

    t0 = time.perf_counter()
    vft = train(build_model(TOY, T.make_rng(0)), data, tc, "vft")
    t_vft = time.perf_counter() - t0

    t0 = time.perf_counter()
    lora_model = inject(build_model(TOY, T.make_rng(0)), LoraConfig(), T.make_rng(1))
    lora = train(lora_model, data, tc, "vft_lora")
    t_lora = time.perf_counter() - t0

    vft_id = max(r.id_acc for r in vft.records)
    lora_id = max(r.id_acc for r in lora.records)
    first = next(r.epoch for r in vft.records if r.id_acc >= 0.95) if vft_id >= 0.95 else None
    ok = vft_id >= 0.95 and lora_id >= vft_id - 0.05 and t_vft < 300 and t_lora < 300
    criterion(
        4,
        "end-to-end learning",
        ok,
        f"vft max ID {vft_id:.4f} (>= 0.95, first at epoch {first}); vft_lora max ID {lora_id:.4f} "
        f"(>= {vft_id - 0.05:.4f}); runtimes {t_vft:.0f}s / {t_lora:.0f}s (< 300s)",
    )


# 5 ---------------------------------------------------------------------------


def test_criterion_05_distillation(criterion):
    student = T.Tensor([[0.0, 0.0]], requires_grad=True)
    closed = distill_loss(student, np.array([[2 * np.log(3), 0.0]]), [1], DistillConfig(2.0, 0.5)).item()

    frozen_ok, monotone = True, []
    for seed in range(3):
        data = synthetic_task(seed)
        epochs = 10 if seed == 0 else 5  # seed 0 doubles as the 10-epoch frozen-teacher run
        tc = TrainConfig(epochs=epochs, seed=seed)
        dc = DistillConfig(teacher_epochs=10)
        teacher = make_teacher(data, lambda s=seed: build_model(TOY, T.make_rng(100 + s)), tc, dc)
        before = parameter_checksum(teacher)
        trace = train(build_model(TOY, T.make_rng(seed)), data, tc, "cd", dc, teacher)
        frozen_ok &= parameter_checksum(teacher) == before
        kl = [r.kl for r in trace.records[:5]]
        monotone.append(all(a > b for a, b in zip(kl, kl[1:])))
    ok = abs(closed - 0.60820) < 1e-4 and frozen_ok and all(monotone)
    criterion(
        5,
        "distillation correctness",
        ok,
        f"closed form {closed:.5f} (0.60820 +- 1e-4); teacher checksum unchanged over 10 epochs: {frozen_ok}; "
        f"KL strictly decreasing over epochs 1-5 for seeds 0-2: {monotone}",
    )


# 6 ---------------------------------------------------------------------------


def test_criterion_06_tpe_quality(criterion):
    space = hpo.SearchSpace("quad", (hpo.uniform("x", 0.0, 1.0),))

    def objective(a, _):
        return -((a["x"] - 0.3) ** 2)

    def best(sampler, seed):
        b, _ = hpo.optimize(space, objective, 60, np.random.default_rng(seed), sampler)
        return b.objective

    t0 = time.perf_counter()
    tpe = [best("tpe", s) for s in range(10)]
    elapsed = time.perf_counter() - t0
    rnd = [best("random", s) for s in range(10)]
    hits = sum(v > -0.001 for v in tpe)
    ok = hits >= 8 and np.median(tpe) > np.median(rnd) and elapsed < 10
    criterion(
        6,
        "TPE quality",
        ok,
        f"{hits}/10 seeds reach > -0.001; median TPE {np.median(tpe):.2e} vs random {np.median(rnd):.2e}; "
        f"{elapsed:.1f}s for 10x60 TPE trials (< 10s)",
    )


# 7 ---------------------------------------------------------------------------

PBFT_GOLDEN = [
    {"name": "learning_rate", "kind": "loguniform", "lo": 1e-6, "hi": 1e-4},
    {"name": "batch_size", "kind": "quantized_int", "lo": 2, "hi": 16, "step": 1},
    {"name": "dropout", "kind": "uniform", "lo": 0.0, "hi": 0.5},
    {"name": "warmup_ratio", "kind": "uniform", "lo": 0.0, "hi": 0.2},
    {"name": "k_per_class", "kind": "quantized_int", "lo": 2, "hi": 32, "step": 1},
    {"name": "epochs", "kind": "quantized_int", "lo": 5, "hi": 20, "step": 1},
    {"name": "template", "kind": "categorical", "choices": ["minimal", "gpt3", "eval_harness"]},
]
GOLDEN_SPACES = {
    "vft_space": [
        {"name": "num_epochs", "kind": "quantized_int", "lo": 2, "hi": 50, "step": 1},
        {"name": "batch_size", "kind": "categorical", "choices": [16, 32, 64, 128]},
        {"name": "learning_rate", "kind": "loguniform", "lo": 1e-6, "hi": 1e-3},
        {"name": "hidden_dropout", "kind": "uniform", "lo": 0.0001, "hi": 0.3},
        {"name": "attention_dropout", "kind": "uniform", "lo": 0.0001, "hi": 0.3},
        {"name": "optimizer", "kind": "categorical", "choices": ["adam", "adamw", "sgd"]},
    ],
    "pbft_space": PBFT_GOLDEN,
    "cd_space": PBFT_GOLDEN
    + [
        {"name": "temperature", "kind": "uniform", "lo": 0.5, "hi": 4.0},
        {"name": "distill_weight", "kind": "uniform", "lo": 0.0, "hi": 1.0},
    ],
    "lora_space": [
        {"name": "rank", "kind": "categorical", "choices": [4, 8, 16, 32]},
        {"name": "alpha", "kind": "categorical", "choices": [16, 32, 64, 128]},
        {"name": "lora_dropout", "kind": "uniform", "lo": 0.0, "hi": 0.5},
    ],
}


def test_criterion_07_builtin_spaces(criterion):
    actual = {name: [p.to_dict() for p in space] for name, space in hpo.builtin_spaces().items()}
    mismatched = sorted(k for k in GOLDEN_SPACES.keys() | actual.keys() if actual.get(k) != GOLDEN_SPACES.get(k))
    criterion(7, "built-in spaces match the reference ranges", not mismatched, f"mismatched spaces: {mismatched or 'none'}")


# 8 ---------------------------------------------------------------------------


def test_criterion_08_template_golden_files(criterion):
    bad = []
    for name in TEMPLATES:
        golden = (HERE / "golden" / "templates" / f"{name}.txt").read_bytes()
        if apply_template("They sang.", name).encode("utf-8") != golden:
            bad.append(name)
    ok = not bad and len(TEMPLATES) == 5
    criterion(8, "template golden files", ok, f"{len(TEMPLATES)} templates checked byte-for-byte; mismatches: {bad or 'none'}")


# 9 ---------------------------------------------------------------------------


def snapshot(root: Path, skip=("timing.jsonl", "run.log", "optimize.log")) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def test_criterion_09_determinism(criterion, tmp_path):
    tiny = {"vocab_size": 300, "max_seq_len": 48, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ffn": 32}
    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(json.dumps({"strategy": "vft_lora", "lora": {}, "train": {"epochs": 2}, "data": {"n": 200}}))
    opt_cfg = tmp_path / "opt.json"
    opt_cfg.write_text(
        json.dumps(
            {
                "strategy": "pbft",
                "space": "pbft_space",
                "n_trials": 4,
                "model": tiny,
                "train": {"epochs": 5, "batch_size": 8, "learning_rate": 1e-4, "template": "gpt3", "k_per_class": 4},
                "data": {"n": 80},
            }
        )
    )
    commands = {
        "prepare": lambda out: ["prepare", "--synthetic", "--n", "400", "--seed", "7", "--out", str(out)],
        "train": lambda out: ["train", "--config", str(train_cfg), "--seed", "7", "--out", str(out)],
        "optimize": lambda out: ["optimize", "--config", str(opt_cfg), "--seed", "7", "--out", str(out)],
        "report": lambda out: ["report", str(HERE / "fixtures" / "report"), "--out", str(out / "report.txt"),
                               "--curves", str(out / "curves.csv")],  # fmt: skip
    }
    results = {}
    for name, argv in commands.items():
        out = tmp_path / name
        out.mkdir()
        codes = [main(argv(out))]
        first = snapshot(out)
        codes.append(main(argv(out)))
        second = snapshot(out)
        results[name] = codes == [0, 0] and first == second and len(first) > 0
    criterion(9, "determinism", all(results.values()), f"byte-identical reruns: {results}")


# 10 --------------------------------------------------------------------------


def test_criterion_10_report_format(criterion, capsys):
    fixtures = HERE / "fixtures" / "report"
    assert main(["report", str(fixtures), "--format", "tsv"]) == 0
    tsv = capsys.readouterr().out
    table1 = (HERE / "golden" / "table1.tsv").read_text()
    table2 = (HERE / "golden" / "table2.tsv").read_text()
    tsv_ok = tsv.startswith(table1) and table2 in tsv

    assert main(["report", str(fixtures)]) == 0
    md = capsys.readouterr().out
    rows = [[c.strip() for c in line.strip("|").split("|")] for line in md.splitlines() if line.startswith("| ")]
    headers = [r for r in rows if r[0] == "Method"]
    body = [r for r in rows if r[0] != "Method"]
    md_ok = (
        headers == [["Method", "Max In-Domain", "Max Out-Domain"], ["Method", "Max Iteration Time (s)", "Max Memory Usage (MB)"]]
        and [r[0] for r in body] == ["Vanilla", "PBFT", "Context Distillation", "VFT-LoRA", "PBFT-LoRA"] * 2
        and all(re.fullmatch(r"\d+\.\d{4}", c) for r in body for c in r[1:])
    )
    criterion(
        10,
        "report format",
        tsv_ok and md_ok,
        f"fixture tables match the golden TSV cell for cell: {tsv_ok}; markdown layout: {md_ok}",
    )
