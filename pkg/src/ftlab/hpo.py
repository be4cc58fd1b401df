"""Search spaces and a Tree-structured Parzen Estimator with a random-search baseline.

Parameters are modelled independently. Once enough trials have completed,
the ok trials are ranked by objective (maximized), the top ``ceil(gamma * n)``
form the good set and the rest the bad set. Each numeric parameter gets two
mixtures of truncated normals, l(x) from the good set and g(x) from the bad
set, each with one extra wide kernel for the prior. Candidates are drawn
from l and the one with the largest sum over parameters of log l - log g wins.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri

log = logging.getLogger(__name__)

KINDS = ("uniform", "loguniform", "quantized_int", "categorical")
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    lo: float | None = None
    hi: float | None = None
    step: int | None = None
    choices: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.choices:
                raise ValueError(f"{self.name}: categorical needs at least one choice")
            return
        if self.lo is None or self.hi is None or not self.lo < self.hi:
            raise ValueError(f"{self.name}: need lo < hi")
        if self.kind == "loguniform" and self.lo <= 0:
            raise ValueError(f"{self.name}: loguniform needs lo > 0")
        if self.kind == "quantized_int" and (self.step is None or self.step < 1):
            raise ValueError(f"{self.name}: quantized_int needs a positive integer step")

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.choices
        if self.kind == "quantized_int":
            return isinstance(value, (int, np.integer)) and self.lo <= value <= self.hi and (value - self.lo) % self.step == 0
        return isinstance(value, (int, float)) and self.lo <= value <= self.hi

    @property
    def n_steps(self) -> int:
        # index of the largest grid point not above hi
        return int((self.hi - self.lo) // self.step)

    # numeric kinds are modelled on an internal axis: log for loguniform,
    # the grid widened by half a step for quantized ints
    def internal_bounds(self) -> tuple[float, float]:
        if self.kind == "loguniform":
            return math.log(self.lo), math.log(self.hi)
        if self.kind == "quantized_int":
            return self.lo - self.step / 2, self.lo + self.n_steps * self.step + self.step / 2
        return float(self.lo), float(self.hi)

    def to_internal(self, value) -> float:
        return math.log(value) if self.kind == "loguniform" else float(value)

    def from_internal(self, x: float):
        if self.kind == "loguniform":
            return min(max(math.exp(x), self.lo), self.hi)
        if self.kind == "quantized_int":
            k = min(max(round((x - self.lo) / self.step), 0), self.n_steps)
            return int(self.lo + k * self.step)
        return min(max(float(x), self.lo), self.hi)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "categorical":
            d["choices"] = list(self.choices)
        else:
            d.update(lo=self.lo, hi=self.hi)
            if self.step is not None:
                d["step"] = self.step
        return d


def uniform(name: str, lo: float, hi: float) -> ParamSpec:
    return ParamSpec(name, "uniform", lo, hi)


def loguniform(name: str, lo: float, hi: float) -> ParamSpec:
    return ParamSpec(name, "loguniform", lo, hi)


def quantized_int(name: str, lo: int, hi: int, step: int = 1) -> ParamSpec:
    return ParamSpec(name, "quantized_int", lo, hi, step)


def categorical(name: str, choices: Sequence) -> ParamSpec:
    return ParamSpec(name, "categorical", choices=tuple(choices))


@dataclass(frozen=True)
class SearchSpace:
    name: str
    params: tuple[ParamSpec, ...]

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in space {self.name}")

    def __iter__(self):
        return iter(self.params)

    def __getitem__(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def check(self, assignment: dict) -> None:
        """Raise ValueError if any value is missing or outside its spec."""
        for spec in self.params:
            if spec.name not in assignment:
                raise ValueError(f"assignment is missing {spec.name}")
            if not spec.contains(assignment[spec.name]):
                raise ValueError(f"{spec.name}={assignment[spec.name]!r} is outside {spec.to_dict()}")


def builtin_spaces() -> dict[str, SearchSpace]:
    pbft = (
        loguniform("learning_rate", 1e-6, 1e-4),
        quantized_int("batch_size", 2, 16, 1),
        uniform("dropout", 0.0, 0.5),
        uniform("warmup_ratio", 0.0, 0.2),
        quantized_int("k_per_class", 2, 32, 1),
        quantized_int("epochs", 5, 20, 1),
        categorical("template", ("minimal", "gpt3", "eval_harness")),
    )
    return {
        "vft_space": SearchSpace(
            "vft_space",
            (
                quantized_int("num_epochs", 2, 50, 1),
                categorical("batch_size", (16, 32, 64, 128)),
                loguniform("learning_rate", 1e-6, 1e-3),
                uniform("hidden_dropout", 0.0001, 0.3),
                uniform("attention_dropout", 0.0001, 0.3),
                categorical("optimizer", ("adam", "adamw", "sgd")),
            ),
        ),
        "pbft_space": SearchSpace("pbft_space", pbft),
        "lora_space": SearchSpace(
            "lora_space",
            (
                categorical("rank", (4, 8, 16, 32)),
                categorical("alpha", (16, 32, 64, 128)),
                uniform("lora_dropout", 0.0, 0.5),
            ),
        ),
        "cd_space": SearchSpace(
            "cd_space",
            pbft + (uniform("temperature", 0.5, 4.0), uniform("distill_weight", 0.0, 1.0)),
        ),
    }


def _py(value):
    return value.item() if isinstance(value, np.generic) else value


def sample_prior(space: SearchSpace, rng: np.random.Generator) -> dict:
    out = {}
    for spec in space:
        if spec.kind == "categorical":
            out[spec.name] = _py(spec.choices[int(rng.integers(len(spec.choices)))])
        elif spec.kind == "quantized_int":
            out[spec.name] = int(spec.lo + spec.step * int(rng.integers(spec.n_steps + 1)))
        elif spec.kind == "loguniform":
            out[spec.name] = spec.from_internal(rng.uniform(math.log(spec.lo), math.log(spec.hi)))
        else:
            out[spec.name] = float(rng.uniform(spec.lo, spec.hi))
    return out


# ---------------------------------------------------------------------------
# trials


@dataclass
class Trial:
    id: int
    assignment: dict
    objective: float | None = None
    status: str = "ok"
    aux: dict = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "assignment": self.assignment,
            "objective": self.objective,
            "status": self.status,
            "aux": self.aux,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Trial:
        return cls(d["id"], d["assignment"], d.get("objective"), d.get("status", "ok"), d.get("aux", {}), d.get("seed"))


@dataclass(frozen=True)
class TPEKnobs:
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24


def split_trials(trials: Sequence[Trial], gamma: float) -> tuple[list[Trial], list[Trial]]:
    """Good set = top ceil(gamma * n) ok trials by objective; ties go to the earlier trial."""
    ok = sorted((t for t in trials if t.status == "ok"), key=lambda t: (-t.objective, t.id))
    n_good = math.ceil(gamma * len(ok))
    return ok[:n_good], ok[n_good:]


class ParzenEstimator:
    """Weighted mixture of normals truncated to [lo, hi] on the internal axis."""

    def __init__(self, observations: Sequence[float], lo: float, hi: float):
        obs = np.asarray(observations, dtype=float)
        n = len(obs)
        width = hi - lo
        floor = width / min(100, n + 1)
        sigmas = np.empty(n)
        if n:
            order = np.argsort(obs, kind="stable")
            ext = np.concatenate(([lo], obs[order], [hi]))
            gaps = np.maximum(ext[1:-1] - ext[:-2], ext[2:] - ext[1:-1])
            sigmas[order] = gaps
        self.mus = np.concatenate((obs, [(lo + hi) / 2]))
        self.sigmas = np.clip(np.concatenate((sigmas, [width])), floor, width)
        self.weights = np.full(n + 1, 1.0 / (n + 1))
        self.lo, self.hi = lo, hi
        a = (lo - self.mus) / self.sigmas
        b = (hi - self.mus) / self.sigmas
        self._cdf_a, self._cdf_b = ndtr(a), ndtr(b)
        self._log_mass = np.log(self._cdf_b - self._cdf_a)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=size, p=self.weights)
        u = rng.uniform(self._cdf_a[comp], self._cdf_b[comp])
        x = self.mus[comp] + self.sigmas[comp] * ndtri(u)
        return np.clip(x, self.lo, self.hi)

    def log_pdf(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
        z = (x - self.mus) / self.sigmas
        comp = -0.5 * z * z - _LOG_SQRT_2PI - np.log(self.sigmas) - self._log_mass + np.log(self.weights)
        return logsumexp(comp, axis=1)


class CategoricalEstimator:
    """Observation counts plus one pseudo-count per choice."""

    def __init__(self, observations: Sequence, choices: Sequence):
        self.choices = tuple(choices)
        counts = np.ones(len(self.choices))
        for v in observations:
            counts[self.choices.index(v)] += 1
        self.probs = counts / counts.sum()

    def sample(self, rng: np.random.Generator, size: int) -> list:
        idx = rng.choice(len(self.choices), size=size, p=self.probs)
        return [_py(self.choices[i]) for i in idx]

    def log_pdf(self, values) -> np.ndarray:
        return np.log(np.array([self.probs[self.choices.index(v)] for v in values]))


def _estimator(spec: ParamSpec, trials: Sequence[Trial]):
    values = [t.assignment[spec.name] for t in trials]
    if spec.kind == "categorical":
        return CategoricalEstimator(values, spec.choices)
    lo, hi = spec.internal_bounds()
    return ParzenEstimator([spec.to_internal(v) for v in values], lo, hi)


def tpe_candidates(
    space: SearchSpace, good: Sequence[Trial], bad: Sequence[Trial], rng: np.random.Generator, n_candidates: int
) -> tuple[list[dict], np.ndarray]:
    """Draw candidates from the good-set densities and score each by sum of log l/g."""
    cands = [{} for _ in range(n_candidates)]
    scores = np.zeros(n_candidates)
    for spec in space:
        l_est, g_est = _estimator(spec, good), _estimator(spec, bad)
        if spec.kind == "categorical":
            values = l_est.sample(rng, n_candidates)
            scores += l_est.log_pdf(values) - g_est.log_pdf(values)
        else:
            values = [spec.from_internal(x) for x in l_est.sample(rng, n_candidates)]
            xs = [spec.to_internal(v) for v in values]
            scores += l_est.log_pdf(xs) - g_est.log_pdf(xs)
        for c, v in zip(cands, values):
            c[spec.name] = v
    return cands, scores


def tpe_suggest(
    space: SearchSpace, history: Sequence[Trial], rng: np.random.Generator, knobs: TPEKnobs = TPEKnobs()
) -> dict:
    ok = [t for t in history if t.status == "ok"]
    if len(ok) < knobs.n_startup:
        return sample_prior(space, rng)
    good, bad = split_trials(ok, knobs.gamma)
    cands, scores = tpe_candidates(space, good, bad, rng, knobs.n_candidates)
    best = cands[int(np.argmax(scores))]
    space.check(best)
    return best


def optimize(
    space: SearchSpace,
    objective_fn: Callable[[dict, int], Any],
    n_trials: int,
    rng: np.random.Generator,
    sampler: str = "tpe",
    knobs: TPEKnobs = TPEKnobs(),
    store_path=None,
    seed: int | None = None,
) -> tuple[Trial, list[Trial]]:
    """Sequential ask -> evaluate -> tell loop.

    ``objective_fn(assignment, trial_id)`` returns the objective, or a pair
    ``(objective, aux_dict)``. Runtime or arithmetic failures and non-finite
    objectives mark the trial failed; failed trials never enter the densities.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if sampler not in ("tpe", "random"):
        raise ValueError(f"unknown sampler {sampler!r}")
    trials: list[Trial] = []
    store = open(store_path, "w", encoding="utf-8", newline="\n") if store_path is not None else None
    try:
        for i in range(n_trials):
            assignment = tpe_suggest(space, trials, rng, knobs) if sampler == "tpe" else sample_prior(space, rng)
            space.check(assignment)
            trial = Trial(i, assignment, seed=seed)
            try:
                result = objective_fn(dict(assignment), i)
                value, aux = result if isinstance(result, tuple) else (result, {})
                value = float(value)
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite objective {value}")
                trial.objective, trial.aux = value, dict(aux)
            except (ArithmeticError, RuntimeError) as e:
                log.warning("trial %d failed: %s", i, e)
                trial.status, trial.aux = "failed", {"error": str(e)}
            trials.append(trial)
            if store is not None:
                store.write(json.dumps(trial.to_dict(), sort_keys=True) + "\n")
                store.flush()
    finally:
        if store is not None:
            store.close()
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise RuntimeError("all trials failed")
    best = min(ok, key=lambda t: (-t.objective, t.id))
    return best, trials


def read_trials(path) -> list[Trial]:
    with open(path, encoding="utf-8") as f:
        return [Trial.from_dict(json.loads(line)) for line in f if line.strip()]
