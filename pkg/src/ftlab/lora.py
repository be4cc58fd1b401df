"""Low-rank adapters on the attention projections.

An adapted projection computes ``W x + b + (alpha / r) * B (A dropout(x))``.
B starts at zero, so a freshly injected model is exactly the base model.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ATTN_TARGETS, TransformerClassifier, read_arrays, write_arrays
from .tensor import Tensor

INIT_STD = 0.02


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 64.0
    dropout: float = 0.2
    targets: tuple[str, ...] = field(default=("q", "v"))

    def __post_init__(self):
        self.targets = tuple(self.targets)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def validate(self, d_model: int | None = None) -> None:
        if self.rank < 1:
            raise ValueError("LoRA rank must be positive")
        if d_model is not None and self.rank > d_model:
            raise ValueError(f"LoRA rank {self.rank} exceeds d_model {d_model}")
        if not self.alpha > 0:
            raise ValueError("LoRA alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"LoRA dropout must be in [0, 1), got {self.dropout}")
        if not self.targets:
            raise ValueError("LoRA target set is empty")
        bad = set(self.targets) - set(ATTN_TARGETS)
        if bad:
            raise ValueError(f"unknown LoRA targets {sorted(bad)}; choose from {ATTN_TARGETS}")

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "dropout": self.dropout, "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, d: dict) -> LoraConfig:
        return cls(rank=int(d["rank"]), alpha=float(d["alpha"]), dropout=float(d["dropout"]), targets=tuple(d["targets"]))


class LoraAdapter:
    def __init__(self, A: Tensor, B: Tensor, scaling: float, dropout: float):
        self.A = A  # [r, d_in]
        self.B = B  # [d_out, r]
        self.scaling = scaling
        self.dropout = dropout

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def __call__(self, x: Tensor, train: bool, rng) -> Tensor:
        h = T.dropout(x, self.dropout, train, rng)
        return T.scale(T.matmul(T.matmul(h, T.transpose(self.A)), T.transpose(self.B)), self.scaling)

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)


def _target_names(model: TransformerClassifier, cfg: LoraConfig) -> list[str]:
    return [f"layers.{i}.attn.{t}" for i in range(model.config.n_layers) for t in ATTN_TARGETS if t in cfg.targets]


def inject(model: TransformerClassifier, cfg: LoraConfig, rng: np.random.Generator) -> TransformerClassifier:
    """Attach fresh adapters to every target projection and freeze the base.

    Only adapter tensors and the classification head stay trainable. The model
    is modified in place and returned.
    """
    cfg.validate(model.config.d_model)
    if model.adapters:
        raise ValueError("model already carries LoRA adapters")
    for name in _target_names(model, cfg):
        d_out, d_in = model.params[f"{name}.weight"].shape
        A = Tensor(rng.normal(0.0, INIT_STD, size=(cfg.rank, d_in)), requires_grad=True)
        B = Tensor(np.zeros((d_out, cfg.rank)), requires_grad=True)
        model.adapters[name] = LoraAdapter(A, B, cfg.scaling, cfg.dropout)
    model.lora_config = cfg
    model.freeze(keep_prefixes=("head.",))
    return model


def attach_adapters(model: TransformerClassifier, cfg: LoraConfig, arrays: dict[str, np.ndarray]) -> None:
    """Rebuild adapters from saved A/B arrays; shapes must match the base model."""
    cfg.validate(model.config.d_model)
    adapters = {}
    for name in _target_names(model, cfg):
        d_out, d_in = model.params[f"{name}.weight"].shape
        try:
            a, b = arrays[f"{name}.lora_A"], arrays[f"{name}.lora_B"]
        except KeyError as e:
            raise ValueError(f"adapter arrays missing for {name}") from e
        if a.shape != (cfg.rank, d_in) or b.shape != (d_out, cfg.rank):
            raise ValueError(
                f"adapter shape mismatch for {name}: A{a.shape} B{b.shape}, "
                f"expected A{(cfg.rank, d_in)} B{(d_out, cfg.rank)}"
            )
        adapters[name] = LoraAdapter(Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), cfg.scaling, cfg.dropout)
    model.adapters = adapters
    model.lora_config = cfg


def merge(model: TransformerClassifier) -> TransformerClassifier:
    """Fold every adapter into its base weight and drop the adapters."""
    if not model.adapters:
        raise ValueError("no LoRA adapters attached (already merged?)")
    for name, adapter in model.adapters.items():
        w = model.params[f"{name}.weight"]
        w.data = w.data + adapter.delta_weight()
    model.adapters = {}
    model.lora_config = None
    for p in model.params.values():
        p.requires_grad = True
    return model


def save_adapters(model: TransformerClassifier, path) -> None:
    if not model.adapters:
        raise ValueError("no LoRA adapters attached")
    arrays = {}
    for name, adapter in model.adapters.items():
        arrays[f"{name}.lora_A"] = adapter.A.data
        arrays[f"{name}.lora_B"] = adapter.B.data
    write_arrays(path, {"lora": model.lora_config.to_dict(), "base_sha256": model.base_hash()}, arrays)


def load_adapters(model: TransformerClassifier, path) -> TransformerClassifier:
    """Attach adapters from an adapter-only file onto a matching base model."""
    meta, arrays = read_arrays(path)
    if model.adapters:
        raise ValueError("model already carries LoRA adapters")
    attach_adapters(model, LoraConfig.from_dict(meta["lora"]), arrays)
    model.freeze(keep_prefixes=("head.",))
    return model
