"""Toy pre-LN causal transformer with a two-way classification head.

Parameter count for a config (V vocab, L positions, d model width, f FFN
width, n layers, C classes)::

    V*d + L*d                      token + positional embeddings
    + n * (4*(d*d + d)             Q, K, V, O projections with biases
           + 2*d*f + f + d         FFN pair with biases
           + 4*d)                  two layer norms
    + 2*d                          final layer norm
    + d*C + C                      classification head

Weights are stored torch-style as [d_out, d_in]; ``linear`` computes x @ W.T + b.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

ATTN_TARGETS = ("q", "k", "v", "o")
INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int = 1000
    max_seq_len: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    hidden_dropout: float = 0.1
    attention_dropout: float = 0.1
    n_classes: int = 2

    def validate(self) -> None:
        for name in ("vocab_size", "max_seq_len", "d_model", "n_layers", "n_heads", "d_ffn", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("hidden_dropout", "attention_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {p}")

    def param_count(self) -> int:
        V, L, d, f, n, C = self.vocab_size, self.max_seq_len, self.d_model, self.d_ffn, self.n_layers, self.n_classes
        per_layer = 4 * (d * d + d) + 2 * d * f + f + d + 4 * d
        return V * d + L * d + n * per_layer + 2 * d + d * C + C


class TransformerClassifier:
    """Parameters live in an ordered name -> Tensor registry.

    LoRA adapters, when injected, are kept in ``adapters`` keyed by the name of
    the projection they wrap (e.g. ``layers.0.attn.q``).
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.adapters: dict = {}
        self.lora_config = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()
        for key, adapter in self.adapters.items():
            yield f"{key}.lora_A", adapter.A
            yield f"{key}.lora_B", adapter.B

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for _, p in self.named_parameters() if p.requires_grad or not trainable_only)

    def freeze(self, keep_prefixes: tuple[str, ...] = ()) -> None:
        for name, p in self.params.items():
            p.requires_grad = name.startswith(keep_prefixes)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def base_hash(self) -> str:
        """SHA-256 over the non-adapter parameters, in registry order."""
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def frozen_hash(self) -> str:
        """SHA-256 over the parameters that are not trainable, in registry order."""
        h = hashlib.sha256()
        for name, p in self.params.items():
            if not p.requires_grad:
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def __call__(self, token_ids, attn_mask, train_mode: bool = False, rng=None) -> Tensor:
        return forward(self, token_ids, attn_mask, train_mode, rng)


def trainable_parameters(model: TransformerClassifier) -> list[tuple[str, Tensor]]:
    return [(name, p) for name, p in model.named_parameters() if p.requires_grad]


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = cfg.d_model, cfg.d_ffn
    shapes = [("tok_emb", (cfg.vocab_size, d), "normal"), ("pos_emb", (cfg.max_seq_len, d), "normal")]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        shapes += [(f"{pre}.ln1.weight", (d,), "ones"), (f"{pre}.ln1.bias", (d,), "zeros")]
        for t in ATTN_TARGETS:
            shapes += [(f"{pre}.attn.{t}.weight", (d, d), "normal"), (f"{pre}.attn.{t}.bias", (d,), "zeros")]
        shapes += [
            (f"{pre}.ln2.weight", (d,), "ones"),
            (f"{pre}.ln2.bias", (d,), "zeros"),
            (f"{pre}.ffn.fc1.weight", (f, d), "normal"),
            (f"{pre}.ffn.fc1.bias", (f,), "zeros"),
            (f"{pre}.ffn.fc2.weight", (d, f), "normal"),
            (f"{pre}.ffn.fc2.bias", (d,), "zeros"),
        ]
    shapes += [
        ("ln_f.weight", (d,), "ones"),
        ("ln_f.bias", (d,), "zeros"),
        ("head.weight", (cfg.n_classes, d), "normal"),
        ("head.bias", (cfg.n_classes,), "zeros"),
    ]
    return shapes


def build_model(config: ModelConfig, rng: np.random.Generator) -> TransformerClassifier:
    config.validate()
    params = {}
    for name, shape, init in _param_shapes(config):
        if init == "normal":
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return TransformerClassifier(config, params)


def _check_inputs(model: TransformerClassifier, token_ids, attn_mask) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(token_ids, dtype=np.int64)
    mask = np.asarray(attn_mask, dtype=bool)
    if ids.ndim != 2 or mask.shape != ids.shape:
        raise ValueError(f"token_ids and attn_mask must both be [B, L]; got {ids.shape} and {mask.shape}")
    if ids.shape[1] > model.config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {model.config.max_seq_len}")
    if not mask.any(axis=1).all():
        raise ValueError("batch contains a row with no real tokens")
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise ValueError(f"token id out of range [0, {model.config.vocab_size})")
    return ids, mask


def _project(model, x: Tensor, name: str, train: bool, rng) -> Tensor:
    p = model.params
    out = T.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])
    adapter = model.adapters.get(name)
    if adapter is not None:
        out = T.add(out, adapter(x, train, rng))
    return out


def _attention(model, x: Tensor, layer: int, keep: np.ndarray, train: bool, rng) -> Tensor:
    cfg = model.config
    B, L, d = x.shape
    H = cfg.n_heads
    hd = d // H
    pre = f"layers.{layer}.attn"

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (B, L, H, hd)), (0, 2, 1, 3))

    q = heads(_project(model, x, f"{pre}.q", train, rng))
    k = heads(_project(model, x, f"{pre}.k", train, rng))
    v = heads(_project(model, x, f"{pre}.v", train, rng))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    scores = T.masked_fill(scores, ~keep)
    probs = T.dropout(T.softmax(scores), cfg.attention_dropout, train, rng)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, L, d))
    return _project(model, ctx, f"{pre}.o", train, rng)


def hidden_states(model: TransformerClassifier, token_ids, attn_mask, train_mode: bool = False, rng=None) -> Tensor:
    """Final-layer-norm hidden states, shape [B, L, d_model]."""
    ids, mask = _check_inputs(model, token_ids, attn_mask)
    cfg, p = model.config, model.params
    B, L = ids.shape
    if train_mode and rng is None:
        raise ValueError("train_mode forward needs an rng for dropout")

    # position i sees key j iff j <= i and j is a real token
    causal = np.tril(np.ones((L, L), dtype=bool))
    keep = causal[None, None, :, :] & mask[:, None, None, :]

    x = T.add(T.embedding(p["tok_emb"], ids), T.index_select(p["pos_emb"], slice(0, L)))
    x = T.dropout(x, cfg.hidden_dropout, train_mode, rng)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        h = T.layer_norm(x, p[f"{pre}.ln1.weight"], p[f"{pre}.ln1.bias"])
        a = _attention(model, h, i, keep, train_mode, rng)
        x = T.add(x, T.dropout(a, cfg.hidden_dropout, train_mode, rng))
        h = T.layer_norm(x, p[f"{pre}.ln2.weight"], p[f"{pre}.ln2.bias"])
        h = T.gelu(T.linear(h, p[f"{pre}.ffn.fc1.weight"], p[f"{pre}.ffn.fc1.bias"]))
        h = T.linear(h, p[f"{pre}.ffn.fc2.weight"], p[f"{pre}.ffn.fc2.bias"])
        x = T.add(x, T.dropout(h, cfg.hidden_dropout, train_mode, rng))
    return T.layer_norm(x, p["ln_f.weight"], p["ln_f.bias"])


def last_positions(attn_mask) -> np.ndarray:
    """Index of the last real token in each row."""
    mask = np.asarray(attn_mask, dtype=bool)
    L = mask.shape[1]
    return L - 1 - np.argmax(mask[:, ::-1], axis=1)


def forward(model: TransformerClassifier, token_ids, attn_mask, train_mode: bool = False, rng=None) -> Tensor:
    """Class logits [B, n_classes] read from each row's last real token."""
    h = hidden_states(model, token_ids, attn_mask, train_mode, rng)
    last = last_positions(attn_mask)
    pooled = T.index_select(h, (np.arange(h.shape[0]), last))
    return T.linear(pooled, model.params["head.weight"], model.params["head.bias"])


# ---------------------------------------------------------------------------
# checkpoint container
#
# Byte layout (all integers little-endian):
#   8 bytes   magic b"FTLABCK1"
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header: {"meta": {...}, "arrays": [{"name", "shape", "offset"}, ...]}
#   payload   concatenated float64 '<f8' row-major arrays; offsets are relative to payload start

MAGIC = b"FTLABCK1"


def write_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for buf in blobs:
            f.write(buf)


def read_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(raw)[16 + hlen :]
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload[e["offset"] : e["offset"] + 8 * n], dtype="<f8").reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float64)
    return header["meta"], arrays


def save_checkpoint(model: TransformerClassifier, path, extra: dict | None = None) -> None:
    meta = {
        "config": asdict(model.config),
        "trainable": [name for name, p in model.named_parameters() if p.requires_grad],
        "base_sha256": model.base_hash(),
        "lora": None,
    }
    if model.lora_config is not None:
        meta["lora"] = model.lora_config.to_dict()
    if extra:
        meta["extra"] = extra
    write_arrays(path, meta, model.state_arrays())


def load_checkpoint(path) -> TransformerClassifier:
    meta, arrays = read_arrays(path)
    config = ModelConfig(**meta["config"])
    config.validate()
    trainable = set(meta["trainable"])
    params = {}
    for name, shape, _ in _param_shapes(config):
        if name not in arrays or arrays[name].shape != shape:
            raise ValueError(f"{path}: missing or mis-shaped parameter {name}")
        params[name] = Tensor(arrays[name], requires_grad=name in trainable)
    model = TransformerClassifier(config, params)
    if meta.get("lora"):
        from .lora import LoraConfig, attach_adapters

        attach_adapters(model, LoraConfig.from_dict(meta["lora"]), arrays)
        for name, p in model.named_parameters():
            p.requires_grad = name in trainable
    return model
