import numpy as np
import pytest

from ftlab import tensor as T
from ftlab.lora import LoraConfig, inject, load_adapters, merge, save_adapters
from ftlab.model import ModelConfig, build_model, forward, trainable_parameters
from ftlab.training import Optimizer

TOY = ModelConfig()
SMALL = ModelConfig(vocab_size=40, max_seq_len=12, d_model=16, n_layers=2, n_heads=4, d_ffn=32)


def random_batch(rng, vocab, B=4, L=7):
    ids = rng.integers(2, vocab, size=(B, L))
    mask = np.ones((B, L), dtype=bool)
    mask[0, rng.integers(1, L) :] = False
    return ids, mask


def test_default_config_and_scaling():
    cfg = LoraConfig()
    assert (cfg.rank, cfg.alpha, cfg.dropout, cfg.targets) == (16, 64.0, 0.2, ("q", "v"))
    assert cfg.scaling == 4.0


def test_toy_trainable_count():
    m = inject(build_model(TOY, T.make_rng(0)), LoraConfig(), T.make_rng(1))
    names = [n for n, _ in trainable_parameters(m)]
    assert all("lora_" in n or n.startswith("head.") for n in names)
    n_trainable = sum(p.size for _, p in trainable_parameters(m))
    # per adapted matrix: A is r x d, B is d x r
    assert n_trainable == 2 * 2 * (2 * 16 * 64) + (64 * 2 + 2) == 8322
    assert n_trainable / m.num_parameters() < 0.10


def test_identity_at_init():
    base = build_model(SMALL, T.make_rng(0))
    rng = np.random.default_rng(0)
    batches = [random_batch(rng, 40) for _ in range(10)]
    before = [forward(base, *b).data for b in batches]
    inject(base, LoraConfig(rank=4, alpha=8, targets=("q", "k", "v", "o")), T.make_rng(1))
    for b, ref in zip(batches, before):
        assert np.array_equal(forward(base, *b).data, ref)


def test_inject_errors():
    m = build_model(SMALL, T.make_rng(0))
    with pytest.raises(ValueError, match="exceeds"):
        inject(m, LoraConfig(rank=17), T.make_rng(0))
    with pytest.raises(ValueError, match="empty"):
        inject(m, LoraConfig(rank=4, targets=()), T.make_rng(0))


def test_merge_equivalence_after_training_step():
    m = inject(build_model(SMALL, T.make_rng(0)), LoraConfig(rank=4, alpha=16), T.make_rng(1))
    rng = np.random.default_rng(2)
    ids, mask = random_batch(rng, 40)
    opt = Optimizer([p for _, p in trainable_parameters(m)], "adam")
    for _ in range(3):
        opt.zero_grad()
        T.cross_entropy(forward(m, ids, mask, True, T.make_rng(0)), [0, 1, 0, 1]).backward()
        opt.step(1e-2)
    test_batches = [random_batch(rng, 40) for _ in range(5)]
    adapted = [forward(m, *b).data for b in test_batches]
    merge(m)
    assert not m.adapters
    assert not any("lora" in n for n, _ in m.named_parameters())
    for b, ref in zip(test_batches, adapted):
        np.testing.assert_allclose(forward(m, *b).data, ref, rtol=0, atol=1e-9)


def test_merge_untrained_leaves_weights_bitwise():
    m = build_model(SMALL, T.make_rng(0))
    before = {n: p.data.copy() for n, p in m.params.items()}
    merge(inject(m, LoraConfig(rank=4), T.make_rng(1)))
    for n, p in m.params.items():
        assert np.array_equal(p.data, before[n])


def test_merge_twice_is_an_error():
    m = merge(inject(build_model(SMALL, T.make_rng(0)), LoraConfig(rank=4), T.make_rng(1)))
    with pytest.raises(ValueError):
        merge(m)


def test_frozen_base_unchanged_by_training():
    m = inject(build_model(SMALL, T.make_rng(0)), LoraConfig(rank=4), T.make_rng(1))
    frozen = {n: p.data.copy() for n, p in m.params.items() if not p.requires_grad}
    opt = Optimizer([p for _, p in trainable_parameters(m)], "adamw", weight_decay=0.1)
    ids, mask = random_batch(np.random.default_rng(0), 40)
    for _ in range(5):
        opt.zero_grad()
        T.cross_entropy(forward(m, ids, mask, True, T.make_rng(0)), [1, 0, 0, 1]).backward()
        opt.step(1e-2)
    for n, p in m.params.items():
        if n in frozen:
            assert np.array_equal(p.data, frozen[n]), n
            assert p.grad is None


def test_optimizer_state_footprint_halved():
    full = build_model(TOY, T.make_rng(0))
    vft_bytes = Optimizer([p for _, p in trainable_parameters(full)], "adam").state_bytes()
    lora = inject(build_model(TOY, T.make_rng(0)), LoraConfig(), T.make_rng(1))
    lora_bytes = Optimizer([p for _, p in trainable_parameters(lora)], "adam").state_bytes()
    assert lora_bytes < 0.5 * vft_bytes


def test_adapter_checkpoint_round_trip(tmp_path):
    m = inject(build_model(SMALL, T.make_rng(0)), LoraConfig(rank=4), T.make_rng(1))
    for a in m.adapters.values():
        a.B.data = np.random.default_rng(0).normal(size=a.B.shape)
    save_adapters(m, tmp_path / "a.ckpt")
    fresh = load_adapters(build_model(SMALL, T.make_rng(0)), tmp_path / "a.ckpt")
    ids, mask = random_batch(np.random.default_rng(1), 40)
    assert np.array_equal(forward(fresh, ids, mask).data, forward(m, ids, mask).data)


def test_adapter_checkpoint_shape_mismatch(tmp_path):
    m = inject(build_model(SMALL, T.make_rng(0)), LoraConfig(rank=4), T.make_rng(1))
    save_adapters(m, tmp_path / "a.ckpt")
    other = build_model(ModelConfig(vocab_size=40, max_seq_len=12, d_model=32, n_heads=4, d_ffn=32), T.make_rng(0))
    with pytest.raises(ValueError, match="mismatch"):
        load_adapters(other, tmp_path / "a.ckpt")
