import struct

import numpy as np
import pytest
from scipy.stats import norm

from finegates import autodiff as ad
from finegates.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from finegates.data import Corpus, PlantedTaskSpec, generate_planted, pad_batch, split_corpus
from finegates.errors import ConfigError, DimensionError, FormatError, NumericError
from finegates.gates import SIGMA, expected_open_fraction
from finegates.training import (
    METRIC_COLUMNS,
    SGD,
    AdamW,
    FrozenNoise,
    GaussianNoise,
    TrainConfig,
    accuracy,
    build_optimizer,
    fit,
    metrics_csv,
    model_checkpoint,
    model_from_checkpoint,
    sparse_penalty,
    total_loss,
    train_step,
    write_checkpoint,
)
from finegates.transformer import Encoder, ModelConfig


def tiny_task(n=64, seed=0, vocab=32, seq=4, d=8):
    spec = PlantedTaskSpec(vocab_size=vocab, seq_len=seq, model_dim=d, informative_dims=tuple(range(d // 2)),
                           num_samples=n, seed=seed)
    return generate_planted(spec)


def tiny_model(corpus, kind="gates_only", seed=0, **kw):
    cfg = ModelConfig(num_blocks=1, model_dim=8, num_heads=2, ffn_dim=16, vocab_size=32, max_seq_len=4,
                      adapter_kind=kind, init_seed=seed, **kw)
    return Encoder(cfg, embedding=corpus.embedding)


def full_batch(corpus):
    ids, mask = pad_batch(corpus.sequences)
    return ids, corpus.labels, mask


def snapshot(model):
    return {k: v.copy() for k, v in model.named_tensors().items()}


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(target_sparsity=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(sparsity_loss_mode="l1").validate()
    assert (TrainConfig().lr_gates, TrainConfig().lr_lora) == (1e-3, 1e-4)


def test_lambda_zero_total_is_task_loss():
    c = tiny_task()
    model = tiny_model(c)
    parts = total_loss(model, full_batch(c), TrainConfig(lam=0.0, target_sparsity=0.9), FrozenNoise(np.random.default_rng(0)))
    assert parts.sparse.item() > 0
    assert parts.total.item() == parts.task.item()


def test_sparse_penalty_matches_independent_recomputation():
    c = tiny_task()
    model = tiny_model(c)
    rng = np.random.default_rng(1)
    for _, _, g in model.gate_vectors():
        g.mu.data[...] = rng.uniform(-1, 1, len(g))
    s = 0.35
    expected = 0.0
    for _, _, g in model.gate_vectors():
        open_ = norm.cdf((g.mu.data + 0.5) / SIGMA).mean()
        expected += max(open_ - (1 - s), 0.0)
    got = sparse_penalty(model, TrainConfig(target_sparsity=s)).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_hinge_vanishes_once_target_is_met():
    c = tiny_task()
    model = tiny_model(c)
    s = 0.3
    mu = norm.ppf(1 - s) * SIGMA - 0.5 - 1e-9
    for _, _, g in model.gate_vectors():
        g.mu.data[...] = mu
    assert sparse_penalty(model, TrainConfig(target_sparsity=s)).item() == 0.0


def test_train_step_determinism():
    def run():
        c = tiny_task(seed=3)
        model = tiny_model(c, kind="gates_plus_lora")
        cfg = TrainConfig(lr_gates=1e-2, lr_lora=1e-2, target_sparsity=0.3)
        optim = build_optimizer(model, cfg)
        noise = GaussianNoise(np.random.default_rng(5))
        losses = [train_step(model, full_batch(c), optim, cfg, noise, i)["total_loss"] for i in range(10)]
        return losses, snapshot(model)

    (la, pa), (lb, pb) = run(), run()
    assert la == lb
    for k in pa:
        assert np.array_equal(pa[k], pb[k]), k


@pytest.mark.parametrize("kind", ["gates_only", "gates_plus_lora", "lora_only"])
def test_frozen_tensors_unchanged_after_training(kind):
    c = tiny_task()
    model = tiny_model(c, kind=kind)
    before = snapshot(model)
    cfg = TrainConfig(lr_gates=1e-2, lr_lora=1e-2, target_sparsity=0.3)
    optim, noise = build_optimizer(model, cfg), GaussianNoise(np.random.default_rng(0))
    for i in range(100):
        train_step(model, full_batch(c), optim, cfg, noise, i)
    after = snapshot(model)
    frozen = [k for k in before if k == "embedding" or k == "positions" or k.endswith((".W0", ".bias"))]
    assert frozen
    for k in frozen:
        assert np.abs(after[k] - before[k]).max() == 0.0, k
    assert any(not np.array_equal(after[k], before[k]) for k in before if k not in frozen)


def test_sparsity_only_step_lowers_open_fraction():
    c = tiny_task()
    model = tiny_model(c)
    cfg = TrainConfig(lam=100.0, target_sparsity=0.5, lr_gates=1e-2)
    before = [expected_open_fraction(g).item() for _, _, g in model.gate_vectors()]
    optim = build_optimizer(model, cfg)
    model.zero_grad()
    with ad.Tape() as tape:
        loss = sparse_penalty(model, cfg) * cfg.lam
    tape.backward(loss)
    for p in model.trainable_tensors():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optim.step()
    after = [expected_open_fraction(g).item() for _, _, g in model.gate_vectors()]
    assert all(a < b for a, b in zip(after, before))


def test_large_lambda_train_step_lowers_open_fraction():
    c = tiny_task()
    model = tiny_model(c)
    cfg = TrainConfig(lam=1e3, target_sparsity=0.5, lr_gates=1e-2)
    before = np.mean([expected_open_fraction(g).item() for _, _, g in model.gate_vectors()])
    train_step(model, full_batch(c), build_optimizer(model, cfg), cfg, FrozenNoise(np.random.default_rng(0)))
    after = np.mean([expected_open_fraction(g).item() for _, _, g in model.gate_vectors()])
    assert after < before


def test_param_groups_split():
    c = tiny_task()
    model = tiny_model(c, kind="gates_plus_lora")
    optim = build_optimizer(model, TrainConfig(lr_gates=0.3, lr_lora=0.02, weight_decay=0.1))
    groups = {g["name"]: g for g in optim.groups}
    assert all(".gate_" in p.name for p in groups["gates"]["params"])
    assert groups["gates"]["lr"] == 0.3 and groups["gates"]["weight_decay"] == 0.0
    assert all(p.name.endswith(("lora_A", "lora_B")) or p.name.startswith("head.") for p in groups["decay"]["params"])
    assert groups["decay"]["lr"] == 0.02 and groups["decay"]["weight_decay"] == 0.1
    assert groups["no_decay"]["weight_decay"] == 0.0
    n_groups = sum(len(g["params"]) for g in optim.groups)
    assert n_groups == len(model.trainable_tensors())


@pytest.mark.parametrize("opt", ["adamw", "sgd"])
def test_group_learning_rates_closed_form(opt):
    a = ad.Tensor([0.4], requires_grad=True)
    b = ad.Tensor([-0.2], requires_grad=True)
    a.grad, b.grad = np.array([2.0]), np.array([-3.0])
    groups = [{"params": [a], "lr": 0.1}, {"params": [b], "lr": 0.01}]
    if opt == "adamw":
        AdamW(groups, eps=1e-8).step()
        # first Adam step moves by lr * g / (|g| + eps)
        assert a.data[0] == pytest.approx(0.4 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)
        assert b.data[0] == pytest.approx(-0.2 + 0.01 * 3.0 / (3.0 + 1e-8), abs=1e-15)
    else:
        SGD(groups).step()
        assert a.data[0] == pytest.approx(0.4 - 0.1 * 2.0, abs=1e-15)
        assert b.data[0] == pytest.approx(-0.2 + 0.01 * 3.0, abs=1e-15)


def test_decoupled_decay_with_zero_gradient():
    p = ad.Tensor([1.5, -2.0, 0.25], requires_grad=True)
    p.grad = np.zeros(3)
    lr, wd = 0.01, 0.2
    opt = AdamW([{"params": [p], "lr": lr, "weight_decay": wd}])
    for _ in range(3):
        expected = p.data - (lr * wd) * p.data
        opt.step()
        assert np.array_equal(p.data, expected)
        p.grad = np.zeros(3)
    # moments never see the decay
    assert np.array_equal(opt.m[0][0], np.zeros(3)) and np.array_equal(opt.v[0][0], np.zeros(3))


def test_mu_is_projected_after_each_step():
    c = tiny_task()
    model = tiny_model(c)
    cfg = TrainConfig(lam=1e6, target_sparsity=0.9, lr_gates=10.0, optimizer="sgd")
    train_step(model, full_batch(c), build_optimizer(model, cfg), cfg, FrozenNoise(np.random.default_rng(0)))
    for _, _, g in model.gate_vectors():
        assert g.mu.data.min() >= -1.0 and g.mu.data.max() <= 1.0
    assert min(g.mu.data.min() for _, _, g in model.gate_vectors()) == -1.0


def sgd_descent_run(seed=0, steps=200):
    """Plain SGD on one fixed batch with frozen noise; returns (losses, grad norms)."""
    c = tiny_task(n=4, seed=seed)
    model = tiny_model(c, seed=seed)
    cfg = TrainConfig(lam=0.5, target_sparsity=0.3, lr_gates=2.0, lr_lora=0.08, weight_decay=0.0, optimizer="sgd")
    optim, noise = build_optimizer(model, cfg), FrozenNoise(np.random.default_rng(seed))
    rows = [train_step(model, full_batch(c), optim, cfg, noise, i) for i in range(steps)]
    return np.array([r["total_loss"] for r in rows]), np.array([r["grad_norm"] for r in rows])


@pytest.mark.parametrize("seed", range(3))
def test_sgd_descent_on_fixed_batch(seed):
    losses, norms = sgd_descent_run(seed)
    moving = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert (np.diff(moving) <= 0).all()
    assert norms[-1] / norms[0] < 0.1


def test_nan_weights_abort_with_step_number():
    c = tiny_task()
    model = tiny_model(c)
    model.blocks[0].wq.W0.data[0, 0] = np.nan
    cfg = TrainConfig()
    with pytest.raises(NumericError, match="step 7"):
        train_step(model, full_batch(c), build_optimizer(model, cfg), cfg, FrozenNoise(np.random.default_rng(0)), 7)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    c = tiny_task()
    model = tiny_model(c, kind="gates_plus_lora")
    rng = np.random.default_rng(2)
    for t in model.trainable_tensors():
        t.data[...] += rng.normal(0, 0.1, t.shape)
    for _, _, g in model.gate_vectors():
        g.project()
    ckpt = model_checkpoint(model, TrainConfig(lam=0.25))
    path_a, path_b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    write_checkpoint(path_a, ckpt)
    loaded = load_checkpoint(path_a)
    write_checkpoint(path_b, loaded)
    assert path_a.read_bytes() == path_b.read_bytes()
    assert loaded.train_config["lam"] == 0.25

    again = model_from_checkpoint(loaded)
    ids, _, mask = full_batch(c)
    assert np.array_equal(again.logits(ids, mask), model.logits(ids, mask))
    assert accuracy(again, c) == accuracy(model, c)


def test_pruned_checkpoint_round_trip(tmp_path):
    c = tiny_task()
    model = tiny_model(c)
    rng = np.random.default_rng(3)
    for _, _, g in model.gate_vectors():
        g.mu.data[...] = rng.choice([-1.0, 0.5], len(g), p=[0.3, 0.7])
        g.mu.data[0] = 0.5
    pruned = model.prune()
    write_checkpoint(tmp_path / "p.ckpt", model_checkpoint(pruned))
    back = model_from_checkpoint(load_checkpoint(tmp_path / "p.ckpt"))
    ids, _, mask = full_batch(c)
    ref = model.logits(ids, mask)
    assert np.array_equal(back.logits(ids, mask), ref)
    assert np.array_equal(pruned.logits(ids, mask), ref)


def test_checkpoint_shape_mismatch():
    c = tiny_task()
    small = tiny_model(c)
    ckpt = model_checkpoint(small)
    big = Encoder(ModelConfig(num_blocks=1, model_dim=16, num_heads=2, ffn_dim=16, vocab_size=32, max_seq_len=4))
    with pytest.raises(DimensionError, match="shape"):
        big.load_tensors(ckpt.tensors)


def test_format_errors():
    good = encode({"w": np.arange(6.0).reshape(2, 3)}, {"k": [1, 2]})
    assert decode(good).meta == {"k": [1, 2]}
    with pytest.raises(FormatError, match="magic"):
        decode(b"NOTMAGIC" + good[8:])
    with pytest.raises(FormatError, match="truncated"):
        decode(good[:5])
    with pytest.raises(FormatError, match="offset"):
        decode(good[:-3])
    with pytest.raises(FormatError, match="trailing"):
        decode(good + b"\x00")
    huge = MAGIC + struct.pack("<I", 1) + struct.pack("<H", 1) + b"w" + struct.pack("<BB", 0, 2)
    huge += struct.pack("<2I", 0xFFFFFFFF, 0xFFFFFFFF) + b"\x00" * 16
    with pytest.raises(FormatError, match="needs"):
        decode(huge)


def test_save_and_load_files(tmp_path):
    arr = np.array([[1.0, -0.0], [np.pi, 1e-300]])
    save_checkpoint(tmp_path / "x.ckpt", {"x": arr})
    back = load_checkpoint(tmp_path / "x.ckpt").tensors["x"]
    assert back.tobytes() == arr.tobytes()


# ---------------------------------------------------------------- fit


def test_fit_rejects_empty_dataset():
    c = tiny_task()
    empty = c.subset(np.arange(0))
    with pytest.raises(ConfigError):
        fit(tiny_model(c), empty, c, TrainConfig(max_steps=1))


def test_fit_writes_outputs_and_is_reproducible(tmp_path):
    def run(out):
        c = tiny_task(n=80, seed=1)
        train, ev = split_corpus(c)
        return fit(tiny_model(c), train, ev, TrainConfig(max_steps=12, eval_every=5, batch_size=8, lr_gates=1e-2), out)

    res = run(tmp_path / "a")
    run(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["best.ckpt", "final.ckpt", "metrics.csv"]
    text = (tmp_path / "a" / "metrics.csv").read_text()
    assert text == (tmp_path / "b" / "metrics.csv").read_text()
    assert text.splitlines()[0] == ",".join(METRIC_COLUMNS)
    assert [r["step"] for r in res.history] == [5, 10, 12]
    assert text == metrics_csv(res.history)


def test_final_checkpoint_reproduces_last_accuracy():
    c = tiny_task(n=80, seed=2)
    train, ev = split_corpus(c)
    res = fit(tiny_model(c), train, ev, TrainConfig(max_steps=10, eval_every=10, batch_size=8, lr_gates=1e-2))
    assert accuracy(model_from_checkpoint(res.final), ev) == res.last["accuracy"]
    assert accuracy(model_from_checkpoint(res.best), ev) == res.best_accuracy


def test_gates_plus_lora_matches_gates_only_at_step_zero():
    c = tiny_task()
    ids, _, mask = full_batch(c)
    a = tiny_model(c, kind="gates_plus_lora").logits(ids, mask)
    b = tiny_model(c, kind="gates_only").logits(ids, mask)
    assert np.array_equal(a, b)


def planted_run(s, lam, lr_gates, seed=0, steps=2500, kind="gates_plus_lora"):
    spec = PlantedTaskSpec(model_dim=32, informative_dims=tuple(range(16)), num_samples=5000, seed=seed)
    corpus = generate_planted(spec)
    train, ev = split_corpus(corpus)
    cfg = ModelConfig(num_blocks=1, model_dim=32, num_heads=2, ffn_dim=64, vocab_size=spec.vocab_size,
                      max_seq_len=spec.seq_len, init_seed=seed, adapter_kind=kind)
    tc = TrainConfig(lam=lam, target_sparsity=s, lr_gates=lr_gates, lr_lora=3e-3, max_steps=steps,
                     eval_every=steps, seed=seed)
    return fit(Encoder(cfg, embedding=corpus.embedding), train, ev, tc).last


@pytest.mark.slow
def test_planted_task_reaches_target_sparsity():
    row = planted_run(0.3, 1.0, 1e-2)
    assert row["achieved_sparsity"] >= 0.25
    assert row["accuracy"] >= 0.95


@pytest.mark.slow
def test_no_pressure_control_stays_dense():
    # Control run at the default gate learning rate.
    row = planted_run(0.0, 0.0, 1e-3)
    assert row["achieved_sparsity"] < 0.05
