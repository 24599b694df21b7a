import math

import numpy as np
import pytest
from conftest import full_gradcheck, make_table, random_trajs, small_corpus

from citymob.autodiff import Tensor
from citymob.data import pad_batch
from citymob.model import DualTower, ModelConfig, cross_entropy, score
from citymob.train import (AdamW, CheckpointError, NumericalError, TrainConfig, aggregate_loss,
                           clip_grad_norm, corpus_digest, evaluate, load_checkpoint,
                           optimizer_from_checkpoint, read_metrics_log, save_checkpoint,
                           train_loop, train_step)

CFG = ModelConfig(d=16, layers=1, heads=2, experts=2, top_k=1, max_seq_len=40)


def test_score_identity_and_zero_rows():
    I = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
    assert np.array_equal(score(I, Tensor(np.eye(4))).data, I.data)
    assert not score(Tensor(np.zeros((1, 1, 4))), Tensor(np.ones((5, 4)))).data.any()


def test_loss_uniform_and_dominant():
    assert abs(cross_entropy(Tensor(np.zeros((1, 2, 7))), [[3, 0]]).item() - math.log(7)) < 1e-12
    lg = np.zeros((1, 1, 5))
    lg[0, 0, 2] = 1e4
    assert cross_entropy(Tensor(lg), [[2]]).item() < 1e-12


def test_adamw_single_step_oracle():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    p.grad = np.array([0.1, -0.3, 0.0])
    opt = AdamW([p], lr=0.01, weight_decay=0.1)
    opt.step()
    # first step: m_hat = g, v_hat = g^2 so the update is lr * g / (|g| + eps)
    g = np.array([0.1, -0.3, 0.0])
    ref = np.array([1.0, -2.0, 0.5]) * (1 - 0.001) - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.data, ref, rtol=0, atol=1e-15)


def test_clip_grad_norm():
    a, b = Tensor([0.0], requires_grad=True), Tensor([0.0], requires_grad=True)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == 5.0
    assert abs(math.hypot(a.grad[0], b.grad[0]) - 1.0) < 1e-9
    a.grad, b.grad = np.array([0.3]), np.array([0.4])
    clip_grad_norm([a, b], 1.0)
    assert a.grad[0] == 0.3


def test_full_gradient_check():
    errs = full_gradcheck()
    assert max(errs.values()) < 1e-4, max(errs, key=errs.get)


def one_batch():
    t = make_table(10)
    return t, pad_batch(random_trajs(t, 4, 8, seed=1), t, 10)


def test_zero_lr_keeps_parameters():
    m = DualTower(ModelConfig(d=8, heads=2, max_seq_len=10), 0)
    t, b = one_batch()
    before = [p.data.copy() for p in m.parameters()]
    opt = AdamW(m.parameters(), 0.0)
    train_step(m, opt, b, t, np.random.default_rng(0), 1.0)
    assert all(np.array_equal(x, p.data) for x, p in zip(before, m.parameters()))


def test_small_step_decreases_loss():
    m = DualTower(ModelConfig(d=8, heads=2, max_seq_len=10), 3)
    t, b = one_batch()
    opt = AdamW(m.parameters(), 1e-5)
    before, _ = train_step(m, opt, b, t, None, 0.0)
    after = cross_entropy(m.logits(b, t), b.targets).item()
    assert after < before


def test_nonfinite_loss_aborts():
    m = DualTower(ModelConfig(d=8, heads=2, max_seq_len=10), 0)
    t, b = one_batch()
    m.loc.proj.bias.data[:] = np.nan
    with pytest.raises(NumericalError):
        train_step(m, AdamW(m.parameters(), 1e-3), b, t, None, 1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(seed=None)
    with pytest.raises(ValueError):
        TrainConfig(seed=0, lr=-1)


@pytest.fixture(scope="module")
def tiny():
    return small_corpus(users=(15, 20), days=3)


def test_training_deterministic_log(tiny, tmp_path):
    cfg = TrainConfig(seed=5, epochs=2, batch_size=8)
    r1 = train_loop(DualTower(CFG, 5), tiny, cfg, log_path=tmp_path / "a.csv")
    r2 = train_loop(DualTower(CFG, 5), tiny, cfg, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = read_metrics_log(tmp_path / "a.csv")
    assert {(r["split"], r["city"]) for r in rows} == {("train", "all"), ("val", "all"),
                                                       ("val", "c0"), ("val", "c1")}
    assert r1.history == r2.history


def test_validation_aggregate_is_unweighted_mean(tiny):
    per_city = evaluate(DualTower(CFG, 0), tiny, "val")
    assert aggregate_loss(per_city) == np.mean([m.loss for m in per_city.values()])


def test_early_stopping_restores_best(tiny):
    seen = []
    cfg = TrainConfig(seed=1, lr=0.5, epochs=30, patience=2, batch_size=8, clip_norm=0)
    m = DualTower(CFG, 1)
    res = train_loop(m, tiny, cfg, on_epoch=lambda e, h: seen.append(h[-1][3]))
    assert res.epochs_run < 30 and res.epochs_run - res.best_epoch == 2
    assert res.best_val == min(seen)
    assert aggregate_loss(evaluate(m, tiny, "val")) == res.best_val


def test_checkpoint_roundtrip_bit_exact(tiny, tmp_path):
    m = DualTower(CFG, 2)
    res = train_loop(m, tiny, TrainConfig(seed=2, epochs=2, batch_size=8),
                     checkpoint_path=tmp_path / "ck.bin")
    ck = load_checkpoint(tmp_path / "ck.bin", CFG, corpus_digest(tiny))
    assert ck.epoch == res.best_epoch and ck.step == res.optimizer.t
    for (n, p), (n2, q) in zip(m.named_parameters(), ck.model.named_parameters()):
        assert n == n2 and np.array_equal(p.data, q.data)
    assert aggregate_loss(evaluate(ck.model, tiny, "val")) == res.best_val
    opt = optimizer_from_checkpoint(ck, TrainConfig(seed=2))
    assert all(np.array_equal(a, b) for a, b in zip(opt.v, res.optimizer.v))
    manifest = (tmp_path / "ck.bin.manifest").read_text()
    assert "loc.encoder.poi.weight\t28x8" in manifest


def test_checkpoint_refuses_mismatch(tiny, tmp_path):
    save_checkpoint(tmp_path / "ck.bin", DualTower(CFG, 0), None, 0, corpus_digest(tiny))
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(tmp_path / "ck.bin", ModelConfig(d=16, layers=2, heads=2, max_seq_len=40))
    with pytest.raises(CheckpointError, match="corpus"):
        load_checkpoint(tmp_path / "ck.bin", CFG, b"x" * 32)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    (tmp_path / "bad.bin.manifest").write_text((tmp_path / "ck.bin.manifest").read_text())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")
