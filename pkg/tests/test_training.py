import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kv2ct.errors import ConfigError, NumericError, ShapeError
from kv2ct.model import ModelConfig, build_model
from kv2ct.training import (TrainConfig, lr_schedule, make_optimizer, predict, smooth_l1, train,
                            write_curve)

TINY = ModelConfig(input_hw=(8, 8), patch_size=2, embed_dim=16, encoder_depths=(1,), decoder_depths=(1,),
                   num_heads=2, window_size=2, out_depth=4)


@pytest.fixture(scope="module")
def one_pair():
    rng = np.random.default_rng(0)
    kv = rng.random((1, 2, 8, 8)).astype(np.float32)
    ct = rng.uniform(-300, 300, (1, 4, 4, 4)).astype(np.float32)
    return kv, ct


# -- smooth-L1 ------------------------------------------------------------------------------

def test_smooth_l1_examples():
    z = np.zeros((2, 2))
    assert smooth_l1(z, z) == 0.0
    assert smooth_l1(np.array([1.0]), np.array([0.0]), beta=1.0) == 0.5
    assert smooth_l1(np.array([0.25]), np.array([0.0]), beta=0.25) == pytest.approx(0.125)
    assert smooth_l1(np.array([3.0]), np.array([0.0]), beta=1.0) == 2.5


def test_smooth_l1_torch_matches_numpy():
    rng = np.random.default_rng(1)
    a, b = rng.normal(0, 2, 50), rng.normal(0, 2, 50)
    t = smooth_l1(torch.from_numpy(a), torch.from_numpy(b), 0.7)
    assert t.item() == pytest.approx(smooth_l1(a, b, 0.7), abs=1e-14)


def test_smooth_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        smooth_l1(np.zeros(3), np.zeros(4))


def test_smooth_l1_continuous_at_knee():
    beta = 0.6
    def fn(e):
        return smooth_l1(np.array([e]), np.array([0.0]), beta)
    assert abs(fn(beta - 1e-9) - fn(beta + 1e-9)) < 1e-8
    assert fn(beta) == 0.5 * beta
    # gradient continuity: the slope approaches 1 from both sides
    e = torch.tensor([beta - 1e-9, beta + 1e-9], dtype=torch.float64, requires_grad=True)
    g_lo, g_hi = (torch.autograd.grad(smooth_l1(e[i:i + 1], torch.zeros(1, dtype=torch.float64), beta), e)[0][i]
                  for i in range(2))
    assert abs(g_lo.item() - g_hi.item()) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 10.0))
def test_smooth_l1_non_negative(values, beta):
    a = np.asarray(values)
    assert smooth_l1(a, np.zeros_like(a), beta) >= 0.0


# -- learning-rate schedule -----------------------------------------------------------------

def test_lr_examples():
    cfg = TrainConfig(epochs=100, warmup_epochs=20, lr_peak=5e-4, lr_init=1e-7)
    assert lr_schedule(0, cfg) == 1e-7
    assert lr_schedule(20, cfg) == 5e-4
    assert lr_schedule(1, TrainConfig(epochs=2, warmup_epochs=0, lr_peak=1.0)) == pytest.approx(0.5)


def test_lr_warmup_linear_and_cosine_monotone():
    cfg = TrainConfig(epochs=50, warmup_epochs=10, lr_peak=1e-3, lr_init=1e-5)
    lrs = [lr_schedule(e, cfg) for e in range(50)]
    assert np.allclose(np.diff(lrs[:11]), (1e-3 - 1e-5) / 10)
    assert all(a > b for a, b in zip(lrs[10:], lrs[11:]))


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"warmup_epochs": 5, "epochs": 5},
                                {"beta1": 0.999, "beta2": 0.9}, {"smooth_l1_beta": 0.0}])
def test_train_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# -- AdamW -----------------------------------------------------------------------------------

def test_adamw_two_steps_closed_form():
    """Hand-computed AdamW on f = 0.5 (a x^2 + b y^2)."""
    a, b = 2.0, 0.5
    theta0 = np.array([1.5, -2.0])
    cfg = TrainConfig(lr_init=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01)
    p = torch.tensor(theta0, dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([p], cfg)
    coef = np.array([a, b])

    theta, m, v = theta0.copy(), np.zeros(2), np.zeros(2)
    lr = cfg.lr_init
    for t in (1, 2):
        loss = 0.5 * (a * p[0] ** 2 + b * p[1] ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        g = coef * theta
        theta = theta * (1 - lr * cfg.weight_decay)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        assert np.max(np.abs(p.detach().numpy() - theta)) < 1e-12


# -- training loop ---------------------------------------------------------------------------

def test_overfit_one_pair(one_pair):
    kv, ct = one_pair
    res = train(kv, ct, TINY, TrainConfig(epochs=300, batch_size=1, lr_peak=1e-2, warmup_epochs=10,
                                          weight_decay=0.0))
    losses = np.array([l for _, _, l in res.curve])[10:]
    assert np.mean(np.diff(losses) < 0) >= 0.9
    assert np.abs(predict(res.net, kv, res.normalization) - ct).mean() < 20.0
    assert res.best_loss == min(l for _, _, l in res.curve)


def test_zero_learning_rate_keeps_params(one_pair):
    kv, ct = one_pair
    net = build_model(TINY, seed=0)
    before = [p.detach().clone() for p in net.parameters()]
    res = train(kv, ct, TINY, TrainConfig(epochs=4, batch_size=1, lr_peak=0.0, lr_init=0.0, warmup_epochs=1),
                net=net)
    assert all(torch.equal(a, b) for a, b in zip(before, res.net.parameters()))
    losses = [l for _, _, l in res.curve]
    assert len(set(losses)) == 1


def test_same_seed_same_curve():
    rng = np.random.default_rng(2)
    kv = rng.random((6, 2, 8, 8)).astype(np.float32)
    ct = rng.uniform(-500, 500, (6, 4, 4, 4)).astype(np.float32)
    cfg = TrainConfig(epochs=5, batch_size=2, lr_peak=1e-3, warmup_epochs=1, seed=7)
    c1 = train(kv, ct, TINY, cfg).curve
    c2 = train(kv, ct, TINY, cfg).curve
    assert c1 == c2
    c3 = train(kv, ct, TINY, TrainConfig(epochs=5, batch_size=2, lr_peak=1e-3, warmup_epochs=1, seed=8)).curve
    assert c3 != c1


def test_nan_input_names_the_batch(one_pair):
    kv, ct = one_pair
    kv = np.concatenate([kv, kv])
    kv[1, 0, 0, 0] = np.nan
    ct = np.concatenate([ct, ct])
    with pytest.raises(NumericError, match=r"batch \d"):
        train(kv, ct, TINY, TrainConfig(epochs=2, batch_size=1, warmup_epochs=0))


def test_train_rejects_mismatched_targets(one_pair):
    kv, ct = one_pair
    with pytest.raises(ShapeError):
        train(kv, ct[:, :3], TINY, TrainConfig(epochs=1, warmup_epochs=0))
    with pytest.raises(ShapeError):
        train(kv[:0], ct[:0], TINY, TrainConfig(epochs=1, warmup_epochs=0))


def test_curve_csv(tmp_path):
    write_curve([(0, 1e-7, 0.5), (1, 5e-4, 0.25)], tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,loss" and lines[2] == "1,0.0005,0.25"
