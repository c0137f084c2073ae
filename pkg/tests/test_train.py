from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from smmix import autodiff as ad
from smmix.mixing import make_rng
from smmix.train import (AdamW, StepResult, Trainer, TrainConfig, TrainingError, decays, evaluate, lr_at,
                         metrics_from_logits, one_hot, train_step, unmixed_pass)
from smmix.vit import ModelConfig, VisionTransformer

from conftest import TINY, randomize_head, tiny_model

TOY = ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=16, num_heads=2, depth=1, num_classes=4)


def toy_set(n=32, seed=0):
    r = np.random.default_rng(seed)
    labels = np.arange(n) % 4
    protos = r.random((4, 1, 8, 8))
    images = protos[labels] + 0.05 * r.normal(size=(n, 1, 8, 8))
    return images.clip(0, 1), labels


def cfg_for(mode="smmix", **kw):
    base = dict(model=TINY, mix_mode=mode, batch_size=4, epochs=2, dtype="float64", seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- step structure ----------------------------------------------------

def test_smmix_step_two_forwards_one_backward():
    x, y = toy_set(4)
    model = tiny_model()
    res = train_step(model, None, x, y, cfg_for(switch_prob=0.0), make_rng(0))
    assert (res.mode, res.forwards, res.backwards) == ("smmix", 2, 1)
    assert res.batch.plans is not None


def test_cutmix_baseline_step_is_one_forward():
    x, y = toy_set(4)
    res = train_step(tiny_model(), None, x, y, cfg_for("cutmix", switch_prob=0.0, loss_fine=False,
                                                        loss_con=False), make_rng(0))
    assert (res.mode, res.forwards, res.backwards) == ("cutmix", 1, 1)


@pytest.mark.parametrize("prob,expected", [(0.0, {"smmix"}), (1.0, {"mixup"})])
def test_switch_prob_limits(prob, expected):
    x, y = toy_set(4)
    model = tiny_model()
    rng = make_rng(3)
    modes = {train_step(model, None, x, y, cfg_for(switch_prob=prob), rng).mode for _ in range(10)}
    assert modes == expected


def test_mixup_step_is_single_pass():
    x, y = toy_set(4)
    res = train_step(tiny_model(), None, x, y, cfg_for(switch_prob=1.0), make_rng(0))
    assert (res.forwards, res.backwards) == (1, 1)
    assert res.losses["l_fine"] == 0 and res.losses["l_con"] == 0


def test_switch_prob_half_uses_both():
    rng = make_rng(4)
    cfg = cfg_for()
    from smmix.train import choose_mode
    modes = [choose_mode(cfg, rng) for _ in range(2000)]
    assert abs(modes.count("mixup") / 2000 - 0.5) < 0.05


def test_none_mode_total_equals_cls():
    x, y = toy_set(4)
    model = tiny_model()
    randomize_head(model, np.random.default_rng(0))
    res = train_step(model, None, x, y, cfg_for("none"), make_rng(0))
    assert (res.forwards, res.backwards) == (1, 1)
    assert res.losses["l_total"] == res.losses["l_cls"]


def test_nan_loss_aborts_with_step():
    x, y = toy_set(4)
    model = tiny_model()
    model.params["head.bias"].data[:] = np.nan
    with pytest.raises(TrainingError, match="step 7"):
        train_step(model, None, x, y, cfg_for("none"), make_rng(0), step=7)


def test_unmixed_pass_populates_no_gradient():
    x, _ = toy_set(4)
    model = tiny_model()
    model.zero_grad()
    alphas, probs = unmixed_pass(model, x)
    assert all(p.grad is None or not p.grad.any() for p in model.params.values())
    assert alphas.shape == (4, 2, 2) and probs.shape == (4, 4)


def test_step_updates_parameters():
    x, y = toy_set(4)
    model = tiny_model()
    before = {k: p.data.copy() for k, p in model.params.items()}
    train_step(model, AdamW(model.params), x, y, cfg_for(switch_prob=0.0), make_rng(0), lr=1e-3)
    assert any(not np.array_equal(before[k], p.data) for k, p in model.params.items())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    TrainConfig(batch_size=1, mix_mode="none")
    with pytest.raises(ValueError):
        TrainConfig(switch_prob=1.5)
    with pytest.raises(ValueError):
        TrainConfig(mix_mode="bogus")
    cfg = TrainConfig(lr=3e-4, label_smoothing=0.1)
    assert TrainConfig.from_flat(cfg.to_flat()) == cfg


# -- optimizer and schedule --------------------------------------------

def test_decay_selection():
    assert decays("blocks.0.attn.qkv.weight", (8, 24))
    assert not decays("blocks.0.attn.qkv.bias", (24,))
    assert not decays("pos_embed", (4, 8))
    assert not decays("blocks.0.norm1.weight", (8,))


def test_adamw_first_step_matches_closed_form():
    w = ad.Tensor(np.array([[1.0, -2.0]]), requires_grad=True, name="w")
    b = ad.Tensor(np.array([0.5]), requires_grad=True, name="b")
    w.grad = np.array([[0.1, 0.3]])
    b.grad = np.array([-0.2])
    opt = AdamW({"w": w, "b": b}, lr=0.01, weight_decay=0.1)
    opt.step()
    # bias-corrected first step moves each entry by lr * sign(g) (eps aside)
    np.testing.assert_allclose(w.data, np.array([[1.0, -2.0]]) * (1 - 0.001) - 0.01 * np.sign([[0.1, 0.3]]),
                               atol=1e-8)
    np.testing.assert_allclose(b.data, [0.5 + 0.01], atol=1e-8)


def test_lr_schedule():
    assert lr_at(0, 100, 1.0, 5) == pytest.approx(0.2)
    assert lr_at(4, 100, 1.0, 5) == pytest.approx(1.0)
    assert lr_at(5, 100, 1.0, 5) == pytest.approx(1.0)
    assert lr_at(100, 100, 1.0, 5, 0.01) == pytest.approx(0.01)
    mid = lr_at(5 + 95 // 2, 100, 1.0, 5)
    assert 0.45 < mid < 0.55
    lrs = [lr_at(s, 100, 1.0, 5) for s in range(5, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_trainer_default_warmup_is_five_percent():
    x, y = toy_set(400)
    t = Trainer(cfg_for(batch_size=4, epochs=2), x, y)
    assert t.total_steps == 200 and t.warmup == 10


def test_one_hot_smoothing():
    np.testing.assert_allclose(one_hot(np.array([1]), 4), [[0, 1, 0, 0]])
    np.testing.assert_allclose(one_hot(np.array([1]), 4, 0.2), [[0.05, 0.85, 0.05, 0.05]])


def test_toy_loss_halves_within_200_steps():
    x, y = toy_set(32)
    cfg = TrainConfig(model=TOY, mix_mode="none", batch_size=8, epochs=50, lr=1e-3, warmup_steps=0,
                      cosine_total_steps=10**9, dtype="float64")
    t = Trainer(cfg, x, y)
    t.run(steps=200)
    first, last = t.history[0]["l_total"], np.mean([r["l_total"] for r in t.history[-4:]])
    assert abs(first - math.log(4)) < 1e-9  # zero head
    assert last <= 0.5 * first


# -- evaluation --------------------------------------------------------

def test_uniform_model_is_chance():
    x, y = toy_set(400)
    m = evaluate(tiny_model(), x, y)
    # tied logits resolve to class 0, a quarter of a balanced set
    assert m["top1"] == pytest.approx(0.25)
    assert m["mean_ce"] == pytest.approx(math.log(4))
    assert m["per_class"] == [1.0, 0.0, 0.0, 0.0]


def test_perfect_memorisation_scores_one():
    labels = np.array([0, 1, 2, 3, 3])
    logits = np.eye(4)[labels] * 10
    assert metrics_from_logits(logits, labels, 4)["top1"] == 1.0


def test_evaluate_deterministic_and_pure():
    x, y = toy_set(20)
    model = tiny_model()
    randomize_head(model, np.random.default_rng(1))
    before = {k: p.data.copy() for k, p in model.params.items()}
    a, b = evaluate(model, x, y), evaluate(model, x, y, batch_size=7)
    assert a == b
    assert all(np.array_equal(before[k], p.data) for k, p in model.params.items())


# -- full runs ---------------------------------------------------------

def _read(path):
    return path.read_text()


def test_metrics_csv_deterministic(tmp_path):
    x, y = toy_set(16)
    for name in ("a", "b"):
        t = Trainer(cfg_for(epochs=3, dtype="float32"), x, y, x[:8], y[:8])
        t.run(metrics_path=tmp_path / f"{name}.csv")
    a, b = _read(tmp_path / "a.csv"), _read(tmp_path / "b.csv")
    assert a == b
    rows = list(csv.DictReader(a.splitlines()))
    assert len(rows) == 12 and rows[0].keys() == {"step", "epoch", "mode", "l_cls", "l_fine", "l_con",
                                                 "l_total", "lr", "val_top1"}
    assert [r["val_top1"] != "" for r in rows] == [i % 4 == 3 for i in range(12)]


def test_resume_equals_straight_run(tmp_path):
    x, y = toy_set(40)
    cfg = cfg_for(epochs=2, dtype="float32")
    straight = Trainer(cfg, x, y)
    straight.run(steps=20)
    first = Trainer(cfg, x, y)
    first.run(steps=10)
    first.save(tmp_path / "c.smmx")
    resumed = Trainer(cfg, x, y)
    resumed.load(tmp_path / "c.smmx")
    resumed.run(steps=10)
    assert resumed.step == straight.step == 20
    for k, p in straight.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[k].data), k
    assert [r["mode"] for r in straight.history[10:]] == [r["mode"] for r in resumed.history]
