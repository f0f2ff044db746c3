"""Optimizer arithmetic, pair sampling, and the training loop contract."""

import numpy as np
import pytest

from dualtrack import (SGD, ModelConfig, Parameter, SynthSpec, TrackerModel,
                       TrainSettings, TrainingDiverged, make_fixed_pairs,
                       synth_sequence, train)


def test_sgd_momentum_hand_computed():
    p = Parameter("p", np.array([1.0, -2.0]))
    opt = SGD({"p": p}, lr=0.1, momentum=0.5)

    p.grad[:] = [1.0, 2.0]
    opt.step()
    # v1 = -lr*g = [-0.1, -0.2]
    assert np.allclose(p.data, [0.9, -2.2], atol=1e-15)

    p.grad[:] = [1.0, 0.0]
    opt.step()
    # v2 = 0.5*v1 - lr*g = [-0.15, -0.1]
    assert np.allclose(p.data, [0.75, -2.3], atol=1e-15)

    opt.zero_grad()
    assert np.all(p.grad == 0.0)


def test_sgd_global_norm_clipping():
    a = Parameter("a", np.zeros(2))
    b = Parameter("b", np.zeros(1))
    opt = SGD({"a": a, "b": b}, lr=1.0, momentum=0.0)
    a.grad[:] = [3.0, 0.0]
    b.grad[:] = [4.0]
    assert opt.global_grad_norm() == pytest.approx(5.0, abs=1e-12)
    returned = opt.clip_gradients(1.0)
    assert returned == pytest.approx(5.0, abs=1e-12)
    assert np.allclose(a.grad, [0.6, 0.0], atol=1e-12)
    assert np.allclose(b.grad, [0.8], atol=1e-12)
    # cap above the norm leaves gradients untouched
    before = a.grad.copy()
    opt.clip_gradients(10.0)
    assert np.array_equal(a.grad, before)
    # non-positive cap disables clipping
    opt.clip_gradients(0.0)
    assert np.array_equal(a.grad, before)


def test_settings_validation():
    for bad in (TrainSettings(steps=0), TrainSettings(lr=0.0),
                TrainSettings(momentum=1.0), TrainSettings(batch_size=0),
                TrainSettings(max_gap=0)):
        with pytest.raises(ValueError):
            bad.validate()
    TrainSettings().validate()


def _sequences(n=2):
    return [synth_sequence(SynthSpec(seed=s, length=6, frame_size=128,
                                     target_size=36.0, velocity=(2.0, 1.0)))
            for s in range(n)]


def test_make_fixed_pairs_deterministic_and_normalized():
    cfg = ModelConfig.tiny()
    seqs = _sequences()
    settings = TrainSettings(seed=3)
    a = make_fixed_pairs(seqs, 5, settings, cfg.template_size, cfg.search_size)
    b = make_fixed_pairs(seqs, 5, settings, cfg.template_size, cfg.search_size)
    assert len(a) == 5
    for (ta, sa, ga), (tb, sb, gb) in zip(a, b):
        assert np.array_equal(ta, tb) and np.array_equal(sa, sb)
        assert ga.to_xywh() == gb.to_xywh()
        assert ta.shape == (cfg.template_size, cfg.template_size, 3)
        assert sa.shape == (cfg.search_size, cfg.search_size, 3)
        # gt stays near the middle of the search crop and roughly 1/3 scale
        assert 0.2 < ga.cx < 0.8 and 0.2 < ga.cy < 0.8
        assert 0.15 < ga.w < 0.6 and 0.15 < ga.h < 0.6
    c = make_fixed_pairs(seqs, 5, TrainSettings(seed=4),
                         cfg.template_size, cfg.search_size)
    assert any(not np.array_equal(pa[1], pc[1]) for pa, pc in zip(a, c))


def test_train_reduces_loss_and_is_deterministic():
    cfg = ModelConfig.tiny()
    seqs = _sequences()
    settings = TrainSettings(steps=30, lr=0.005, batch_size=2, seed=0)
    pairs = make_fixed_pairs(seqs, 4, settings, cfg.template_size,
                             cfg.search_size)

    model = TrackerModel(cfg, seed=1)
    records = train(model, pairs, settings)
    assert [r.step for r in records] == list(range(30))
    assert all(np.isfinite(r.loss) and np.isfinite(r.cls) and np.isfinite(r.reg)
               for r in records)
    assert min(r.loss for r in records[1:]) < records[0].loss

    rerun = train(TrackerModel(cfg, seed=1), pairs, settings)
    assert [r.loss for r in rerun] == [r.loss for r in records]


def test_cosine_schedule_endpoints():
    s = TrainSettings(steps=101, lr=1.0, lr_schedule="cosine")
    assert s.lr_at(0) == pytest.approx(1.0, abs=1e-12)
    assert s.lr_at(100) == pytest.approx(0.01, abs=1e-12)
    assert s.lr_at(50) == pytest.approx((1.0 + 0.01) / 2.0, abs=1e-12)
    const = TrainSettings(steps=10, lr=0.3)
    assert const.lr_at(0) == const.lr_at(9) == 0.3
    with pytest.raises(ValueError):
        TrainSettings(lr_schedule="linear").validate()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_raises_on_divergence():
    cfg = ModelConfig.tiny()
    pairs = make_fixed_pairs(_sequences(1), 2, TrainSettings(seed=0),
                             cfg.template_size, cfg.search_size)
    model = TrackerModel(cfg, seed=1)
    # an absurd learning rate with no clipping blows the loss up
    settings = TrainSettings(steps=60, lr=1e6, batch_size=1, grad_clip=0.0)
    with pytest.raises(TrainingDiverged) as exc:
        train(model, pairs, settings)
    assert exc.value.step >= 1
    assert not np.isfinite(exc.value.value) or exc.value.value != exc.value.value
