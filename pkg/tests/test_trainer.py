import dataclasses
import math

import numpy as np
import pytest

from nodealign import covalign, trainer
from nodealign.numerics import Tensor, check_gradients
from nodealign.synthdata import SynthConfig
from nodealign.trainer import (CheckpointVersionError, NonFiniteLossError, TrainConfig,
                               TrainState, checkpoint_bytes, composite_loss, evaluate,
                               load_checkpoint, save_checkpoint, sgd_step, train)


def tiny(**kw):
    base = dict(epochs=4, stats_epochs=2, steps_per_epoch=5, eval_batches=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_run():
    seen = []
    res = train(tiny(), on_step=lambda st, ep, bd: seen.append((ep, st.mask_builds, bd)))
    return res, seen


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lambda1, cfg.lambda2) == (0.1, 0.1)
    assert (cfg.lr, cfg.momentum, cfg.weight_decay) == (0.0025, 0.99, 1e-4)
    assert (cfg.k, cfg.m, cfg.stats_epochs, cfg.ood_p, cfg.temperature) == (4, 1, 30, 0.03, 0.06)
    assert cfg.data.tau == 0.6 and cfg.data.num_classes == 8


def test_composite_examples():
    cfg = TrainConfig()
    total, bd = composite_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0), cfg)
    assert total.item() == 0.0
    total, bd = composite_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), cfg)
    assert abs(total.item() - 3.3) < 1e-12 and abs(bd.weighted_sum() - bd.total) < 1e-12
    with pytest.raises(NonFiniteLossError, match="l_na"):
        composite_loss(Tensor(1.0), Tensor(math.nan), Tensor(3.0), cfg)


@pytest.mark.parametrize("seed", range(20))
def test_composite_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=3), requires_grad=True) for _ in range(3))
    from nodealign import numerics as nx
    fn = lambda: composite_loss(nx.sum_(a * a), nx.sum_(nx.exp(b)), nx.sum_(c * b),
                                TrainConfig())[0]
    assert check_gradients(fn, [a, b, c]) < 1e-4


def test_sgd_examples():
    theta = Tensor(np.array(1.0))
    v = [np.zeros(())]
    sgd_step([theta], [np.array(1.0)], v, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert theta.data == pytest.approx(0.9)
    theta = Tensor(np.array([1.0, 2.0]))
    v = [np.array([1.0, 1.0])]
    sgd_step([theta], [np.zeros(2)], v, lr=0.1, momentum=0.5, weight_decay=0.0)
    np.testing.assert_allclose(v[0], [0.5, 0.5])
    np.testing.assert_allclose(theta.data, [0.95, 1.95])
    theta, v, g = Tensor(np.array(0.0)), [np.zeros(())], np.array(1.0)
    for _ in range(2):
        sgd_step([theta], [g], v, lr=0.1, momentum=0.9, weight_decay=0.0)
    # v1 = 1, v2 = 1.9; theta = -0.1 - 0.19
    assert theta.data == pytest.approx(-0.29, abs=1e-15)
    with pytest.raises(ValueError):
        sgd_step([Tensor(np.zeros(2))], [np.zeros(3)], [np.zeros(2)])


def test_identity_holds_every_step(tiny_run):
    _, seen = tiny_run
    assert len(seen) == 20
    for _, _, bd in seen:
        assert abs(bd.total - bd.weighted_sum()) < 1e-9


def test_schedule_contract(tiny_run):
    res, seen = tiny_run
    for ep, builds, bd in seen:
        if ep < 2:
            assert bd.l_na == 0.0 and builds == 0
        else:
            assert builds == 1
    # the mask is built on the first step of epoch n
    first = [i for i, (ep, _, _) in enumerate(seen) if ep == 2][0]
    assert seen[first][1] == 1 and seen[first - 1][1] == 0
    assert res.state.mask_builds == 1
    assert [r.l_na for r in res.records[:2]] == [0.0, 0.0]
    assert np.all(np.isfinite([r.total for r in res.records]))


def test_build_mask_called_once(monkeypatch):
    calls = []
    real = covalign.build_mask

    def spy(*a, **kw):
        calls.append(1)
        return real(*a, **kw)
    monkeypatch.setattr(covalign, "build_mask", spy)
    train(tiny())
    assert len(calls) == 1


def test_determinism(tiny_run, tmp_path):
    res, _ = tiny_run
    again = train(tiny())
    assert [r.csv_row() for r in again.records] == [r.csv_row() for r in res.records]
    assert checkpoint_bytes(again.state, again.config) == checkpoint_bytes(res.state, res.config)


@pytest.mark.parametrize("lam,switch", [("lambda1", "use_cnc"), ("lambda2", "use_na")])
def test_zero_weight_matches_removed_loss(lam, switch):
    a = train(tiny(**{lam: 0.0}))
    b = train(tiny(**{switch: False}))
    for (name, p), (_, q) in zip(a.state.model.named_parameters(),
                                 b.state.model.named_parameters()):
        assert np.array_equal(p.data, q.data), name


def test_checkpoint_roundtrip(tiny_run, tmp_path):
    res, _ = tiny_run
    path = tmp_path / "model.ckpt"
    save_checkpoint(res.state, res.config, path)
    state, cfg = load_checkpoint(path)
    assert cfg == res.config
    assert state.step == res.state.step and state.mask_builds == 1
    for (_, p), (_, q) in zip(state.model.named_parameters(), res.state.model.named_parameters()):
        assert np.array_equal(p.data, q.data)
    assert np.array_equal(state.mask.mask, res.state.mask.mask)
    assert np.array_equal(state.stats.xi, res.state.stats.xi)
    assert checkpoint_bytes(state, cfg) == path.read_bytes()


def test_checkpoint_version_error(tiny_run, tmp_path):
    res, _ = tiny_run
    blob = checkpoint_bytes(res.state, res.config).replace(b'"version": 1', b'"version": 9', 1)
    (tmp_path / "bad.ckpt").write_bytes(blob)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"nothing here")
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "junk.ckpt")
    other = tiny()
    other.data = dataclasses.replace(other.data, embed_dim=8)
    save_checkpoint(res.state, res.config, tmp_path / "ok.ckpt")
    with pytest.raises(CheckpointVersionError):
        evaluate(tmp_path / "ok.ckpt", other, batches=1)


def test_evaluate_is_pure(tiny_run, tmp_path):
    res, _ = tiny_run
    path = tmp_path / "m.ckpt"
    save_checkpoint(res.state, res.config, path)
    before = checkpoint_bytes(res.state, res.config)
    a = evaluate(path, batches=3)
    b = evaluate(res.state, res.config, batches=3)
    assert (a.source_acc, a.target_acc) == (b.source_acc, b.target_acc)
    assert checkpoint_bytes(res.state, res.config) == before
    assert a.epoch == -1


def test_untrained_classifier_near_chance():
    accs = []
    for seed in range(30):
        cfg = TrainConfig(seed=seed)
        st = TrainState.init(cfg)
        # a random classifier: scramble the head so predictions ignore structure
        rng = np.random.default_rng(seed)
        st.model.graph.cls_w.data = rng.normal(size=st.model.graph.cls_w.shape)
        st.model.graph.cls_b.data = np.zeros(9)
        accs.append(evaluate(st, cfg, batches=1).source_acc)
    # 9 classes: chance is 1/9; the band covers Monte-Carlo spread over 30 heads
    assert abs(np.mean(accs) - 1 / 9) < 0.06


@pytest.mark.slow
def test_easy_regime_is_learned():
    data = dataclasses.replace(SynthConfig(), class_separation=3.0, noise_std=0.1)
    cfg = TrainConfig(epochs=6, stats_epochs=3, steps_per_epoch=50, eval_batches=2, data=data)
    res = train(cfg)
    assert evaluate(res.state, cfg, batches=5).source_acc > 0.95


def test_step_errors_carry_index():
    def bad_hook(features, domain):
        return Tensor(float("inf"))
    with pytest.raises(trainer.TrainStepError, match="step 0"):
        train(tiny(), ga_hook=bad_hook)
