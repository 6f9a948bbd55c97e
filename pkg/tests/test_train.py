import math
from dataclasses import replace

import numpy as np
import pytest

from mtslstm import metrics
from mtslstm.checkpoint import load_checkpoint
from mtslstm.loss import nse_reg_loss
from mtslstm.model import MtsConfig, backward, build, forward
from mtslstm.timeseries import DAILY, HOURLY, SequenceSpec
from mtslstm.train import (Adam, GridSpec, Period, Sampler, TrainConfig, TrainedModel, _loss_batch,
                           check_isolation, clip_gradients, fit_stats, global_norm, grid_search, lr_at,
                           naive_components, prepare, rank_cells, train_ensemble, train_model, train_run)

FEATS = ("total_precipitation", "temperature")
TRAIN = Period("2000-11-01", "2001-09-30")
VAL = Period("2001-10-01", "2002-03-31")
TEST = Period("2002-04-01", "2002-09-30")


def toy_config(**kw):
    spec = SequenceSpec.from_tuples([(24, 30, 1), (1, 48, 24)])
    return MtsConfig(spec, (FEATS, FEATS), (6, 6), static_features=("fast_k", "slow_k"), **kw)


def toy_train(**kw):
    base = dict(epochs=1, batch_size=64, lr_schedule=((1, 5e-3),), seed=0)
    base.update(kw)
    return TrainConfig(TRAIN, VAL, TEST, **base)


def test_lr_schedule_examples():
    sched = ((1, 5e-4), (10, 1e-4), (25, 5e-5))
    assert lr_at(sched, 1) == 5e-4
    assert lr_at(sched, 9) == 5e-4
    assert lr_at(sched, 10) == 1e-4 and lr_at(sched, 24) == 1e-4
    assert lr_at(sched, 25) == 5e-5 and lr_at(sched, 100) == 5e-5
    with pytest.raises(ValueError):
        lr_at(sched, 0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        toy_train(lr_schedule=((2, 1e-3),))
    with pytest.raises(ValueError):
        toy_train(lr_schedule=((1, 1e-3), (1, 1e-4)))
    with pytest.raises(ValueError):
        toy_train(lr_schedule=())
    with pytest.raises(ValueError):
        TrainConfig(TRAIN, Period("2001-09-01", "2001-12-31"), TEST)
    with pytest.raises(ValueError):
        TrainConfig(VAL, TRAIN, TEST)
    cfg = toy_train()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_period_bounds():
    p = Period("2001-01-01", "2001-01-02")
    assert p.start_hour == np.datetime64("2001-01-01T00", "h")
    assert p.end_hour == np.datetime64("2001-01-03T00", "h")
    with pytest.raises(ValueError):
        Period("2001-01-02", "2001-01-01")


def test_zero_learning_rate_keeps_parameters(small_fleet):
    cfg = toy_config(dropout_rate=0.4)
    start = build(cfg, 0)
    res = train_model(toy_train(lr_schedule=((1, 0.0),)), cfg, small_fleet[:2], params=start)
    for k, v in start.named().items():
        assert np.array_equal(v, res.params.named()[k])


def test_one_adam_step_reduces_batch_loss(small_fleet):
    cfg = toy_config()
    stats = fit_stats(small_fleet, cfg, TRAIN)
    sampler = Sampler(cfg, prepare(small_fleet, cfg, stats))
    idx, anchors = sampler.samples(TRAIN)
    wins = 0
    for seed in range(5):
        sel = np.random.default_rng(seed).choice(idx.size, 32, replace=False)
        inputs, targets, sigma = sampler.batch(idx[sel], anchors[sel])
        params = build(cfg, seed)
        preds, tape = forward(params, cfg, inputs)
        before, d_preds = nse_reg_loss(_loss_batch(preds, targets, sigma, cfg))
        grads = backward(params, cfg, tape, d_preds)
        Adam(params.named()).step(params.named(), grads, 1e-3)
        after = nse_reg_loss(_loss_batch(forward(params, cfg, inputs)[0], targets, sigma, cfg))[0]
        wins += after < before
    assert wins >= 3


def test_anchor_stride_lookback_and_isolation(small_fleet):
    cfg = toy_config()
    stats = fit_stats(small_fleet, cfg, TRAIN)
    sampler = Sampler(cfg, prepare(small_fleet, cfg, stats))
    a = sampler.anchors(0, TRAIN)
    assert np.all(np.diff(a) == np.timedelta64(24, "h"))
    assert a[0] - np.timedelta64(24, "h") >= TRAIN.start_hour and a[-1] <= TRAIN.end_hour
    data_start = small_fleet[0].discharge[HOURLY].start
    assert a[0] - np.timedelta64(30 * 24, "h") >= data_start
    check_isolation(a, sampler.target_span, TRAIN)
    with pytest.raises(AssertionError):
        check_isolation(a + np.timedelta64(24, "h"), sampler.target_span, TRAIN)
    # the 30-day look-back leaves no anchor in the first four weeks of data
    early = Period("2000-10-01", "2000-10-29")
    assert sampler.anchors(0, early).size == 0


def test_batch_targets_match_observations(small_fleet):
    cfg = toy_config()
    stats = fit_stats(small_fleet, cfg, TRAIN)
    sampler = Sampler(cfg, prepare(small_fleet, cfg, stats))
    anchor = np.datetime64("2001-03-10T00", "h")
    _, targets, sigma = sampler.batch(np.array([1]), np.array([anchor]))
    q = small_fleet[1].discharge[HOURLY]
    j = q.index_of(anchor)
    np.testing.assert_allclose(targets[1][0] * stats.q_std + stats.q_mean, q.values[j - 24:j], rtol=1e-12)
    qd = small_fleet[1].discharge[DAILY]
    np.testing.assert_allclose(targets[0][0, 0] * stats.q_std + stats.q_mean, qd.values[qd.index_of(anchor) - 1],
                               rtol=1e-12)
    assert sigma[0] == pytest.approx(stats.basin_q_std[small_fleet[1].basin_id] / stats.q_std)


def test_clipping_bounds_norm(rng):
    grads = {"a": rng.normal(size=(5, 5)) * 10, "b": rng.normal(size=3)}
    before = clip_gradients(grads, 1.0)
    assert before > 1.0
    assert global_norm(grads) <= 1.0 + 1e-12
    small = {"a": np.full(2, 0.1)}
    clip_gradients(small, 1.0)
    assert np.array_equal(small["a"], np.full(2, 0.1))


def test_training_is_deterministic(small_fleet, tmp_path):
    cfg = toy_config(dropout_rate=0.3)
    tr = toy_train(epochs=2, validate_every=2)
    a = train_run("mts", tr, cfg, small_fleet).save(tmp_path / "a")
    b = train_run("mts", tr, cfg, small_fleet).save(tmp_path / "b")
    assert (a / "weights_0.ckpt").read_bytes() == (b / "weights_0.ckpt").read_bytes()
    assert (a / "train_log.csv").read_text().splitlines()[0].startswith("component,epoch,train_loss,lr")


def test_model_dir_round_trip(small_fleet, tmp_path):
    cfg = toy_config()
    model = train_run("mts", toy_train(), cfg, small_fleet)
    out = model.save(tmp_path / "m")
    loaded = TrainedModel.load(out)
    p1 = model.predict(small_fleet, TEST)
    p2 = loaded.predict(small_fleet, TEST)
    for basin in p1:
        for s in (DAILY, HOURLY):
            assert np.array_equal(p1[basin][s].values, p2[basin][s].values, equal_nan=True)
    arrays, h = load_checkpoint(out / "weights_0.ckpt")
    assert h == cfg.config_hash()
    # predictions cover every step of the test period after the first day
    hourly = p1[small_fleet[0].basin_id][HOURLY].values
    assert np.all(np.isnan(hourly[:0])) and not np.isnan(hourly[24:]).any()


def test_naive_components_use_daily_anchors(small_fleet):
    comps = naive_components(toy_config())
    assert [len(c.spec) for c in comps] == [1, 1]
    assert comps[1].anchor_scale.step_hours == 24
    model = train_run("naive", toy_train(), toy_config(), small_fleet)
    assert len(model.components) == 2
    preds = model.predict(small_fleet[:1], TEST)[small_fleet[0].basin_id]
    assert not np.isnan(preds[HOURLY].values[24:]).any()


def test_smts_training_runs(small_fleet):
    model = train_run("smts", toy_train(), toy_config(), small_fleet)
    assert model.components[0][1].shared and len(model.components[0][1].lstms) == 1


def test_divergence_guard(small_fleet):
    from mtslstm.train import DivergenceError

    with pytest.raises(DivergenceError):
        train_model(toy_train(lr_schedule=((1, 10.0),), max_loss=50.0), toy_config(), small_fleet)


def test_ensemble_mean_of_members(small_fleet, tmp_path):
    cfg = toy_config()
    tr = toy_train()
    dirs, ens = train_ensemble(3, 5, "mts", tr, cfg, small_fleet, tmp_path / "e")
    members = [TrainedModel.load(d).predict(small_fleet, TEST) for d in dirs]
    for d in small_fleet:
        for s in (DAILY, HOURLY):
            stack = np.stack([m[d.basin_id][s].values for m in members])
            np.testing.assert_array_equal(ens[d.basin_id][s].values, np.mean(stack, axis=0))
    one_dirs, one = train_ensemble(1, 5, "mts", tr, cfg, small_fleet, tmp_path / "one")
    single = TrainedModel.load(one_dirs[0]).predict(small_fleet, TEST)
    b = small_fleet[0].basin_id
    assert np.array_equal(one[b][HOURLY].values, single[b][HOURLY].values, equal_nan=True)
    # a member is reproducible from its seed alone
    again = train_run("mts", replace(tr, seed=5), cfg, small_fleet).save(tmp_path / "again")
    assert (again / "weights_0.ckpt").read_bytes() == (tmp_path / "e" / "member_00" / "weights_0.ckpt").read_bytes()


def test_rank_cells_tie_breaks():
    cells = [
        {"hidden_size": 64, "dropout": 0.4, "score": 0.8, "diverged": 0, "seeds": 3},
        {"hidden_size": 32, "dropout": 0.4, "score": 0.8, "diverged": 0, "seeds": 3},
        {"hidden_size": 32, "dropout": 0.2, "score": 0.8, "diverged": 0, "seeds": 3},
        {"hidden_size": 16, "dropout": 0.0, "score": float("nan"), "diverged": 3, "seeds": 3},
        {"hidden_size": 128, "dropout": 0.0, "score": 0.9, "diverged": 1, "seeds": 3},
    ]
    ranked = rank_cells(cells)
    assert [(c["hidden_size"], c["dropout"]) for c in ranked] == [(128, 0.0), (32, 0.2), (32, 0.4), (64, 0.4),
                                                                   (16, 0.0)]


def test_grid_single_cell_and_divergent_cell(small_fleet):
    tr = toy_train(max_loss=50.0)
    one = GridSpec(hidden_size=(6,), fine_seq_len=(48,), dropout=(0.0,), lr_schedule=(((1, 5e-3),),),
                   batch_size=(64,), seeds=1)
    ranked = grid_search(one, "mts", toy_config(), tr, small_fleet[:2])
    assert ranked[0]["hidden_size"] == 6 and ranked[0]["diverged"] == 0
    assert {r["stage"] for r in ranked} == {1, 2}
    grid = replace(one, lr_schedule=(((1, 5e-3),), ((1, 10.0),)))
    ranked = grid_search(grid, "mts", toy_config(), tr, small_fleet[:2])
    stage2 = [r for r in ranked if r["stage"] == 2]
    assert stage2[-1]["lr_schedule"] == ((1, 10.0),)
    assert stage2[-1]["diverged"] == 1 and math.isnan(stage2[-1]["score"])


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(hidden_size=())
    with pytest.raises(ValueError):
        GridSpec(seeds=0)


def test_regularization_improves_consistency(small_fleet):
    cfg = toy_config()
    rmsd = {}
    for reg in (True, False):
        model = train_run("mts", toy_train(epochs=3, regularization=reg, validate_every=3), cfg, small_fleet)
        preds = model.predict(small_fleet, TEST)
        rmsd[reg] = np.median([metrics.consistency_rmsd(p[DAILY], p[HOURLY]) for p in preds.values()])
    assert rmsd[True] < rmsd[False]
