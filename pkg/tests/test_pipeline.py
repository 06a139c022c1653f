import numpy as np
import pytest

from basinflow import autodiff as ad
from basinflow.autodiff import NumericError, Tensor, substream
from basinflow.data import generate_synthetic_basin
from basinflow.encoder import PretrainConfig
from basinflow.model import InflowModel
from basinflow.pipeline import (
    PipelineError,
    TrainConfig,
    _active_masks,
    evaluate_mse,
    load_checkpoint,
    predict,
    prepare_dataset,
    save_checkpoint,
    train,
    training_loss,
    warm_start,
    write_metrics_log,
)
from tests.conftest import tiny_model_config


@pytest.fixture(scope="module")
def tiny_basin(tmp_path_factory):
    """Small synthetic basin plus prepared window sets for a tiny model."""
    data_dir = tmp_path_factory.mktemp("basin")
    generate_synthetic_basin(3, 140, seed=11, out_dir=data_dir)
    cfg = tiny_model_config()
    metas, panel, sets, stats = prepare_dataset(data_dir, cfg.history_days, cfg.horizon)
    return data_dir, cfg, metas, panel, sets, stats


def _quick_train(tiny_basin, seed=0, **overrides):
    _, model_cfg, metas, panel, sets, stats = tiny_basin
    cfg = TrainConfig(epochs=2, batch_size=8, seed=seed, **overrides)
    pre = PretrainConfig(epochs=1, seed=seed)
    return train(sets, stats, metas, model_cfg, cfg, pre_cfg=pre, panel=panel), sets, stats


def test_training_loss_oracle():
    pred = Tensor(np.array([[[1.0, 2.0]]]))
    targ = np.array([[[2.0, 4.0]]])
    assert float(training_loss(pred, targ).data) == pytest.approx(2.5)
    with pytest.raises(NumericError):
        training_loss(pred, np.array([[[np.nan, 1.0]]]))


def test_train_config_validation():
    with pytest.raises(PipelineError):
        TrainConfig(batch_size=0)
    with pytest.raises(PipelineError):
        TrainConfig(prune_every=0)


def test_train_smoke_and_logging(tiny_basin, tmp_path):
    result, sets, stats = _quick_train(tiny_basin)
    assert len(result.log_rows) == 2
    epochs, lrs, train_mses, val_mses, actives = zip(*result.log_rows)
    assert epochs == (0, 1)
    assert lrs[1] == pytest.approx(lrs[0] * 0.5)
    assert all(np.isfinite(train_mses))
    assert all(np.isfinite(val_mses))
    assert not result.diverged
    # attention rows cover every epoch/day/edge
    n_edges = len(result.ledger.edges)
    assert len(result.attention_rows) == 2 * 5 * n_edges  # epochs * T * edges

    path = tmp_path / "metrics.csv"
    write_metrics_log(path, result.log_rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,lr,train_mse,val_mse,active_edges"
    assert len(lines) == 3


def test_train_is_reproducible(tiny_basin):
    r1, _, _ = _quick_train(tiny_basin, seed=4)
    r2, _, _ = _quick_train(tiny_basin, seed=4)
    assert r1.log_rows == r2.log_rows
    for k, p in r1.model.parameters().items():
        np.testing.assert_array_equal(p.data, r2.model.parameters()[k].data)


def test_seed_changes_the_run(tiny_basin):
    r1, _, _ = _quick_train(tiny_basin, seed=0)
    r2, _, _ = _quick_train(tiny_basin, seed=1)
    assert r1.log_rows != r2.log_rows


def test_no_graph_arm_skips_attention(tiny_basin):
    result, _, _ = _quick_train(tiny_basin, no_graph=True)
    assert result.attention_rows == []
    assert result.log_rows[0][4] == 0  # active-edge column


def test_static_graph_never_prunes(tiny_basin):
    result, _, _ = _quick_train(tiny_basin, static_graph=True, prune_every=1)
    g = result.graphs[0]
    assert g.active_non_self_count() == len(g.non_self_edges())


def test_per_day_mode_builds_one_graph_per_day(tiny_basin):
    result, _, _ = _quick_train(tiny_basin, per_day_prune=True)
    assert len(result.graphs) == 5  # T graphs
    masks = _active_masks(result.graphs, False)
    assert masks.shape == (5, 3, 3)


def test_active_masks_shapes(tiny_basin):
    result, _, _ = _quick_train(tiny_basin)
    assert _active_masks(result.graphs, True) is None
    assert _active_masks(result.graphs, False).shape == (3, 3)


def test_predict_returns_physical_units(tiny_basin):
    result, sets, stats = _quick_train(tiny_basin)
    masks = _active_masks(result.graphs, False)
    out = predict(result.model, masks, stats, sets["test"].history)
    assert out.shape == sets["test"].targets.shape
    assert np.all(np.isfinite(out))
    # physical inflow sits far from the scaled range
    assert np.abs(out).mean() > 10.0
    with pytest.raises(PipelineError):
        predict(result.model, masks, None, sets["test"].history)


def test_evaluate_mse_matches_direct_computation(tiny_basin):
    result, sets, stats = _quick_train(tiny_basin)
    masks = _active_masks(result.graphs, False)
    val = sets["val"]
    got = evaluate_mse(result.model, val, masks)
    with ad.no_grad():
        pred, _, _ = result.model.forward_full(val.history, adjacency=masks, training=False)
    want = float(np.mean((pred.data - val.targets) ** 2))
    assert got == pytest.approx(want, rel=1e-6)


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_round_trip(tiny_basin, tmp_path):
    result, sets, stats = _quick_train(tiny_basin)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, result.model, cfg, result.graphs, stats, epoch=2, optimizer=result.optimizer)

    ckpt = load_checkpoint(path)
    assert ckpt.epoch == 2
    assert ckpt.train_config().batch_size == 8
    model2 = ckpt.build_model()
    for name, p in result.model.parameters().items():
        np.testing.assert_array_equal(p.data, model2.parameters()[name].data)
    g = ckpt.graphs()[0]
    assert g.node_ids == result.graphs[0].node_ids
    np.testing.assert_array_equal(g.prune_mask, result.graphs[0].prune_mask)
    s = ckpt.scaling()
    np.testing.assert_allclose(s.mean, stats.mean)

    # predictions from the restored model bit-equal the original
    masks = _active_masks(result.graphs, False)
    p1 = predict(result.model, masks, stats, sets["test"].history[:3])
    p2 = predict(model2, _active_masks(ckpt.graphs(), False), s, sets["test"].history[:3])
    np.testing.assert_array_equal(p1, p2)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(PipelineError, match="not a checkpoint"):
        load_checkpoint(path)


def test_warm_start_copies_encoder_only(tiny_basin, tmp_path):
    result, _, stats = _quick_train(tiny_basin)
    _, model_cfg, *_ = tiny_basin
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, result.model, TrainConfig(), result.graphs, stats, epoch=2)

    fresh = InflowModel(model_cfg, substream(99, "other.init"))
    gat_before = fresh.gat.w[0].data.copy()
    copied = warm_start(fresh, path)
    assert copied == 4  # w1, b1, w2, b2
    np.testing.assert_array_equal(
        fresh.encoder.w1.data, result.model.encoder.w1.data.astype(np.float32)
    )
    np.testing.assert_array_equal(fresh.gat.w[0].data, gat_before)


def test_init_from_replaces_pretraining(tiny_basin, tmp_path):
    _, model_cfg, metas, panel, sets, stats = tiny_basin
    base, _, _ = _quick_train(tiny_basin)
    path = tmp_path / "enc.ckpt"
    save_checkpoint(path, base.model, TrainConfig(), base.graphs, stats, epoch=2)
    cfg = TrainConfig(epochs=1, batch_size=8, seed=0, init_from=str(path))
    result = train(sets, stats, metas, model_cfg, cfg)
    assert len(result.log_rows) == 1
