"""Pretraining loop, dataset splitting, and checkpoint round trips."""

import csv
import json

import numpy as np
import pytest

from blue.checkpoint import load_checkpoint, save_checkpoint
from blue.data import SyntheticSpec, generate_synthetic, make_batch, make_batches
from blue.geo import BoundingBox
from blue.model import BlueModel, ModelConfig
from blue.train import (
    TrainConfig,
    embed_trajectories,
    pretrain,
    split_trajectories,
)


def tiny_model_cfg(**kw):
    base = dict(d=8, heads=2, layers=(1, 1, 1), dropout=0.0, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def small_corpus(n=14, seed=0):
    return generate_synthetic(SyntheticSpec(n=n, points_min=6, points_max=12), seed=seed)


# ---------------------------------------------------------------------------
# Config and splits
# ---------------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(fractions=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        TrainConfig(fractions=(0.0, 0.5, 0.5))
    with pytest.raises(ValueError):
        TrainConfig(d_max=-1)


def test_split_sizes_and_partition():
    trajs = small_corpus(n=20)
    train, val, test = split_trajectories(trajs, (0.6, 0.2, 0.2), seed=0)
    assert (len(train), len(val), len(test)) == (12, 4, 4)
    ids = sorted(t.id for t in train + val + test)
    assert ids == sorted(t.id for t in trajs)


def test_split_deterministic_per_seed():
    trajs = small_corpus(n=15)
    a = split_trajectories(trajs, (0.6, 0.2, 0.2), seed=3)
    b = split_trajectories(trajs, (0.6, 0.2, 0.2), seed=3)
    c = split_trajectories(trajs, (0.6, 0.2, 0.2), seed=4)
    assert [t.id for t in a[0]] == [t.id for t in b[0]]
    assert [t.id for t in a[0]] != [t.id for t in c[0]]


def test_split_allows_empty_tail_splits():
    trajs = small_corpus(n=10)
    train, val, test = split_trajectories(trajs, (1.0, 0.0, 0.0), seed=0)
    assert len(train) == 10 and not val and not test


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    for dtype in ("float32", "float64"):
        cfg = tiny_model_cfg(dtype=dtype, levels_enabled=(1, 3))
        model = BlueModel(cfg, np.random.default_rng(8))
        box = BoundingBox(-8.7, -8.5, 41.1, 41.3, d_max=800.0)
        path = tmp_path / f"m-{dtype}.ckpt"
        save_checkpoint(path, model, box)
        loaded, box2, header = load_checkpoint(path)
        assert loaded.config == cfg
        assert (box2.lon_min, box2.lon_max, box2.lat_min, box2.lat_max, box2.d_max) == (
            -8.7, -8.5, 41.1, 41.3, 800.0,
        )
        assert header["config_hash"] == cfg.config_hash()
        for p, q in zip(model.parameters(), loaded.parameters()):
            assert p.name == q.name
            assert p.data.dtype == q.data.dtype
            assert np.array_equal(p.data, q.data)


def test_checkpoint_write_is_deterministic(tmp_path):
    cfg = tiny_model_cfg()
    model = BlueModel(cfg, np.random.default_rng(1))
    box = BoundingBox(0.0, 1.0, 0.0, 1.0)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, box)
    save_checkpoint(p2, model, box)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_card_sidecar(tmp_path):
    model = BlueModel(tiny_model_cfg(), np.random.default_rng(0))
    box = BoundingBox(0.0, 1.0, 0.0, 1.0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, box, card={"kind": "test", "note": 1})
    card = json.loads((tmp_path / "m.ckpt.card.json").read_text())
    assert card == {"kind": "test", "note": 1}
    save_checkpoint(tmp_path / "bare.ckpt", model, box)
    assert not (tmp_path / "bare.ckpt.card.json").exists()


def test_checkpoint_rejects_damage(tmp_path):
    model = BlueModel(tiny_model_cfg(), np.random.default_rng(0))
    box = BoundingBox(0.0, 1.0, 0.0, 1.0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, box)
    blob = path.read_bytes()

    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(blob[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(truncated)

    padded = tmp_path / "padded.ckpt"
    padded.write_bytes(blob + b"\x00\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(padded)

    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a checkpoint at all\n")
    with pytest.raises(ValueError):
        load_checkpoint(garbage)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def test_pretrain_writes_artifacts_and_reloads(tmp_path):
    trajs = small_corpus(n=14)
    mcfg = tiny_model_cfg(dtype="float32", dropout=0.1)
    tcfg = TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=0)
    ckpt = tmp_path / "model.ckpt"
    hist = tmp_path / "history.csv"
    result = pretrain(trajs, mcfg, tcfg, checkpoint_path=ckpt, history_path=hist)

    assert len(result.history) == 2
    assert all(np.isfinite(row.train_loss) for row in result.history)
    assert all(row.val_loss is not None for row in result.history)
    assert 1 <= result.best_epoch <= 2
    assert len(result.train_trajs) == 8 and len(result.val_trajs) == 3
    assert ckpt.exists() and result.checkpoint_path == ckpt

    with open(hist) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert float(rows[0]["train_loss"]) == pytest.approx(result.history[0].train_loss, rel=1e-6)

    card = json.loads((tmp_path / "model.ckpt.card.json").read_text())
    assert card["kind"] == "pretrained-model"
    assert card["n_train"] == 8 and card["best_epoch"] == result.best_epoch

    loaded, box, _ = load_checkpoint(ckpt)
    emb_orig = embed_trajectories(result.model, result.box, trajs[:5])
    emb_load = embed_trajectories(loaded, box, trajs[:5])
    assert np.array_equal(emb_orig, emb_load)


def test_pretrain_same_seed_reproduces_checkpoint_bytes(tmp_path):
    trajs = small_corpus(n=12, seed=5)
    mcfg = tiny_model_cfg(dtype="float32", dropout=0.1)
    paths = []
    for run in range(2):
        p = tmp_path / f"run{run}.ckpt"
        pretrain(trajs, mcfg, TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=7), checkpoint_path=p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()

    other = tmp_path / "other.ckpt"
    pretrain(trajs, mcfg, TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=8), checkpoint_path=other)
    assert other.read_bytes() != paths[0].read_bytes()


def test_pretrain_keeps_best_validation_epoch():
    trajs = small_corpus(n=16, seed=2)
    mcfg = tiny_model_cfg()  # float64, no dropout
    tcfg = TrainConfig(batch_size=4, lr=3e-3, epochs=3, seed=1)
    result = pretrain(trajs, mcfg, tcfg)
    val_losses = [row.val_loss for row in result.history]
    assert result.best_epoch == int(np.argmin(val_losses)) + 1

    val_batches = make_batches(
        result.val_trajs, result.box, tcfg.batch_size, mcfg.precisions, mcfg.np_dtype
    )
    total, count = 0.0, 0
    for batch in val_batches:
        total += float(result.model.forward_loss(batch).data) * batch.size
        count += batch.size
    assert total / count == pytest.approx(min(val_losses), rel=1e-9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the overflow is the point
def test_pretrain_aborts_on_nonfinite_loss():
    trajs = small_corpus(n=10, seed=3)
    mcfg = tiny_model_cfg()
    poisoned = BlueModel(mcfg, np.random.default_rng(0))
    poisoned.store.params["head.spatial.lin1.w"].data[:] = 1e200
    with pytest.raises(RuntimeError, match="non-finite"):
        pretrain(
            trajs, mcfg, TrainConfig(batch_size=4, lr=1e-4, epochs=1, seed=0),
            initial_model=poisoned,
        )


def test_pretrain_without_validation_split_keeps_last():
    trajs = small_corpus(n=10, seed=4)
    mcfg = tiny_model_cfg()
    result = pretrain(trajs, mcfg, TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=0,
                                               fractions=(1.0, 0.0, 0.0)))
    assert result.best_epoch == 2
    assert all(row.val_loss is None for row in result.history)
    assert not result.val_trajs and not result.test_trajs


def test_embed_trajectories_preserves_order():
    trajs = small_corpus(n=9, seed=6)
    mcfg = tiny_model_cfg()
    model = BlueModel(mcfg, np.random.default_rng(2))
    box = BoundingBox.from_trajectories(trajs, d_max=1000.0)
    emb = embed_trajectories(model, box, trajs, batch_size=4)
    assert emb.shape == (9, 8)
    for i, traj in enumerate(trajs):
        solo = model.embed(make_batch([traj], box, mcfg.precisions, mcfg.np_dtype))
        np.testing.assert_allclose(emb[i], solo[0], rtol=0, atol=1e-10)
