"""Training loop determinism, config parsing, checkpoint round trips."""

import numpy as np
import pytest

from conmask.errors import DataError
from conmask.evaluator import ConMaskScorer
from conmask.kgdata import KnowledgeGraph
from conmask.model import EncodedCorpus
from conmask.trainer import (
    TrainConfig,
    init_params,
    load_checkpoint,
    parse_config_file,
    save_checkpoint,
    train,
)

from helpers import tiny_kg_and_table


def small_config(**kw):
    base = dict(embedding_dim=6, max_content_len=16, max_name_len=8,
                mask_window=2, batch_size=4, max_epochs=3, n_negative=2,
                keep_prob=1.0, checkpoint_interval=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_parse_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment line\n"
        "embedding_dim = 8\n"
        "learning_rate=0.005\n"
        "freeze_embeddings=true\n"
        "max_epochs=7   # trailing comment\n",
        encoding="utf-8")
    cfg = parse_config_file(path)
    assert cfg.embedding_dim == 8
    assert cfg.learning_rate == 0.005
    assert cfg.freeze_embeddings is True
    assert cfg.max_epochs == 7
    assert cfg.batch_size == 200  # untouched default


def test_parse_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("no_such_field=3\n", encoding="utf-8")
    with pytest.raises(DataError, match="no_such_field"):
        parse_config_file(path)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(keep_prob=0.0).validate()


def test_config_dim_mismatch_raises():
    kg, table = tiny_kg_and_table(k=6)
    with pytest.raises(DataError, match="embedding_dim"):
        init_params(table, small_config(embedding_dim=200))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_single_triple_self_pool_keeps_params():
    # pool == {positive} -> loss 0 -> zero gradients -> Adam leaves params
    kg, table = tiny_kg_and_table()
    solo = kg.with_triples([(0, 0, 1)])
    cfg = small_config(n_negative=0, max_epochs=2)
    params, metrics = train(solo, table, cfg)
    fresh = init_params(table, cfg)
    assert all(abs(m.mean_loss) < 1e-12 for m in metrics)
    assert np.array_equal(params.embeddings.data, fresh.embeddings.data)
    assert np.array_equal(params.feature_weights.data, fresh.feature_weights.data)


def test_fixed_seed_reproduces_loss_trajectory():
    kg, table = tiny_kg_and_table()
    cfg = small_config(keep_prob=0.5)
    _, m1 = train(kg, table, cfg)
    _, m2 = train(kg, table, cfg)
    assert [m.mean_loss for m in m1] == [m.mean_loss for m in m2]


def test_training_reduces_loss_on_toy_graph():
    kg, table = tiny_kg_and_table()
    cfg = small_config(max_epochs=30, learning_rate=0.05)
    _, metrics = train(kg, table, cfg)
    assert metrics[-1].mean_loss < metrics[0].mean_loss


def test_validation_mrr_logged(tmp_path):
    kg, table = tiny_kg_and_table()
    cfg = small_config(max_epochs=2)
    _, metrics = train(kg, table, cfg, validation=[(0, 0, 1)], out_dir=tmp_path)
    assert all(m.val_mrr is not None for m in metrics)
    csv_text = (tmp_path / "metrics.csv").read_text()
    assert csv_text.splitlines()[0] == "epoch,mean_loss,val_mrr"
    assert len(csv_text.splitlines()) == 3


def test_on_epoch_early_stop():
    kg, table = tiny_kg_and_table()
    cfg = small_config(max_epochs=50)
    _, metrics = train(kg, table, cfg, on_epoch=lambda e, p, l: e >= 4)
    assert len(metrics) == 5


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    kg, table = tiny_kg_and_table()
    cfg = small_config(max_epochs=2)
    params, _ = train(kg, table, cfg)
    p1 = tmp_path / "a.bin"
    p2 = tmp_path / "b.bin"
    save_checkpoint(p1, params, {"config": cfg.to_dict()})
    loaded, meta = load_checkpoint(p1)
    save_checkpoint(p2, loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()
    assert meta["config"]["seed"] == cfg.seed


def test_checkpoint_truncated_and_bad_magic(tmp_path):
    kg, table = tiny_kg_and_table()
    params = init_params(table, small_config())
    path = tmp_path / "c.bin"
    save_checkpoint(path, params)
    data = path.read_bytes()
    path.write_bytes(data[:-20])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"NOTMAGIC" + data[8:])
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(path)


def test_scores_identical_after_round_trip(tmp_path):
    kg, table = tiny_kg_and_table()
    cfg = small_config(max_epochs=2)
    params, _ = train(kg, table, cfg)
    corpus = EncodedCorpus.build(kg, table, cfg.max_content_len, cfg.max_name_len)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, params)
    loaded, _ = load_checkpoint(path)
    a = ConMaskScorer(params, corpus, mask_window=cfg.mask_window)
    b = ConMaskScorer(loaded, corpus, mask_window=cfg.mask_window)
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, t = rng.integers(0, 3, size=2)
        r = int(rng.integers(0, 2))
        assert a(int(h), r, int(t), "tail") == b(int(h), r, int(t), "tail")


def test_checkpoint_preserves_bn_state(tmp_path):
    kg, table = tiny_kg_and_table()
    cfg = small_config(max_epochs=1)
    params, _ = train(kg, table, cfg)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, params)
    loaded, _ = load_checkpoint(path)
    for a, b in zip(params.fcn.layers, loaded.fcn.layers):
        assert np.array_equal(a.bn_state.mean, b.bn_state.mean)
        assert np.array_equal(a.bn_state.var, b.bn_state.var)
        assert a.bn_state.steps == b.bn_state.steps
        assert b.bn_state.initialized
