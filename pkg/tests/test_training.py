import math

import numpy as np
import pytest

from bipete import model as mdl
from bipete import numerics as nx
from bipete import training as tr
from bipete.datapipe import EncodedInstance, Fold
from bipete.model import ModelConfig

from conftest import random_instance

SMALL = dict(vocab_size=12, d_model=8, n_heads=2, n_layers=1, d_ff=16, gru_hidden=6, dropout=0.0, max_seq_len=20)


def motif_data(n, seed=0):
    """Label 1 iff token 5 is present."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = random_instance(rng, 12, pid=f"P{i}")
        x.token_ids[x.token_ids == 5] = 6
        if i % 2:
            x.token_ids[int(rng.integers(len(x.token_ids)))] = 5
        out.append(EncodedInstance(x.patient_id, i % 2, x.token_ids, x.visit_idx, x.days_ago))
    return out


# --------------------------------------------------------------------------
# loss


def test_bce_half_is_ln2():
    assert tr.bce_loss(np.zeros(4), [0, 1, 1, 0]).item() == pytest.approx(math.log(2), abs=1e-7)


def test_bce_saturated():
    assert tr.bce_loss(np.array([60.0, -60.0]), [1, 0]).item() <= 1e-7
    assert math.isfinite(tr.bce_loss(np.array([-1e4, 1e4]), [1, 0]).item())


def test_bce_hand_value(f64):
    z = np.log(np.array([0.9, 0.2]) / (1 - np.array([0.9, 0.2])))
    assert tr.bce_loss(z, [1, 0]).item() == pytest.approx(0.1643, abs=1e-4)
    assert tr.bce_from_proba([0.9, 0.2], [1, 0]) == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2)


# --------------------------------------------------------------------------
# optimizer and stepping


def test_clip_by_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    norm = tr.clip_by_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.sqrt(sum(np.sum(v ** 2) for v in g.values())) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    tr.clip_by_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


def test_weight_decay_only_on_matrices():
    params = mdl.init_params(ModelConfig(**SMALL), 0)
    before = {k: t.data.copy() for k, t in params.items()}
    opt = tr.Adam(params, lr=0.1, weight_decay=0.5)
    opt.step({k: np.zeros_like(t.data) for k, t in params.items()})
    for k, t in params.items():
        if t.data.ndim >= 2:
            np.testing.assert_allclose(t.data, before[k] * (1 - 0.1 * 0.5), rtol=1e-6)
        else:
            np.testing.assert_array_equal(t.data, before[k])


@pytest.mark.parametrize("arch,mode", [("bipete", "both"), ("bipete", "spe_only"), ("bigru", "both")])
def test_small_step_decreases_loss(f64, arch, mode):
    cfg = ModelConfig(**SMALL, positional_mode=mode)
    params = mdl.init_params(cfg, 3, arch=arch)
    batch = mdl.make_batch(motif_data(16, seed=1))
    opt = tr.Adam(params, lr=1e-4, weight_decay=0.0)
    before, _ = tr.train_step(batch, params, cfg, opt, np.random.default_rng(0), clip_norm=1.0)
    after = tr.bce_loss(mdl.model_logits(batch, params, cfg), batch.labels).item()
    assert after < before


def test_epoch_batches_cover_and_are_pure():
    lengths = np.random.default_rng(0).integers(1, 50, size=203)
    a = tr.epoch_batches(lengths, 8, tr.substream(4, "shuffle", 0, 1))
    b = tr.epoch_batches(lengths, 8, tr.substream(4, "shuffle", 0, 1))
    c = tr.epoch_batches(lengths, 8, tr.substream(4, "shuffle", 0, 2))
    assert all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a) == len(b)
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    assert sorted(np.concatenate(a).tolist()) == list(range(203))
    assert all(len(x) <= 8 for x in a)


def test_substreams_are_disjoint():
    x = tr.substream(0, "dropout", 1, 1).random(8)
    assert not np.allclose(x, tr.substream(0, "dropout", 2, 1).random(8))
    assert not np.allclose(x, tr.substream(0, "shuffle", 1, 1).random(8))
    assert not np.allclose(x, tr.substream(1, "dropout", 1, 1).random(8))


# --------------------------------------------------------------------------
# train_fold


def test_lr_zero_is_flat():
    data = motif_data(40)
    cfg = ModelConfig(**SMALL)
    params, rl = tr.train_fold(data[:32], data[32:], cfg, tr.TrainConfig(lr=0.0, max_epochs=3, batch_size=8))
    init = mdl.init_params(cfg, int(tr.substream(0, "init", 0).integers(2**31)))
    for k, t in params.items():
        np.testing.assert_array_equal(t.data, init[k].data)
    assert len(set(rl.column("val_loss"))) == 1
    assert max(rl.column("train_loss")) - min(rl.column("train_loss")) < 1e-6


def test_learns_motif():
    data = motif_data(160)
    cfg = ModelConfig(**SMALL)
    params, rl = tr.train_fold(data[:128], data[128:], cfg, tr.TrainConfig(lr=1e-2, max_epochs=25, batch_size=16))
    assert max(v for v in rl.column("val_auroc")) > 0.9
    assert rl.column("train_loss")[-1] < rl.column("train_loss")[0]


def test_early_stopping_returns_best():
    data = motif_data(80, seed=2)
    cfg = ModelConfig(**SMALL)
    tc = tr.TrainConfig(lr=3e-2, max_epochs=12, patience=2, batch_size=8)
    params, rl = tr.train_fold(data[:60], data[60:], cfg, tc)
    val_losses = rl.column("val_loss")
    assert rl.best_epoch == int(np.argmin(val_losses)) + 1
    assert rl.stop_epoch == len(val_losses) <= 12
    if rl.stop_epoch < 12:
        assert rl.stop_epoch - rl.best_epoch == tc.patience
    y = np.array([x.label for x in data[60:]])
    restored = tr.bce_from_proba(mdl.predict_instances(data[60:], params, cfg), y)
    assert restored == pytest.approx(min(val_losses), abs=1e-6)


def test_same_seed_identical_runlog():
    data = motif_data(48)
    cfg = ModelConfig(**dict(SMALL, dropout=0.2))
    tc = tr.TrainConfig(lr=1e-2, max_epochs=3, batch_size=8, seed=5)
    p1, r1 = tr.train_fold(data[:40], data[40:], cfg, tc, fold=1)
    p2, r2 = tr.train_fold(data[:40], data[40:], cfg, tc, fold=1)
    assert [vars(e) for e in r1.epochs] == [vars(e) for e in r2.epochs]
    for k, t in p1.items():
        np.testing.assert_array_equal(t.data, p2[k].data)


def test_nan_raises_training_diverged(monkeypatch):
    real = tr.init_params

    def poisoned(cfg, seed, arch="bipete"):
        p = real(cfg, seed, arch)
        p["tok_emb"].data[:] = np.nan
        return p

    monkeypatch.setattr(tr, "init_params", poisoned)
    data = motif_data(20)
    with pytest.raises(tr.TrainingDiverged) as exc:
        tr.train_fold(data[:16], data[16:], ModelConfig(**SMALL), tr.TrainConfig(max_epochs=2, batch_size=8))
    assert exc.value.epoch == 1 and exc.value.batch == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        tr.TrainConfig(patience=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(stopping="global")


# --------------------------------------------------------------------------
# cross-validation


def test_identical_folds_give_zero_std():
    data = motif_data(60)
    idx = np.arange(60)
    f = Fold(0, idx[:40], idx[40:48], idx[48:])
    folds = [Fold(i, f.train, f.val, f.test) for i in range(3)]
    for mode in ("logreg", "bnb"):
        s = tr.run_cv(data, ModelConfig(**SMALL), tr.TrainConfig(), mode=mode, folds=folds).summary()
        assert s["auroc"]["std"] == 0.0 and s["auprc"]["std"] == 0.0 and s["auroc"]["n"] == 3


def test_aggregate_sample_std_and_skips_none():
    agg = tr.aggregate([{"a": 1.0, "b": None}, {"a": 3.0, "b": 2.0}, {"a": 2.0, "b": None}])
    assert agg["a"] == {"mean": 2.0, "std": 1.0, "n": 3}
    assert agg["b"] == {"mean": 2.0, "std": 0.0, "n": 1}


def test_fold_data_uses_train_only_vocabulary():
    data = [EncodedInstance("A", 0, [3, 4], [0, 1], [5, 0]),
            EncodedInstance("B", 1, [4, 9], [0, 1], [5, 0]),
            EncodedInstance("C", 1, [9, 3], [0, 1], [5, 0])]
    fold = Fold(0, np.array([0]), np.array([1]), np.array([2]))
    train, val, test = tr.fold_data(data, fold)
    assert val[0].token_ids.tolist() == [4, mdl.UNK_ID]
    assert test[0].token_ids.tolist() == [mdl.UNK_ID, 3]


def test_fold_failure_names_fold(monkeypatch):
    def boom(*a, **k):
        raise tr.TrainingDiverged(2, 3)

    monkeypatch.setattr(tr, "train_fold", boom)
    data = motif_data(50)
    with pytest.raises(tr.FoldFailed) as exc:
        tr.run_cv(data, ModelConfig(**SMALL), tr.TrainConfig(max_epochs=1), mode="both", k=5)
    assert exc.value.fold == 0 and "fold 0" in str(exc.value)


def test_ablation_neural_run_is_deterministic():
    data = motif_data(50)
    cfg = ModelConfig(**SMALL)
    tc = tr.TrainConfig(lr=1e-2, max_epochs=2, batch_size=8)
    a = tr.run_ablation(data, cfg, tc, modes=("spe_only", "bnb"), k=5, keep_params=False)
    b = tr.run_ablation(data, cfg, tc, modes=("spe_only", "bnb"), k=5, keep_params=False)
    assert tr.summary_document(a, cfg, tc) == tr.summary_document(b, cfg, tc)
    assert set(a) == {"spe_only", "bnb"} and len(a["spe_only"].folds) == 5


def test_cv_mean_stopping_uses_shared_epoch():
    data = motif_data(50)
    tc = tr.TrainConfig(lr=1e-2, max_epochs=3, batch_size=8, stopping="cv_mean")
    res = tr.run_cv(data, ModelConfig(**SMALL), tc, mode="both", k=5, keep_params=False)
    stops = {f.runlog.stop_epoch for f in res.folds}
    assert len(stops) == 1 and 1 <= stops.pop() <= 3
