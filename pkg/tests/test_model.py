import numpy as np
import pytest

from bipete import numerics as nx
from bipete.model import (
    PAD_ID,
    BernoulliNB,
    ConfigError,
    DegenerateFoldError,
    LogisticRegression,
    ModelConfig,
    baseline_bigru_forward,
    forward,
    init_params,
    load_checkpoint,
    make_batch,
    model_logits,
    one_hot,
    predict_instances,
    predict_proba,
    save_checkpoint,
    stable_sigmoid,
)
from bipete.datapipe import EncodedInstance
from bipete.training import bce_loss

from conftest import finite_difference, random_instance, rel_err

TINY = dict(vocab_size=12, d_model=8, n_heads=2, n_layers=1, d_ff=16, gru_hidden=6, dropout=0.0, max_seq_len=6)


def tiny_batch(rng, cfg, B=3):
    inst = []
    for i in range(B):
        n = int(rng.integers(3, cfg.max_seq_len + 1))
        vis = np.sort(rng.integers(0, 3, size=n))
        days = (vis.max() - vis) * rng.integers(5, 40)
        inst.append(EncodedInstance(f"p{i}", i % 2, rng.integers(3, cfg.vocab_size, size=n), vis, days))
    return make_batch(inst)


def model_grad_check(cfg, arch, seed):
    with nx.precision("f64"):
        rng = np.random.default_rng(seed)
        params = init_params(cfg, seed, arch=arch)
        for _, t in params.items():  # larger weights make the check meaningful
            t.data = t.data + rng.normal(scale=0.3, size=t.shape)
        batch = tiny_batch(rng, cfg)

        with nx.Graph() as g:
            loss = bce_loss(model_logits(batch, params, cfg), batch.labels)
        grads = g.backward(loss, wrt=[t for _, t in params.items()])

        def value():
            with nx.no_record():
                return bce_loss(model_logits(batch, params, cfg), batch.labels).item()

        names = [k for k, _ in params.items()]
        fd = finite_difference(value, [params[k].data for k in names])
        return max(rel_err(grads[params[k]], f) for k, f in zip(names, fd))


@pytest.mark.parametrize("mode", ["both", "rope_only", "spe_only", "none"])
def test_transformer_gradient(mode):
    assert model_grad_check(ModelConfig(**TINY, positional_mode=mode), "bipete", seed=7) < 1e-4


def test_bigru_baseline_gradient():
    assert model_grad_check(ModelConfig(**TINY), "bigru", seed=8) < 1e-4


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, d_model=18, n_heads=2)  # odd head dim
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, positional_mode="alibi")
    cfg = ModelConfig(vocab_size=50)
    assert (cfg.d_head, cfg.n_heads, cfg.d_ff) == (8, 9, 288)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_pad_row_is_zero():
    p = init_params(ModelConfig(**TINY), 0)
    np.testing.assert_array_equal(p["tok_emb"].data[PAD_ID], 0.0)


def test_sequence_too_long():
    cfg = ModelConfig(**TINY)
    b = make_batch([EncodedInstance("x", 0, [3] * 7, [0] * 7, [0] * 7)])
    with pytest.raises(IndexError):
        forward(b, init_params(cfg, 0), cfg)


def test_padding_does_not_change_logits(f64):
    cfg = ModelConfig(**TINY)
    p = init_params(cfg, 1)
    rng = np.random.default_rng(1)
    x = random_instance(rng, 12, n_visits=2)
    x = EncodedInstance("x", 1, x.token_ids[:4], x.visit_idx[:4], x.days_ago[:4])
    a = forward(make_batch([x]), p, cfg)[0].data
    b = forward(make_batch([x], pad_to=6), p, cfg)[0].data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_all_padding_row_is_constant(f64):
    cfg = ModelConfig(**TINY)
    p = init_params(cfg, 2)
    rng = np.random.default_rng(2)
    empty = EncodedInstance("e", 0, [], [], [])
    for other in (random_instance(rng, 12, 2), random_instance(rng, 12, 2)):
        other = EncodedInstance("o", 0, other.token_ids[:5], other.visit_idx[:5], other.days_ago[:5])
        z = forward(make_batch([other, empty]), p, cfg)[0].data
        # no real tokens: both GRU states stay zero and only the output bias remains
        np.testing.assert_allclose(z[1], p["out.b"].data[0], atol=1e-12)


def test_batching_invariance(f64):
    cfg = ModelConfig(**TINY)
    p = init_params(cfg, 3)
    rng = np.random.default_rng(3)
    inst = [EncodedInstance(f"{i}", 0, x.token_ids[:6], x.visit_idx[:6], x.days_ago[:6])
            for i, x in enumerate(random_instance(rng, 12, 3) for _ in range(3))]
    together = predict_proba(make_batch(inst), p, cfg)
    alone = [predict_proba(make_batch([x]), p, cfg)[0] for x in inst]
    np.testing.assert_allclose(together, alone, atol=1e-6)
    perm = [2, 0, 1]
    np.testing.assert_allclose(predict_proba(make_batch([inst[i] for i in perm]), p, cfg), together[perm], atol=1e-12)
    np.testing.assert_allclose(predict_instances(inst, p, cfg, batch_size=2), together, atol=1e-12)


def test_masked_keys_get_no_attention(f64):
    cfg = ModelConfig(**TINY)
    p = init_params(cfg, 4)
    b = make_batch([EncodedInstance("a", 0, [3, 4, 5], [0, 1, 2], [20, 10, 0]),
                    EncodedInstance("b", 0, [3, 4, 5, 6, 7], [0, 1, 2, 3, 4], [40, 30, 20, 10, 0])])
    _, maps = forward(b, p, cfg, return_attention=True)
    assert maps.shape == (2, 1, 2, 5, 5)
    assert maps[0, :, :, :, 3:].max() < 1e-6


def test_days_gap_changes_logits_only_with_rope(f64):
    base = dict(TINY, n_layers=2)
    toks, vis = [3, 4, 5, 6], [0, 1, 2, 3]
    a = make_batch([EncodedInstance("a", 0, toks, vis, [100, 90, 10, 0])])
    b = make_batch([EncodedInstance("b", 0, toks, vis, [100, 20, 10, 0])])
    for mode, differs in (("both", True), ("rope_only", True), ("spe_only", False), ("none", False)):
        cfg = ModelConfig(**base, positional_mode=mode)
        p = init_params(cfg, 5)
        za, zb = forward(a, p, cfg)[0].data, forward(b, p, cfg)[0].data
        assert (abs(za - zb).max() > 1e-9) == differs, mode


def test_visit_swap_changes_logits_with_spe(f64):
    cfg = ModelConfig(**TINY, positional_mode="spe_only")
    p = init_params(cfg, 6)
    a = make_batch([EncodedInstance("a", 0, [3, 4, 5], [0, 0, 1], [0, 0, 0])])
    b = make_batch([EncodedInstance("b", 0, [3, 4, 5], [0, 1, 1], [0, 0, 0])])
    assert abs(forward(a, p, cfg)[0].data - forward(b, p, cfg)[0].data).max() > 1e-9


def test_dropout_only_in_training():
    cfg = ModelConfig(**dict(TINY, dropout=0.5))
    p = init_params(cfg, 7)
    b = tiny_batch(np.random.default_rng(7), cfg)
    e1 = forward(b, p, cfg, rng=np.random.default_rng(0))[0].data
    e2 = forward(b, p, cfg)[0].data
    np.testing.assert_array_equal(e1, e2)
    t1 = forward(b, p, cfg, train=True, rng=np.random.default_rng(0))[0].data
    assert not np.array_equal(t1, e2)


def test_bigru_baseline_ignores_positions(f64):
    cfg = ModelConfig(**TINY)
    p = init_params(cfg, 8, arch="bigru")
    assert not any(k.startswith("layer") for k in p)
    a = make_batch([EncodedInstance("a", 0, [3, 4, 5], [0, 1, 2], [50, 20, 0])])
    b = make_batch([EncodedInstance("b", 0, [3, 4, 5], [0, 0, 1], [9, 9, 0])])
    np.testing.assert_array_equal(baseline_bigru_forward(a, p, cfg).data, baseline_bigru_forward(b, p, cfg).data)


def test_stable_sigmoid():
    assert stable_sigmoid(0.0) == 0.5
    assert stable_sigmoid(40.0) >= 1 - 1e-17
    assert stable_sigmoid(-1000.0) == 0.0
    assert np.isfinite(stable_sigmoid(np.array([-1e4, 1e4]))).all()


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(**TINY)
    p = init_params(cfg, 9)
    b = tiny_batch(np.random.default_rng(9), cfg)
    path = save_checkpoint(tmp_path / "ck.json", p, cfg, extra={"fold": 2})
    q, cfg2, manifest = load_checkpoint(path)
    assert cfg2 == cfg and manifest["extra"]["fold"] == 2 and q.arch == "bipete"
    assert forward(b, p, cfg)[0].data.tobytes() == forward(b, q, cfg)[0].data.tobytes()


def test_parameter_store_helpers():
    cfg = ModelConfig(**TINY)
    p = init_params(cfg, 0)
    assert p.n_params() == sum(t.data.size for _, t in p.items())
    assert set(p.sub("gru.fwd.")) == {"w_ih", "w_hh", "b_ih", "b_hh"}
    assert p["out.w"].shape == (2 * cfg.gru_hidden, 1)
    assert p.astype(np.float64)["tok_emb"].dtype == np.float64


def test_one_hot_ignores_reserved():
    X = one_hot([EncodedInstance("a", 0, [0, 1, 2, 3, 3, 5], [0] * 6, [0] * 6)], 6)
    np.testing.assert_array_equal(X[0], [0, 0, 0, 1, 0, 1])


def test_bnb_hand_posterior():
    X = np.array([[1.0], [1.0], [0.0], [0.0]])
    y = np.array([1, 1, 0, 0])
    nb = BernoulliNB().fit(X, y)
    assert nb.feature_prob[1, 0] == pytest.approx(3 / 4)
    assert nb.feature_prob[0, 0] == pytest.approx(1 / 4)
    s = nb.decision_function(np.array([[1.0], [0.0]]))
    assert s[0] > s[1]
    assert s[0] == pytest.approx(np.log(3))


def test_bnb_separable_token():
    X = np.array([[1, 0], [1, 1], [0, 1], [0, 0]], dtype=float)
    y = np.array([1, 1, 0, 0])
    nb = BernoulliNB().fit(X, y)
    assert nb.predict_proba([[1, 0]])[0] > nb.predict_proba([[0, 0]])[0]


def test_logreg_learns_separable():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 2, size=(200, 5)).astype(float)
    y = X[:, 2].astype(int)
    lr = LogisticRegression(steps=2000).fit(X, y)
    assert lr.w[2] > 1 and np.all(np.abs(np.delete(lr.w, 2)) < lr.w[2] / 2)


@pytest.mark.parametrize("cls", [LogisticRegression, BernoulliNB])
def test_single_class_fold_is_degenerate(cls):
    with pytest.raises(DegenerateFoldError, match="fold 3"):
        cls().fit(np.ones((4, 2)), np.zeros(4), fold=3)
