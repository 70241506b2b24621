import numpy as np
import pytest

from vlpretrain import autograd as ag
from vlpretrain.errors import CheckpointError, ConfigError, InputError, ShapeError
from vlpretrain.model import Model, ModelConfig, VisualTokenSet, geometry_vector, visual_arrays


def _inputs(cfg, rng, b=3):
    ids = rng.integers(5, cfg.vocab_size, size=(b, cfg.max_text_len))
    mask = np.ones_like(ids, dtype=bool)
    mask[:, -2:] = False
    ids[~mask] = 0
    feats = rng.standard_normal((b, cfg.n_visual, cfg.visual_dim))
    geom = rng.uniform(0, 1, (b, cfg.n_visual, 5))
    return ids, mask, feats, geom


def test_geometry_examples():
    assert np.allclose(geometry_vector((0, 0, 640, 480), 640, 480), [0, 0, 1, 1, 1])
    assert np.allclose(geometry_vector((25, 25, 75, 75), 100, 100), [0.25, 0.25, 0.75, 0.75, 0.25])
    thin = geometry_vector((10, 0, 10.5, 300), 400, 300)
    assert thin[4] == pytest.approx((0.5 * 300) / (400 * 300))
    with pytest.raises(ConfigError):
        geometry_vector((0, 0, 1, 1), 0, 10)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(max_seq_len=20, max_text_len=20, num_visual_tokens=6)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"hidden": 64, "colour": "red"})


def test_config_json_round_trip(tmp_path):
    cfg = ModelConfig.tiny(use_global_feature=True, max_seq_len=20)
    (tmp_path / "c.json").write_text(__import__("json").dumps(cfg.to_dict()))
    assert ModelConfig.from_file(tmp_path / "c.json") == cfg


def test_visual_token_set_validation():
    ok = VisualTokenSet(np.zeros((2, 3)), [0, 1], [[0, 0, 5, 5], [1, 1, 4, 9]], (10, 10))
    ok.validate(2)
    bad = VisualTokenSet(np.zeros((1, 3)), [0], [[5, 0, 5, 5]], (10, 10))
    with pytest.raises(InputError):
        bad.validate()
    with pytest.raises(InputError):
        VisualTokenSet(np.zeros((1, 3)), [0], [[0, 0, 11, 5]], (10, 10)).validate()


def test_visual_arrays_appends_global_token():
    cfg = ModelConfig.tiny(use_global_feature=True, max_seq_len=20, visual_dim=3)
    v = VisualTokenSet(np.ones((5, 3)), [0] * 5, [[0, 0, 2, 2]] * 5, (4, 4), global_feature=np.full(3, 7.0))
    feats, geom = visual_arrays([v], cfg)
    assert feats.shape == (1, 5, 3)
    assert np.all(feats[0, 4] == 7.0) and np.allclose(geom[0, 4], [0, 0, 1, 1, 1])
    with pytest.raises(InputError):
        visual_arrays([v.top(2)], cfg)


def test_output_shapes_and_heads(rng):
    cfg = ModelConfig.tiny()
    m = Model.create(cfg, 0)
    ids, mask, feats, geom = _inputs(cfg, rng)
    h = m.forward(ids, mask, feats, geom)
    assert h.shape == (3, cfg.seq_len, cfg.hidden)
    out = m.heads(h)
    assert out["mlm_logits"].shape == (3, cfg.max_text_len, cfg.vocab_size)
    assert out["moc_logits"].shape == (3, cfg.num_visual_tokens, cfg.num_classes)
    assert out["mrfr_pred"].shape == (3, cfg.num_visual_tokens, cfg.visual_dim)
    s = out["itm_score"].data
    assert np.all((s > 0) & (s < 1))


def test_zero_heads_give_uniform_outputs(rng):
    cfg = ModelConfig.tiny()
    m = Model.create(cfg, 0)
    for k in ("head.moc.w", "head.itm.w"):
        m.params[k].data[:] = 0.0
    m.params["emb.word"].data[:] = 0.0  # tied MLM decoder
    out = m.heads(m.forward(*_inputs(cfg, rng)))
    assert np.allclose(out["itm_score"].data, 0.5)
    p = ag.softmax(out["moc_logits"]).data
    assert np.allclose(p, 1.0 / cfg.num_classes)
    assert np.allclose(ag.softmax(out["mlm_logits"]).data, 1.0 / cfg.vocab_size)


def test_text_embedding_is_position_sensitive():
    m = Model.create(ModelConfig.tiny(), 0)
    e = m.embed_text(np.array([[7, 7, 7]])).data[0]
    assert not np.allclose(e[0], e[1])
    assert np.all(np.abs(e.mean(axis=-1)) < 1e-10)
    with pytest.raises(ConfigError):
        m.embed_text(np.zeros((1, 9), dtype=int))


def test_visual_embedding_identity_and_geometry_sensitivity(rng):
    cfg = ModelConfig.tiny()
    m = Model.create(cfg, 0)
    f = np.repeat(rng.standard_normal((1, 1, cfg.visual_dim)), 4, axis=1)
    g = np.repeat(rng.uniform(0, 1, (1, 1, 5)), 4, axis=1)
    e = m.embed_visual(f, g).data[0]
    assert np.array_equal(e[0], e[1])
    g2 = g.copy()
    g2[0, 1] = [0.1, 0.1, 0.2, 0.3, 0.01]
    e2 = m.embed_visual(f, g2).data[0]
    assert not np.allclose(e2[0], e2[1])
    with pytest.raises(InputError):
        m.embed_visual(np.zeros((1, 5, cfg.visual_dim)), np.zeros((1, 5, 5)))


def test_roi_permutation_equivariance(rng):
    cfg = ModelConfig.tiny()
    m = Model.create(cfg, 0)
    ids, mask, feats, geom = _inputs(cfg, rng, b=1)
    perm = np.array([2, 0, 3, 1])
    h = m.forward(ids, mask, feats, geom).data[0]
    hp = m.forward(ids, mask, feats[:, perm], geom[:, perm]).data[0]
    T = cfg.max_text_len
    assert np.allclose(hp[T:], h[T:][perm], atol=1e-12)
    assert np.allclose(hp[:T], h[:T], atol=1e-12)


def test_hand_computed_attention():
    cfg = ModelConfig(layers=1, hidden=2, intermediate=4, heads=1, dropout=0.0, max_seq_len=8, max_text_len=4,
                      num_visual_tokens=1, visual_dim=2, vocab_size=10, num_classes=2)
    m = Model.create(cfg, 0)
    for n in "qkvo":
        m.params[f"enc.0.attn.{n}.w"].data = np.eye(2)
        m.params[f"enc.0.attn.{n}.b"].data = np.zeros(2)
    x = np.array([[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]])
    out = m._attention(ag.Tensor(x), np.ones((1, 3), dtype=bool), 0).data[0]
    s = x[0] @ x[0].T / np.sqrt(2)
    p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    assert np.allclose(out, p @ x[0], atol=1e-14)


def test_padded_token_content_is_ignored(rng):
    cfg = ModelConfig.tiny()
    m = Model.create(cfg, 0)
    ids, mask, feats, geom = _inputs(cfg, rng, b=1)
    ids2 = ids.copy()
    ids2[0, -1] = 9  # padded slot
    a = m.forward(ids, mask, feats, geom).data
    b = m.forward(ids2, mask, feats, geom).data
    keep = np.concatenate([mask[0], np.ones(cfg.n_visual, bool)])
    assert np.array_equal(a[0, keep], b[0, keep])


def test_eval_mode_ignores_dropout_seed(rng):
    cfg = ModelConfig.tiny(dropout=0.3)
    m = Model.create(cfg, 0)
    x = _inputs(cfg, rng)
    a = m.forward(*x, mode="eval", rng=np.random.default_rng(1)).data
    b = m.forward(*x, mode="eval", rng=np.random.default_rng(2)).data
    assert np.array_equal(a, b)
    c = m.forward(*x, mode="train", rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, c)


def test_mask_mismatch_is_a_shape_error(rng):
    cfg = ModelConfig.tiny()
    m = Model.create(cfg, 0)
    ids, mask, feats, geom = _inputs(cfg, rng)
    t, v = m.embed_text(ids), m.embed_visual(feats, geom)
    with pytest.raises(ShapeError):
        m.encode(t, v, np.ones((3, 5), dtype=bool))


def test_itm_score_independent_of_batch_composition(rng):
    cfg = ModelConfig()
    m = Model.create(cfg, 3)
    ids, mask, feats, geom = _inputs(cfg, rng, b=7)
    full = m.itm_logit(m.forward(ids, mask, feats, geom)).data
    for j in range(7):
        one = m.itm_logit(m.forward(ids[j:j + 1], mask[j:j + 1], feats[j:j + 1], geom[j:j + 1])).data
        assert one[0] == full[j]


def test_checkpoint_round_trip(tmp_path, rng):
    m = Model.create(ModelConfig.tiny(), 5)
    m.save(tmp_path / "ck")
    back = Model.load(tmp_path / "ck")
    assert back.config == m.config
    for k in m.params:
        assert np.array_equal(back.params[k].data, m.params[k].data)
    assert back.checkpoint_id() == m.checkpoint_id()


def test_load_state_names_mismatched_tensor():
    m = Model.create(ModelConfig.tiny(), 0)
    state = dict(m.state_dict())
    state["head.moc.w"] = np.zeros((3, 3))
    with pytest.raises(CheckpointError, match="head.moc.w"):
        m.load_state(state)
    del state["head.moc.w"]
    with pytest.raises(CheckpointError, match="head.moc.w"):
        m.load_state(state)


def test_parameter_names_unique_and_complete():
    cfg = ModelConfig.tiny()
    m = Model.create(cfg, 0)
    assert len(m.params) == 11 + 16 * cfg.layers + 7
    assert m.num_parameters() == sum(p.data.size for p in m.params.values())


def test_init_is_seeded():
    a, b = Model.create(ModelConfig.tiny(), 1), Model.create(ModelConfig.tiny(), 1)
    assert a.checkpoint_id() == b.checkpoint_id()
    assert Model.create(ModelConfig.tiny(), 2).checkpoint_id() != a.checkpoint_id()
    w = a.params["enc.0.attn.q.w"].data
    assert np.abs(w).max() <= 2 * 0.02
