import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from momo import tensor as T
from momo.errors import ConfigError
from momo.evaluation import encoder_flops
from momo.losses import mlm_loss
from momo.masking import JointMaskPlan, MaskPlan, sample_masks
from momo.model import MoMoModel, ModelConfig, patchify, pixel_targets, unpatchify
from momo.optim import SGD, AdamW


def small_cfg(**kw):
    base = dict(enc_layers=2, enc_dim=16, enc_heads=2, dec_layers=1, dec_dim=8, dec_heads=2, patch_size=4,
                image_size=16, vocab_size=20, max_text_pos=8, contrastive_dim=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def model():
    m = MoMoModel(small_cfg(), seed=1)
    m.add_decoder("img", "image")
    m.add_decoder("txt", "text")
    m.add_decoder("joint", "joint")
    return m


def images(n, size=16, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3)).astype(np.float32)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(enc_dim=30, enc_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"enc_layerz": 2})
    full = ModelConfig(enc_layers=12, enc_dim=768, enc_heads=12, dec_layers=8, dec_dim=512, dec_heads=16,
                        patch_size=16, image_size=224)
    assert full.n_patches == 196
    assert ModelConfig.from_dict(full.to_dict()) == full


def test_embed_image_token_count_and_locality():
    m = MoMoModel(ModelConfig(), seed=0)
    a = images(1, 32)
    b = a.copy()
    b[0, 4:8, 8:12] = 0.0  # patch (1, 2) of an 8x8 grid
    ea, eb = m.embed_image(a).data, m.embed_image(b).data
    assert ea.shape == (1, 64, 64)
    changed = np.flatnonzero(np.any(ea[0] != eb[0], axis=-1))
    assert changed.tolist() == [1 * 8 + 2]
    with pytest.raises(ValueError):
        m.embed_image(images(1, 16))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 16, 12), elements=st.floats(-5, 5)))
def test_patchify_unpatchify_round_trip(p):
    assert np.array_equal(patchify(unpatchify(p, 2, 3), 2), p)


def test_embed_text(model):
    assert model.embed_text(np.array([1])).shape == (1, 1, 16)
    e = model.embed_text(np.array([1, 7, 7])).data[0]
    assert not np.allclose(e[1], e[2])
    with pytest.raises(IndexError):
        model.embed_text(np.array([1, 20]))
    with pytest.raises(ValueError):
        model.embed_text(np.ones(9, dtype=int))


def test_embedding_gradient_only_on_used_rows(model):
    ids = np.array([[1, 5, 9, 5]])
    T.tsum(model.embed_text(ids) * model.embed_text(ids)).backward()
    used = np.flatnonzero(np.any(model.token_embed.grad != 0, axis=1))
    assert used.tolist() == [1, 5, 9]


def test_encode_shape_and_permutation_equivariance(model):
    with T.precision("f64"):
        m = MoMoModel(small_cfg(), seed=2)
        x = np.random.default_rng(0).standard_normal((1, 7, 16))
        perm = np.random.default_rng(1).permutation(7)
        out = m.encode(T.Tensor(x)).data
        out_p = m.encode(T.Tensor(x[:, perm])).data
    assert out.shape == x.shape
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)


def test_flop_model_ratio():
    assert encoder_flops(49, 768) / encoder_flops(196, 768) < 0.35
    assert encoder_flops(50, 64) / encoder_flops(197, 64) < 0.35


def test_decoder_output_shapes(model):
    cfg = model.cfg
    pix = images(2)
    out = model.forward_mim(pix, sample_masks(2, cfg.n_patches, 0.75, np.random.default_rng(0)), "img")
    assert out["pixels"].shape == (2, cfg.n_patches, cfg.patch_dim)
    ids = np.array([[1, 4, 5, 6, 7], [1, 8, 9, 10, 11]])
    out = model.forward_mlm(ids, sample_masks(2, 4, 0.5, np.random.default_rng(0)), "txt")
    assert out["logits"].shape == (2, 4, cfg.vocab_size)
    with pytest.raises(KeyError):
        model.forward_mlm(ids, sample_masks(2, 4, 0.5, np.random.default_rng(0)), "nope")


def test_joint_decoder_splits_at_modality_boundary():
    m = MoMoModel(ModelConfig(vocab_size=20, max_text_pos=13), seed=0)
    m.add_decoder("joint", "joint")
    ids = np.concatenate([[1], np.arange(4, 16)])[None]  # 12 content tokens
    plan = JointMaskPlan(MaskPlan.from_masked(64, np.arange(0, 64, 2)), MaskPlan.from_masked(12, [0, 5]))
    dec_record = []
    out = m.forward_cmm(images(1, 32), ids, [plan], "joint", dec_record=dec_record)
    assert out["pixels"].shape == (1, 64, m.cfg.patch_dim)
    assert out["logits"].shape == (1, 12, 20)
    assert dec_record[0].shape[-1] == 1 + 64 + 12


def test_contrastive_projection_properties(model):
    rng = np.random.default_rng(0)
    h = T.Tensor(rng.standard_normal((5, 16)).astype(np.float32))
    for modality in ("image", "text"):
        v = model.project_contrastive(h, modality).data
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-6)
        v3 = model.project_contrastive(T.Tensor(h.data * 3.7), modality).data
        np.testing.assert_allclose(v3, v, atol=1e-6)
        np.testing.assert_allclose(np.sum(v * v, axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        model.project_contrastive(h, "audio")


def test_itm_head(model):
    pix, ids = images(3), np.array([[1, 4, 5, 6]] * 3)
    logits = model.itm_score(model.encode_joint(pix, ids))
    assert logits.shape == (3,)
    T.tsum(logits).backward()
    assert all(np.any(p.grad != 0) for p in model.encoder.parameters())
    for p in model.itm_fc1.parameters() + model.itm_fc2.parameters():
        p.data[...] = 0
    assert np.all(model.itm_score(model.encode_joint(pix, ids)).data == 0)


@pytest.mark.parametrize("opt_cls", [SGD, AdamW])
def test_weight_tying_survives_an_update(model, opt_cls):
    ids = np.array([[1, 4, 5, 6, 7], [1, 8, 9, 10, 11]])
    plans = sample_masks(2, 4, 0.5, np.random.default_rng(0))
    opt = opt_cls(list(model.named_parameters()))
    opt.lr = 0.1
    before = model.token_embed.data.copy()
    mlm_loss(model.forward_mlm(ids, plans, "txt")["logits"], ids[:, 1:], plans).backward()
    opt.step()
    head = model.lm_head_weight()
    assert head is model.token_embed
    assert not np.array_equal(head.data, before)
    assert head.data.tobytes() == model.token_embed.data.tobytes()
    names = [n for n, _ in model.named_parameters()]
    assert "token_embed" in names and not any("lm_head" in n for n in names)


def test_shared_encoder_text_update_moves_image_encoding(model):
    pix = images(2)
    before = model.encode_image(pix).data.copy()
    ids = np.array([[1, 4, 5, 6, 7], [1, 8, 9, 10, 11]])
    plans = sample_masks(2, 4, 0.5, np.random.default_rng(0))
    mlm_loss(model.forward_mlm(ids, plans, "txt")["logits"], ids[:, 1:], plans).backward()
    opt = SGD(list(model.named_parameters()))
    opt.lr = 0.5
    opt.step()
    assert not np.allclose(model.encode_image(pix).data, before)


def test_encoder_sees_only_visible_tokens(model):
    cfg = model.cfg
    rng = np.random.default_rng(0)
    model.forward_mim(images(2), sample_masks(2, cfg.n_patches, 0.75, rng), "img")
    assert model.visible_calls[-1] == 4 + 1
    ids = np.array([[1, 4, 5, 6, 7, 8, 9]] * 2)
    model.forward_mlm(ids, sample_masks(2, 6, 0.5, rng), "txt")
    assert model.visible_calls[-1] == 3 + 1
    plans = [JointMaskPlan(MaskPlan.from_masked(16, range(12)), MaskPlan.from_masked(6, [0, 1, 2, 3]))] * 2
    model.forward_cmm(images(2), ids, plans, "joint")
    assert model.visible_calls[-1] == 4 + 2 + 1


def test_pixel_targets_normalised_per_patch():
    t = pixel_targets(images(2, 16), 4)
    np.testing.assert_allclose(t.mean(axis=-1), 0, atol=1e-5)
    raw = pixel_targets(images(2, 16), 4, normalize=False)
    assert np.array_equal(raw, patchify(images(2, 16), 4))


def test_state_dict_round_trip(model):
    other = MoMoModel(small_cfg(), seed=9)
    for k, d in model.decoder_kinds().items():
        other.add_decoder(k, d, seed=5)
    other.load_state_dict(model.state_dict())
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), other.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_temperature_clamp(model):
    model.tau.data[...] = 5.0
    model.clamp_temperature()
    assert float(model.tau.data) == 1.0
    model.tau.data[...] = 1e-4
    model.clamp_temperature()
    assert float(model.tau.data) == pytest.approx(0.01)
