import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momo import data as D
from momo.errors import ConfigError


def read_image(img):
    """Recover (color, shape, position) from pixels without using the renderer."""
    fg = np.any(np.abs(img - D.BACKGROUND) > 1e-3, axis=-1)
    ys, xs = np.nonzero(fg)
    rgb = img[fg].mean(axis=0)
    color = min(D.PALETTE, key=lambda c: np.sum((np.array(D.PALETTE[c]) - rgb) ** 2))
    half = img.shape[0] / 2
    cy, cx = ys.mean() + 0.5, xs.mean() + 0.5
    position = ("bottom" if cy > half else "top") + "-" + ("right" if cx > half else "left")
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = fg.sum() / box
    mid = (ys.max() + ys.min()) / 2
    if fill > 0.9:
        shape = "square"
    elif fill > 0.68:
        shape = "circle"
    elif ys.mean() - mid > 0.08 * (ys.max() - ys.min()):
        shape = "triangle"  # mass sits towards the base
    else:
        shape = "cross"
    return color, shape, position


def test_render_then_parse_round_trip():
    pairs = D.make_synthetic_pairs(64, 32, 7)
    assert len(pairs) == 64
    assert len({p.caption.text for p in pairs}) == 64
    for p in pairs:
        parsed = D.parse_caption(p.caption.text)
        assert parsed == D.class_attributes(p.image.label)
        assert read_image(p.image.pixels) == parsed


def test_generation_is_deterministic():
    a = D.make_synthetic_pairs(20, 32, 3)
    b = D.make_synthetic_pairs(20, 32, 3)
    for x, y in zip(a, b):
        assert x.image.pixels.tobytes() == y.image.pixels.tobytes()
        assert x.caption.text == y.caption.text
    c = D.make_synthetic_pairs(20, 32, 4)
    assert any(x.image.pixels.tobytes() != z.image.pixels.tobytes() for x, z in zip(a, c))


def test_single_pair_and_errors():
    assert len(D.make_synthetic_pairs(1, 32, 0)) == 1
    with pytest.raises(ConfigError):
        D.make_synthetic_pairs(0)
    with pytest.raises(ConfigError):
        D.make_synthetic_pairs(4, image_size=30, patch_size=4)


def test_pixels_in_unit_range_and_shape():
    for p in D.make_synthetic_pairs(16, 32, 1):
        assert p.image.pixels.shape == (32, 32, 3)
        assert p.image.pixels.min() >= 0.0 and p.image.pixels.max() <= 1.0


def test_vocab_and_tokenize():
    vocab = D.default_vocab()
    assert vocab.id_to_token[:4] == list(D.RESERVED)
    assert len(vocab) == 4 + 4 + 4 + 4 + 2
    ids = D.tokenize("a red square", vocab)
    assert ids.tolist() == [D.CLS, vocab.id("a"), vocab.id("red"), vocab.id("square")]
    assert D.tokenize("a purple square", vocab)[2] == D.UNK == 3
    assert D.tokenize("", vocab).tolist() == [D.CLS]
    s = "a blue cross at top-left"
    assert D.detokenize(D.tokenize(s, vocab), vocab) == s


def test_build_vocab_frequency_ranking_and_truncation():
    v = D.build_vocab(["b a a", "c a b"], max_size=6)
    assert v.id_to_token == list(D.RESERVED) + ["a", "b"]
    assert len(D.build_vocab(["x y z"] * 3, max_size=256)) == 7
    with pytest.raises(ValueError):
        D.build_vocab([])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_shape_and_range(seed):
    img = D.make_synthetic_pairs(1, 32, seed % 97)[0].image.pixels
    out = D.augment(img, np.random.default_rng(seed))
    assert out.shape == img.shape and out.dtype == img.dtype
    assert out.min() >= 0.0 and out.max() <= 1.0


class _NoOp:
    def uniform(self, lo, hi):
        return 1.0

    def integers(self, lo, hi):
        return 0

    def random(self):
        return 0.9


def test_augment_identity_without_crop_or_flip():
    img = D.make_synthetic_pairs(1, 32, 0)[0].image.pixels
    assert np.array_equal(D.augment(img, _NoOp()), img)


def test_co_iterate_epoch_lengths():
    a = D.Loader(list(range(10)), 1, seed=0, tag=1)
    b = D.Loader(list(range(50)), 1, seed=0, tag=2)
    assert len(list(D.co_iterate(a, b, 5))) == 50 == D.epoch_length(a, b, 5)
    b49 = D.Loader(list(range(49)), 1, seed=0, tag=2)
    assert len(list(D.co_iterate(a, b49, 5))) == 49
    same = D.Loader(list(range(10)), 1, seed=0, tag=3, shuffle=False)
    steps = list(D.co_iterate(same, same, 1))
    assert len(steps) == 10 and all(x == y for x, y in steps)
    with pytest.raises(ConfigError):
        list(D.co_iterate(a, b, 0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 6), st.integers(1, 4))
def test_epoch_length_property(na, nb, rep, bs):
    a = D.Loader(list(range(na)), bs, seed=1, tag=1)
    b = D.Loader(list(range(nb)), bs, seed=1, tag=2)
    assert len(list(D.co_iterate(a, b, rep, epoch=2))) == min(len(a) * rep, len(b))


def test_loader_order_is_a_function_of_seed_and_epoch():
    a = D.Loader(list(range(32)), 4, seed=5, tag=1)
    assert list(a.batches(0)) == list(D.Loader(list(range(32)), 4, seed=5, tag=1).batches(0))
    assert list(a.batches(0)) != list(a.batches(1))
    assert list(a.batches(0, 0)) != list(a.batches(0, 1))


def test_dump_and_load_round_trip(tmp_path):
    pairs = D.make_synthetic_pairs(5, 32, 2)
    D.dump_pairs(pairs, tmp_path, seed=2)
    back = D.load_pairs(tmp_path)
    for p, q in zip(pairs, back):
        assert p.image.pixels.tobytes() == q.image.pixels.tobytes()
        assert (p.caption.text, p.image.label, p.pair_id) == (q.caption.text, q.image.label, q.pair_id)
    raw = (tmp_path / "img_000000.f32").read_bytes()
    assert len(raw) == 32 * 32 * 3 * 4


def test_train_data_builder():
    td = D.build_train_data(D.DataConfig(n_images=8, n_texts=6, n_pairs=5), seed=1)
    assert (len(td.images), len(td.texts), len(td.pairs)) == (8, 6, 5)
    assert all(t.ids[0] == D.CLS and len(t.ids) == 6 for t in td.texts)
    assert all(np.all(t.ids[1:] >= 4) for t in td.texts)
    with pytest.raises(ConfigError):
        D.DataConfig(n_pairs=0)
