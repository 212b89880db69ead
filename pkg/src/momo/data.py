"""Synthetic shape/caption data, tokenization, augmentation and loaders.

Every image shows one shape of one color in one quadrant on a grey
background; the caption ``a <color> <shape> at <position>`` describes it
exactly.  4 colors x 4 shapes x 4 positions give 64 semantic classes.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle", "cross")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right")
N_CLASSES = len(COLORS) * len(SHAPES) * len(POSITIONS)

PALETTE = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.10),
}
BACKGROUND = 0.5

PAD, CLS, MASK, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[MASK]", "[UNK]")


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    label: int


@dataclass
class TextSample:
    ids: np.ndarray
    text: str = ""


@dataclass
class PairedSample:
    image: ImageSample
    caption: TextSample
    pair_id: int


def class_index(color: str, shape: str, position: str) -> int:
    return (COLORS.index(color) * len(SHAPES) + SHAPES.index(shape)) * len(POSITIONS) + POSITIONS.index(position)


def class_attributes(label: int) -> tuple[str, str, str]:
    color, rest = divmod(label, len(SHAPES) * len(POSITIONS))
    shape, pos = divmod(rest, len(POSITIONS))
    return COLORS[color], SHAPES[shape], POSITIONS[pos]


def caption_for(label: int) -> str:
    color, shape, position = class_attributes(label)
    return f"a {color} {shape} at {position}"


def parse_caption(caption: str) -> tuple[str, str, str]:
    words = caption.split()
    if len(words) != 5 or words[0] != "a" or words[3] != "at":
        raise ValueError(f"caption does not follow the grammar: {caption!r}")
    color, shape, position = words[1], words[2], words[4]
    if color not in COLORS or shape not in SHAPES or position not in POSITIONS:
        raise ValueError(f"unknown attribute in caption: {caption!r}")
    return color, shape, position


def _shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "triangle":
        # apex up, base on the bottom edge of the bounding box
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "cross":
        t = r / 3.0
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def render(label: int, image_size: int, rng: np.random.Generator) -> np.ndarray:
    color, shape, position = class_attributes(label)
    half = image_size / 2.0
    r = half * rng.uniform(0.28, 0.38)
    jitter = half * 0.08
    cy = half / 2.0 + rng.uniform(-jitter, jitter) + (half if position.startswith("bottom") else 0.0)
    cx = half / 2.0 + rng.uniform(-jitter, jitter) + (half if position.endswith("right") else 0.0)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) + 0.5
    mask = _shape_mask(shape, yy - cy, xx - cx, r)
    img = np.full((image_size, image_size, 3), BACKGROUND, dtype=np.float32)
    img[mask] = PALETTE[color]
    return img


def make_synthetic_pairs(n: int, image_size: int = 32, seed: int = 0, patch_size: int = 4) -> list[PairedSample]:
    """Render ``n`` image/caption pairs.

    Classes are drawn as consecutive random permutations of the 64 classes, so
    any ``n <= 64`` pairs carry distinct captions.
    """
    if n < 1:
        raise ConfigError(f"need at least one pair, got n={n}")
    if image_size % patch_size:
        raise ConfigError(f"image_size {image_size} not divisible by patch size {patch_size}")
    rng = np.random.default_rng([seed, 17])
    labels = np.concatenate([rng.permutation(N_CLASSES) for _ in range(-(-n // N_CLASSES))])[:n]
    out = []
    for i, label in enumerate(labels):
        text = caption_for(int(label))
        img = render(int(label), image_size, rng)
        out.append(PairedSample(ImageSample(img, int(label)), TextSample(np.empty(0, np.int64), text), i))
    return out


def make_image_set(n: int, image_size: int = 32, seed: int = 0, patch_size: int = 4) -> list[ImageSample]:
    return [p.image for p in make_synthetic_pairs(n, image_size, seed, patch_size)]


def make_text_corpus(n: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng([seed, 29])
    return [caption_for(int(c)) for c in rng.integers(0, N_CLASSES, size=n)]


# ---------------------------------------------------------------------------
# tokenization

@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = [None] * len(self.token_to_id)
            for tok, i in self.token_to_id.items():
                self.id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def to_json(self) -> list[str]:
        return list(self.id_to_token)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        return cls({t: i for i, t in enumerate(tokens)})


def build_vocab(corpus: Sequence[str], max_size: int = 256) -> Vocab:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size <= len(RESERVED):
        raise ConfigError(f"max_size must exceed {len(RESERVED)} reserved ids")
    counts = Counter(tok for line in corpus for tok in line.split())
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[: max_size - len(RESERVED)]
    return Vocab.from_tokens(list(RESERVED) + ranked)


def tokenize(text: str, vocab: Vocab) -> np.ndarray:
    return np.array([CLS] + [vocab.id(t) for t in text.split()], dtype=np.int64)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.id_to_token[int(i)] for i in ids if int(i) not in (PAD, CLS))


def attach_tokens(pairs: Sequence[PairedSample], vocab: Vocab) -> None:
    for p in pairs:
        p.caption.ids = tokenize(p.caption.text, vocab)


def default_vocab() -> Vocab:
    corpus = [caption_for(c) for c in range(N_CLASSES)]
    return build_vocab(corpus)


# ---------------------------------------------------------------------------
# augmentation

def augment(image: np.ndarray, rng: np.random.Generator, flip: bool = True) -> np.ndarray:
    """Random square crop of 87.5-100% of the area resized back, then an optional h-flip."""
    h, w = image.shape[:2]
    area = rng.uniform(0.875, 1.0)
    side_h = min(h, int(round(h * np.sqrt(area))))
    side_w = min(w, int(round(w * np.sqrt(area))))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    out = image
    if side_h != h or side_w != w:
        crop = image[top:top + side_h, left:left + side_w]
        out = ndimage.zoom(crop, (h / side_h, w / side_w, 1), order=1, mode="nearest", grid_mode=True)
        out = np.clip(out, 0.0, 1.0).astype(image.dtype)
    if flip and rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# loaders

class Loader:
    """Shuffled fixed-size batches of a list, reshuffled per (epoch, pass)."""

    def __init__(self, items: Sequence, batch_size: int, seed: int = 0, tag: int = 0, shuffle: bool = True):
        if not items:
            raise ConfigError("loader needs at least one item")
        self.items = list(items)
        self.batch_size = min(batch_size, len(self.items))
        self.seed = seed
        self.tag = tag
        self.shuffle = shuffle

    def __len__(self) -> int:
        return len(self.items) // self.batch_size

    def batches(self, epoch: int, pass_idx: int = 0) -> Iterator[list]:
        order = np.arange(len(self.items))
        if self.shuffle:
            order = np.random.default_rng([self.seed, self.tag, epoch, pass_idx]).permutation(order)
        for b in range(len(self)):
            idx = order[b * self.batch_size:(b + 1) * self.batch_size]
            yield [self.items[i] for i in idx]


def epoch_length(loader_a: Loader, loader_b: Loader, repetition_a: int = 1) -> int:
    return min(len(loader_a) * repetition_a, len(loader_b))


def co_iterate(loader_a: Loader, loader_b: Loader, repetition_a: int = 1, epoch: int = 0) -> Iterator[tuple[list, list]]:
    """Pair batches of ``loader_a`` (repeated ``repetition_a`` times) with ``loader_b``.

    The epoch ends when the shorter effective stream runs out.
    """
    if repetition_a < 1:
        raise ConfigError(f"repetition factor must be >= 1, got {repetition_a}")
    stream_a = (b for p in range(repetition_a) for b in loader_a.batches(epoch, p))
    yield from zip(stream_a, loader_b.batches(epoch, 0))


# ---------------------------------------------------------------------------
# batches

@dataclass
class ImageBatch:
    pixels: np.ndarray  # (B, H, W, C)
    labels: np.ndarray


@dataclass
class TextBatch:
    ids: np.ndarray  # (B, T)


@dataclass
class PairBatch:
    pixels: np.ndarray
    ids: np.ndarray
    pair_ids: np.ndarray


def collate_images(items: Sequence[ImageSample], rng: np.random.Generator | None = None, flip: bool = True) -> ImageBatch:
    pix = [augment(s.pixels, rng, flip) if rng is not None else s.pixels for s in items]
    return ImageBatch(np.stack(pix).astype(np.float32), np.array([s.label for s in items]))


def collate_texts(items: Sequence[TextSample]) -> TextBatch:
    lengths = {len(s.ids) for s in items}
    if len(lengths) != 1:
        raise ValueError("text batch must hold equal-length sequences")
    return TextBatch(np.stack([s.ids for s in items]))


def collate_pairs(items: Sequence[PairedSample], rng: np.random.Generator | None = None) -> PairBatch:
    # flipping would contradict left/right in the caption, so pairs only get crops
    imgs = collate_images([p.image for p in items], rng, flip=False)
    texts = collate_texts([p.caption for p in items])
    return PairBatch(imgs.pixels, texts.ids, np.array([p.pair_id for p in items]))


# ---------------------------------------------------------------------------
# dump / load

def dump_pairs(pairs: Sequence[PairedSample], directory, seed: int | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        fname = f"img_{p.pair_id:06d}.f32"
        (directory / fname).write_bytes(p.image.pixels.astype("<f4").tobytes())
        entries.append({
            "file": fname,
            "shape": list(p.image.pixels.shape),
            "caption": p.caption.text,
            "label": p.image.label,
            "pair_id": p.pair_id,
        })
    manifest = {"seed": seed, "n": len(entries), "samples": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_pairs(directory) -> list[PairedSample]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = []
    for e in manifest["samples"]:
        raw = np.frombuffer((directory / e["file"]).read_bytes(), dtype="<f4")
        pixels = raw.reshape(e["shape"]).astype(np.float32)
        out.append(PairedSample(ImageSample(pixels, e["label"]), TextSample(np.empty(0, np.int64), e["caption"]), e["pair_id"]))
    return out


# ---------------------------------------------------------------------------
# run-level datasets

@dataclass
class DataConfig:
    n_images: int = 256
    n_texts: int = 256
    n_pairs: int = 64
    augment: bool = True
    seed: int | None = None  # None: derive from the run seed

    def __post_init__(self):
        for name in ("n_images", "n_texts", "n_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")


@dataclass
class TrainData:
    images: list[ImageSample]
    texts: list[TextSample]
    pairs: list[PairedSample]
    vocab: Vocab


def build_train_data(cfg: DataConfig, image_size: int = 32, patch_size: int = 4, seed: int = 0) -> TrainData:
    """Unimodal images, unimodal captions and paired samples from disjoint seed streams."""
    base = seed if cfg.seed is None else cfg.seed
    vocab = default_vocab()
    images = make_image_set(cfg.n_images, image_size, seed=base * 3 + 1, patch_size=patch_size)
    texts = [TextSample(tokenize(t, vocab), t) for t in make_text_corpus(cfg.n_texts, seed=base * 3 + 2)]
    pairs = make_synthetic_pairs(cfg.n_pairs, image_size, seed=base * 3 + 3, patch_size=patch_size)
    attach_tokens(pairs, vocab)
    return TrainData(images, texts, pairs, vocab)
