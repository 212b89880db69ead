"""Retrieval recall, frozen-feature linear probing, attention rollout heatmaps
and a few analytic helpers used by the test-suite."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import tensor as T
from .data import ImageSample, PairedSample, collate_pairs
from .losses import cmm_loss
from .masking import JointMaskPlan, MaskPlan, joint_plan
from .model import MoMoModel, pixel_targets


# ---------------------------------------------------------------------------
# retrieval

def ranks_from_similarity(sim: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry within each row; ties go to the lower column index."""
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    diag = sim[np.arange(n), np.arange(n)][:, None]
    cols = np.arange(n)[None, :]
    ahead = (sim > diag) | ((sim == diag) & (cols < np.arange(n)[:, None]))
    return ahead.sum(axis=1)


def recall_at(sim: np.ndarray, k: int) -> float:
    return float(np.mean(ranks_from_similarity(sim) < k))


@dataclass(frozen=True)
class RetrievalReport:
    tr_at_1: float
    tr_at_5: float
    ir_at_1: float
    ir_at_5: float
    n_pairs: int

    @property
    def average(self) -> float:
        return (self.tr_at_1 + self.tr_at_5 + self.ir_at_1 + self.ir_at_5) / 4.0

    def as_dict(self) -> dict:
        return {"tr_at_1": self.tr_at_1, "tr_at_5": self.tr_at_5, "ir_at_1": self.ir_at_1,
                "ir_at_5": self.ir_at_5, "average": self.average, "n_pairs": self.n_pairs}


def report_from_similarity(sim: np.ndarray) -> RetrievalReport:
    """Rows are image queries, columns captions."""
    sim = np.asarray(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {sim.shape}")
    if sim.shape[0] < 5:
        raise ValueError(f"recall@5 needs at least 5 pairs, got {sim.shape[0]}")
    return RetrievalReport(recall_at(sim, 1), recall_at(sim, 5), recall_at(sim.T, 1), recall_at(sim.T, 5),
                           sim.shape[0])


def embed_pairs(model: MoMoModel, pairs: Sequence[PairedSample], batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    img, txt = [], []
    with T.no_grad():
        for i in range(0, len(pairs), batch_size):
            b = collate_pairs(pairs[i:i + batch_size])
            img.append(model.image_vectors(b.pixels).data)
            txt.append(model.text_vectors(b.ids).data)
    return np.concatenate(img), np.concatenate(txt)


def retrieval_eval(model: MoMoModel, pairs: Sequence[PairedSample]) -> RetrievalReport:
    if len(pairs) < 5:
        raise ValueError(f"retrieval needs at least 5 pairs, got {len(pairs)}")
    iv, tv = embed_pairs(model, pairs)
    return report_from_similarity(iv.astype(np.float64) @ tv.astype(np.float64).T)


# ---------------------------------------------------------------------------
# linear probe

@dataclass(frozen=True)
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    n_classes: int


def cls_features(model: MoMoModel, images: Sequence[ImageSample], batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            pix = np.stack([s.pixels for s in images[i:i + batch_size]]).astype(np.float32)
            out.append(model.encode_image(pix).data[:, 0])
    return np.concatenate(out).astype(np.float64)


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 200,
                           l2: float = 1e-4) -> np.ndarray:
    """Multinomial logistic regression by L-BFGS; returns a (d+1, K) weight matrix."""
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.eye(n_classes)[y]

    def objective(w_flat):
        w = w_flat.reshape(d + 1, n_classes)
        z = xb @ w
        lse = logsumexp(z, axis=1, keepdims=True)
        loss = float(np.mean(lse[:, 0] - (z * onehot).sum(axis=1))) + 0.5 * l2 * float(np.sum(w[:-1] ** 2))
        grad = xb.T @ (np.exp(z - lse) - onehot) / n
        grad[:-1] += l2 * w[:-1]
        return loss, grad.ravel()

    res = minimize(objective, np.zeros((d + 1) * n_classes), jac=True, method="L-BFGS-B",
                   options={"maxiter": epochs})
    return res.x.reshape(d + 1, n_classes)


def probe_features(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                   epochs: int = 200) -> ProbeResult:
    classes = np.unique(train_y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least 2 classes")
    lookup = {c: i for i, c in enumerate(classes)}
    ytr = np.array([lookup[c] for c in train_y])
    mean, std = train_x.mean(axis=0), train_x.std(axis=0) + 1e-6
    xtr, xte = (train_x - mean) / std, (test_x - mean) / std
    w = fit_softmax_regression(xtr, ytr, classes.size, epochs)

    def predict(x):
        return classes[np.argmax(np.hstack([x, np.ones((len(x), 1))]) @ w, axis=1)]

    train_acc = float(np.mean(predict(xtr) == train_y))
    test_acc = float(np.mean(predict(xte) == test_y)) if len(test_y) else float("nan")
    return ProbeResult(train_acc, test_acc, int(classes.size))


def linear_probe(model: MoMoModel, train: Sequence[ImageSample], test: Sequence[ImageSample],
                 epochs: int = 200) -> ProbeResult:
    """Frozen encoder, [CLS] features, one linear softmax layer."""
    ytr = np.array([s.label for s in train])
    if np.unique(ytr).size < 2:
        raise ValueError("linear probe needs at least 2 classes")
    return probe_features(cls_features(model, train), ytr, cls_features(model, test),
                          np.array([s.label for s in test]), epochs)


# ---------------------------------------------------------------------------
# attention rollout

def rollout(attentions: Sequence[np.ndarray]) -> np.ndarray:
    """Product of identity-mixed, head-averaged attention maps, last layer leftmost."""
    result = None
    for a in attentions:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 3:
            a = a.mean(axis=0)
        mixed = 0.5 * (a + np.eye(a.shape[0]))
        result = mixed if result is None else mixed @ result
    if result is None:
        raise ValueError("rollout needs at least one attention map")
    return result


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def _joint_decoder(model: MoMoModel) -> str | None:
    for dec_id, dec in sorted(model.decoders.items()):
        if dec.kind == "joint":
            return dec_id
    return None


def attention_rollout(model: MoMoModel, pair: PairedSample, masked_token_pos: int,
                      decoder_id: str | None = None) -> np.ndarray:
    """Heatmap over image patches for one masked caption token.

    ``masked_token_pos`` indexes the full joint sequence ``[global] +
    patches + caption words``.  The token is removed from the encoder input,
    so the map composes the decoder rollout, the restore step (which routes
    visible rows back to their positions and gives the masked row only the
    constant mask vector) and the encoder rollout.  Without a joint decoder
    the encoder rollout of the unmasked sequence is used instead.
    """
    n_img = model.cfg.n_patches
    ids = np.asarray(pair.caption.ids)
    n_txt = len(ids) - 1
    if not n_img + 1 <= masked_token_pos <= n_img + n_txt:
        raise IndexError(f"position {masked_token_pos} is not a caption token "
                         f"(valid {n_img + 1}..{n_img + n_txt})")
    pixels = pair.image.pixels[None].astype(np.float32)
    decoder_id = decoder_id or _joint_decoder(model)
    enc_maps: list = []
    with T.no_grad():
        if decoder_id is None:
            model.encode_joint(pixels, ids[None], record=enc_maps)
            row = rollout([m[0] for m in enc_maps])[masked_token_pos]
        else:
            t = masked_token_pos - n_img - 1
            plan = JointMaskPlan(MaskPlan.from_masked(n_img, []), MaskPlan.from_masked(n_txt, [t]))
            dec_maps: list = []
            model.forward_cmm(pixels, ids[None], [plan], decoder_id, record=enc_maps, dec_record=dec_maps)
            full = 1 + n_img + n_txt
            visible = [0] + [1 + i for i in range(n_img)] + [1 + n_img + j for j in range(n_txt) if j != t]
            select = np.zeros((full, len(visible)))
            select[visible, np.arange(len(visible))] = 1.0
            composed = rollout([m[0] for m in dec_maps]) @ select @ rollout([m[0] for m in enc_maps])
            row = composed[masked_token_pos]
    heat = minmax(row[1:1 + n_img])
    return heat.reshape(model.cfg.grid, model.cfg.grid)


def write_pgm(path, heatmap: np.ndarray, scale: int = 1) -> Path:
    """Binary 8-bit greyscale image; values in [0, 1] map to 0..255."""
    img = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale)))
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.round(img * 255).astype(np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields = blob.split(maxsplit=4)
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(fields[4][: w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# masked-word prediction and cost model

def masked_word_loss(model: MoMoModel, pairs: Sequence[PairedSample], decoder_id: str | None = None) -> float:
    """Mean cross-entropy of each caption word masked alone, image fully visible.

    Uses the joint path and decoder, i.e. the model's own cross-modal
    reconstruction route.
    """
    decoder_id = decoder_id or _joint_decoder(model)
    if decoder_id is None:
        raise ValueError("masked-word evaluation needs a joint decoder")
    b = collate_pairs(pairs)
    n_img = model.cfg.n_patches
    n_txt = b.ids.shape[1] - 1
    losses = []
    with T.no_grad():
        for t in range(n_txt):
            plan = JointMaskPlan(MaskPlan.from_masked(n_img, []), MaskPlan.from_masked(n_txt, [t]))
            out = model.forward_cmm(b.pixels, b.ids, [plan] * len(pairs), decoder_id)
            losses.append(float(T.cross_entropy(out["logits"][:, t], b.ids[:, 1 + t]).data))
    return float(np.mean(losses))


def cmm_text_loss(model: MoMoModel, pairs: Sequence[PairedSample], image_ratio: float = 0.75,
                  text_ratio: float = 0.75, draws: int = 4, seed: int = 0, decoder_id: str | None = None) -> float:
    """Masked-token cross-entropy of the cross-modal path at its training ratios.

    Joint plans come from a fixed seed, so the number is reproducible and
    comparable across checkpoints.  Averaged over ``draws`` plan sets.
    """
    decoder_id = decoder_id or _joint_decoder(model)
    if decoder_id is None:
        raise ValueError("cross-modal text loss needs a joint decoder")
    b = collate_pairs(pairs)
    n_img, n_txt = model.cfg.n_patches, b.ids.shape[1] - 1
    targets = pixel_targets(b.pixels, model.cfg.patch_size, model.cfg.norm_pix_loss)
    rng = np.random.default_rng(seed)
    vals = []
    with T.no_grad():
        for _ in range(draws):
            plans = [joint_plan(n_img, n_txt, rng, image_ratio, text_ratio) for _ in range(len(pairs))]
            out = model.forward_cmm(b.pixels, b.ids, plans, decoder_id)
            vals.append(float(cmm_loss(out, targets, b.ids[:, 1:], plans)[2].data))
    return float(np.mean(vals))


def encoder_flops(n_tokens: int, dim: int, layers: int = 1) -> int:
    """Multiply-add count of ``layers`` transformer blocks: projections + MLP, plus attention."""
    return layers * (12 * n_tokens * dim * dim + 2 * n_tokens * n_tokens * dim)
