"""Training objectives: masked image/language/cross-modal reconstruction,
global image-text contrast and image-text matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .masking import JointMaskPlan, MaskPlan, gather_masked
from .tensor import Tensor


def _plans(plan) -> list[MaskPlan] | MaskPlan:
    return plan if isinstance(plan, MaskPlan) else list(plan)


def mim_loss(pred_patches: Tensor, target_patches, plan) -> Tensor:
    """Mean squared pixel error over masked patches only."""
    target = T.as_tensor(target_patches)
    if pred_patches.shape != target.shape:
        raise ValueError(f"prediction {pred_patches.shape} vs target {target.shape}")
    plans = _plans(plan)
    seq_len = plans.seq_len if isinstance(plans, MaskPlan) else plans[0].seq_len
    if pred_patches.shape[-2] != seq_len:
        raise ValueError(f"predictions cover {pred_patches.shape[-2]} positions, plan has {seq_len}")
    return T.mse(gather_masked(pred_patches, plans), gather_masked(target, plans))


def mlm_loss(logits: Tensor, target_ids, plan) -> Tensor:
    """Cross-entropy over masked token positions, mean-reduced."""
    target_ids = np.asarray(target_ids)
    plans = _plans(plan)
    if isinstance(plans, MaskPlan):
        if logits.ndim != 2 or logits.shape[0] != plans.seq_len or target_ids.shape != (plans.seq_len,):
            raise ValueError("logits/targets do not match the mask plan")
        return T.cross_entropy(T.take(logits, plans.masked_idx, axis=0), target_ids[plans.masked_idx])
    if logits.ndim != 3 or logits.shape[:2] != target_ids.shape or logits.shape[1] != plans[0].seq_len:
        raise ValueError(f"logits {logits.shape} / targets {target_ids.shape} do not match the mask plans")
    idx = np.stack([p.masked_idx for p in plans])
    picked = gather_masked(logits, plans)
    targets = np.take_along_axis(target_ids, idx, axis=1)
    return T.cross_entropy(T.reshape(picked, (-1, logits.shape[-1])), targets.reshape(-1))


def cmm_loss(outputs: dict[str, Tensor], pixel_target, text_target, plans: list[JointMaskPlan],
             lam: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """Joint reconstruction loss; returns ``(total, image_part, text_part)``."""
    iplans = [p.image_plan for p in plans]
    tplans = [p.text_plan for p in plans]
    if outputs["pixels"].shape[1] != iplans[0].seq_len or outputs["logits"].shape[1] != tplans[0].seq_len:
        raise ValueError("joint outputs do not match the modality boundary of the plans")
    img = mim_loss(outputs["pixels"], pixel_target, iplans)
    txt = mlm_loss(outputs["logits"], text_target, tplans)
    return img + txt * lam, img, txt


@dataclass
class ContrastiveBatchOutput:
    image_vectors: Tensor
    text_vectors: Tensor
    tau: Tensor

    def similarity(self) -> np.ndarray:
        return self.image_vectors.data @ self.text_vectors.data.T / self.tau.data


def contrastive_logits(image_vectors: Tensor, text_vectors: Tensor, tau) -> Tensor:
    tau = T.as_tensor(tau)
    return T.matmul(image_vectors, T.transpose(text_vectors, (1, 0))) / tau


def global_contrastive_loss(out: ContrastiveBatchOutput) -> Tensor:
    """Symmetric in-batch InfoNCE over cosine similarities divided by tau."""
    n = out.image_vectors.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 pairs")
    logits = contrastive_logits(out.image_vectors, out.text_vectors, out.tau)
    labels = np.arange(n)
    i2t = T.cross_entropy(logits, labels)
    t2i = T.cross_entropy(T.transpose(logits, (1, 0)), labels)
    return (i2t + t2i) * 0.5


def ideal_contrastive_floor(n: int, tau: float) -> float:
    """Loss of a batch whose pairs coincide and are mutually orthogonal."""
    return float(-np.log(np.exp(1.0 / tau) / (np.exp(1.0 / tau) + (n - 1))))


def _offdiag_softmax(sim: np.ndarray) -> np.ndarray:
    n = sim.shape[0]
    s = sim.astype(np.float64).copy()
    s[np.arange(n), np.arange(n)] = -np.inf
    s -= s.max(axis=1, keepdims=True)
    w = np.exp(s)
    return w / w.sum(axis=1, keepdims=True)


def hard_negative_probs(sim: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise sampling weights: captions per image, images per caption."""
    return _offdiag_softmax(sim), _offdiag_softmax(sim.T)


def sample_hard_negatives(sim: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One negative caption per image and one negative image per caption."""
    n = sim.shape[0]
    if n < 2:
        raise ValueError("hard negatives need at least 2 pairs")
    p_txt, p_img = hard_negative_probs(sim)
    u = rng.random((2, n))
    # inverse-CDF draw, diagonal has zero mass so it is never picked
    neg_txt = np.minimum((np.cumsum(p_txt, axis=1) < u[0][:, None]).sum(axis=1), n - 1)
    neg_img = np.minimum((np.cumsum(p_img, axis=1) < u[1][:, None]).sum(axis=1), n - 1)
    return neg_txt, neg_img


def balanced_bce(logits: Tensor, labels) -> Tensor:
    """BCE with positives and negatives weighted 1:1 regardless of their counts."""
    labels = np.asarray(labels, dtype=np.float64)
    n_pos, n_neg = labels.sum(), (1 - labels).sum()
    w = np.where(labels > 0, 0.5 / max(n_pos, 1), 0.5 / max(n_neg, 1))
    return T.bce_with_logits(logits, labels, w)


def itm_loss(model, pixels: np.ndarray, ids: np.ndarray, sim_matrix: np.ndarray,
             rng: np.random.Generator) -> Tensor:
    """Matching loss on n positives plus 2n similarity-mined negatives."""
    n = pixels.shape[0]
    if n < 2:
        raise ValueError("image-text matching needs at least 2 pairs")
    neg_txt, neg_img = sample_hard_negatives(np.asarray(sim_matrix), rng)
    all_pixels = np.concatenate([pixels, pixels, pixels[neg_img]])
    all_ids = np.concatenate([ids, ids[neg_txt], ids])
    labels = np.concatenate([np.ones(n), np.zeros(2 * n)])
    logits = model.itm_score(model.encode_joint(all_pixels, all_ids))
    return balanced_bce(logits, labels)
