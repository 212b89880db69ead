"""Mask sampling plus the gather/restore bookkeeping for visible-only encoding.

Plans index *content* tokens only (image patches, or text tokens after the
leading [CLS]).  The global token is never masked; callers prepend it to the
visible sequence themselves.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, broadcast_rows, concat, take, take_along


def masked_count(seq_len: int, ratio: float) -> int:
    """``round(seq_len * ratio)`` (half-up), clamped to ``[1, seq_len - 1]``."""
    n = int(np.floor(seq_len * ratio + 0.5))
    return min(max(n, 1), seq_len - 1)


@dataclass(frozen=True)
class MaskPlan:
    seq_len: int
    masked_idx: np.ndarray
    visible_idx: np.ndarray
    restore_perm: np.ndarray
    ratio: float

    @classmethod
    def from_masked(cls, seq_len: int, masked, ratio: float | None = None) -> "MaskPlan":
        masked = np.unique(np.asarray(masked, dtype=np.intp))
        if masked.size and (masked[0] < 0 or masked[-1] >= seq_len):
            raise ValueError(f"masked index outside [0, {seq_len})")
        keep = np.ones(seq_len, dtype=bool)
        keep[masked] = False
        visible = np.flatnonzero(keep)
        restore = np.argsort(np.concatenate([visible, masked]), kind="stable")
        if ratio is None:
            ratio = masked.size / seq_len
        return cls(seq_len, masked, visible, restore.astype(np.intp), ratio)

    @property
    def n_visible(self) -> int:
        return int(self.visible_idx.size)

    @property
    def n_masked(self) -> int:
        return int(self.masked_idx.size)


@dataclass(frozen=True)
class JointMaskPlan:
    image_plan: MaskPlan
    text_plan: MaskPlan

    @property
    def visible_len(self) -> int:
        """Encoder length of the joint sequence, global token included."""
        return self.image_plan.n_visible + self.text_plan.n_visible + 1


def sample_mask(seq_len: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if seq_len < 2:
        raise ValueError(f"sample_mask needs seq_len >= 2, got {seq_len}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    m = masked_count(seq_len, ratio)
    masked = rng.choice(seq_len, size=m, replace=False)
    return MaskPlan.from_masked(seq_len, masked, ratio)


def sample_masks(batch: int, seq_len: int, ratio: float, rng: np.random.Generator) -> list[MaskPlan]:
    return [sample_mask(seq_len, ratio, rng) for _ in range(batch)]


def joint_plan(img_len: int, txt_len: int, rng: np.random.Generator,
               r_img: float = 0.75, r_txt: float = 0.75) -> JointMaskPlan:
    return JointMaskPlan(sample_mask(img_len, r_img, rng), sample_mask(txt_len, r_txt, rng))


def _as_plans(plan) -> list[MaskPlan]:
    return [plan] if isinstance(plan, MaskPlan) else list(plan)


def _stacked(plans: Sequence[MaskPlan], attr: str) -> np.ndarray:
    rows = [getattr(p, attr) for p in plans]
    if len({r.size for r in rows}) != 1:
        raise ValueError("plans in one batch must mask the same number of tokens")
    return np.stack(rows)


def gather_visible(seq: Tensor, plan) -> Tensor:
    """Keep the visible rows of ``seq`` in their original relative order.

    ``seq`` is (L, D) with a single plan or (B, L, D) with one plan per row.
    """
    if seq.ndim == 2:
        if not isinstance(plan, MaskPlan):
            raise TypeError("a 2-D sequence takes a single MaskPlan")
        if seq.shape[0] != plan.seq_len:
            raise ValueError(f"sequence length {seq.shape[0]} != plan length {plan.seq_len}")
        return take(seq, plan.visible_idx, axis=0)
    plans = _as_plans(plan)
    if len(plans) != seq.shape[0]:
        raise ValueError(f"{len(plans)} plans for a batch of {seq.shape[0]}")
    for p in plans:
        if p.seq_len != seq.shape[1]:
            raise ValueError(f"sequence length {seq.shape[1]} != plan length {p.seq_len}")
    return take_along(seq, _stacked(plans, "visible_idx"), unique=True)


def gather_masked(seq: Tensor, plan) -> Tensor:
    if seq.ndim == 2:
        return take(seq, plan.masked_idx, axis=0)
    return take_along(seq, _stacked(_as_plans(plan), "masked_idx"), unique=True)


def restore_full(encoded_visible: Tensor, plan, mask_vec: Tensor) -> Tensor:
    """Put visible rows back at their positions and fill the rest with ``mask_vec``."""
    if encoded_visible.ndim == 2:
        if encoded_visible.shape[0] != plan.n_visible:
            raise ValueError(f"{encoded_visible.shape[0]} rows for {plan.n_visible} visible positions")
        fill = broadcast_rows(mask_vec, (plan.n_masked,))
        return take(concat([encoded_visible, fill], axis=0), plan.restore_perm, axis=0)
    plans = _as_plans(plan)
    n_vis = plans[0].n_visible
    if encoded_visible.shape[1] != n_vis or len(plans) != encoded_visible.shape[0]:
        raise ValueError(f"encoded shape {encoded_visible.shape} does not match the plans")
    fill = broadcast_rows(mask_vec, (len(plans), plans[0].n_masked))
    full = concat([encoded_visible, fill], axis=1)
    return take_along(full, _stacked(plans, "restore_perm"), unique=True)
