"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

STEP = {np.dtype(np.float32): 4e-3, np.dtype(np.float64): 1e-4}


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    n_coords: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol)

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e} coords={self.n_coords}"


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float | None = None,
) -> GradCheckReport:
    """Compare backward gradients of scalar ``f(*inputs)`` with central differences.

    The error for one input is ``max|analytic - numeric| / max(|analytic|_inf,
    |numeric|_inf, floor)``; the report holds the worst input.  ``max_coords``
    samples that many coordinates per input instead of all of them, while the
    analytic norm still covers the full tensor.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    rng = np.random.default_rng(seed)
    errors = []
    total = 0
    for t, ga in zip(inputs, analytic):
        h = STEP.get(t.data.dtype, 1e-3)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num = np.zeros(len(coords))
        with no_grad():
            for j, c in enumerate(coords):
                orig = flat[c]
                vals = []
                for k in (2, 1, -1, -2):
                    flat[c] = orig + k * h
                    vals.append(float(f(*inputs).data))
                flat[c] = orig
                # five-point central stencil, truncation error O(h^4)
                num[j] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        ana = ga.reshape(-1)[coords]
        lim = floor if floor is not None else (1e-6 if t.data.dtype == np.float32 else 1e-10)
        # norm-wise: sampled coordinates are scaled by the whole analytic gradient
        scale = max(np.abs(ga).max(initial=0.0), np.abs(num).max(initial=0.0), lim)
        errors.append(float(np.abs(ana - num).max(initial=0.0) / scale))
        total += len(coords)
    for t in inputs:
        t.grad = None
    return GradCheckReport(max(errors, default=0.0), tol, errors, total)


# ---------------------------------------------------------------------------
# standard suites

Case = tuple[str, Callable[..., Tensor], list[Tensor]]


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # a random linear read-out keeps every output coordinate in play
    from . import tensor as T
    w = T.Tensor(rng.standard_normal(out.shape))
    return T.tsum(out * w)


def op_cases(seed: int = 0) -> list[Case]:
    """One scalar test function per differentiable op, on random inputs."""
    from . import tensor as T
    rng = np.random.default_rng(seed)

    def t(*shape, positive=False, scale=1.0):
        x = rng.standard_normal(shape) * scale
        return T.Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)

    ro = np.random.default_rng(seed + 1)
    r = lambda out: _weighted(out, np.random.default_rng(out.data.size + seed))  # noqa: E731
    labels = ro.integers(0, 5, size=4)
    ids = ro.integers(0, 6, size=(2, 3))
    picks = np.stack([ro.permutation(5)[:3] for _ in range(2)])
    bce_y = ro.integers(0, 2, size=6).astype(float)
    cases: list[Case] = [
        ("add", lambda a, b: r(a + b), [t(3, 4), t(4)]),
        ("sub", lambda a, b: r(a - b), [t(3, 4), t(3, 4)]),
        ("mul", lambda a, b: r(a * b), [t(3, 4), t(3, 4)]),
        ("div", lambda a, b: r(a / b), [t(3, 4), t(3, 4, positive=True)]),
        ("exp", lambda a: r(T.exp(a)), [t(3, 4, scale=0.5)]),
        ("log", lambda a: r(T.log(a)), [t(3, 4, positive=True)]),
        ("tanh", lambda a: r(T.tanh(a)), [t(3, 4)]),
        ("gelu", lambda a: r(T.gelu(a)), [t(3, 5)]),
        ("matmul", lambda a, b: r(T.matmul(a, b)), [t(3, 4), t(4, 2)]),
        ("matmul_batched", lambda a, b: r(T.matmul(a, b)), [t(2, 3, 4), t(2, 4, 3)]),
        ("linear", lambda x, w, b: r(T.linear(x, w, b)), [t(2, 3, 4), t(4, 5), t(5)]),
        ("softmax", lambda a: r(T.softmax(a, -1)), [t(3, 5)]),
        ("log_softmax", lambda a: r(T.log_softmax(a, -1)), [t(3, 5)]),
        ("layer_norm", lambda x, g, b: r(T.layer_norm(x, g, b)), [t(2, 8), t(8), t(8)]),
        ("l2_normalize", lambda a: r(T.l2_normalize(a)), [t(3, 4)]),
        ("cross_entropy", lambda a: T.cross_entropy(a, labels), [t(4, 5)]),
        ("mse", lambda a, b: T.mse(a, b), [t(3, 4), t(3, 4)]),
        ("bce_with_logits", lambda a: T.bce_with_logits(a, bce_y), [t(6)]),
        ("sum_mean", lambda a: r(T.tsum(a, axis=1)) + T.tmean(a * a), [t(3, 4)]),
        ("reshape_transpose", lambda a: r(T.transpose(T.reshape(a, (4, 3)), (1, 0))), [t(3, 4)]),
        ("getitem", lambda a: r(a[:, 1:3]) + r(a[0]), [t(3, 4)]),
        ("take_along", lambda a: r(T.take_along(a, picks, unique=True)), [t(2, 5, 3)]),
        ("embedding", lambda e: r(T.embedding(e, ids)), [t(6, 4)]),
        ("concat", lambda a, b: r(T.concat([a, b], axis=1)), [t(2, 3), t(2, 2)]),
        ("broadcast_rows", lambda v: r(T.broadcast_rows(v, (2, 3))), [t(4)]),
    ]
    return cases


def _tiny_model():
    from .model import MoMoModel, ModelConfig
    cfg = ModelConfig(enc_layers=1, enc_dim=16, enc_heads=2, dec_layers=1, dec_dim=8, dec_heads=2,
                      patch_size=4, image_size=8, vocab_size=18, max_text_pos=8, contrastive_dim=8)
    model = MoMoModel(cfg, seed=3)
    for dec_id, kind in (("image", "image"), ("text", "text"), ("joint", "joint")):
        model.add_decoder(dec_id, kind, seed=3)
    return model


def loss_path_cases(seed: int = 0) -> list[Case]:
    """End-to-end checks through a one-block model for every training loss."""
    from . import losses as L
    from .masking import JointMaskPlan, MaskPlan
    from .model import pixel_targets

    model = _tiny_model()
    rng = np.random.default_rng(seed)
    pixels = rng.random((3, 8, 8, 3)).astype(model.token_embed.dtype)
    ids = np.array([[1, 4, 5, 6, 7, 8], [1, 4, 9, 10, 7, 11], [1, 4, 12, 13, 7, 14]])
    target = pixel_targets(pixels, 4)
    iplans = [MaskPlan.from_masked(4, m) for m in ([1, 3], [0, 2], [2, 3])]
    tplans = [MaskPlan.from_masked(5, m) for m in ([1, 4], [0, 2], [3, 4])]
    jplans = [JointMaskPlan(i, t) for i, t in zip(iplans, tplans)]
    neg_txt, neg_img = np.array([1, 2, 0]), np.array([2, 0, 1])
    labels = np.concatenate([np.ones(3), np.zeros(6)])
    enc = model.encoder.blocks[0]

    def params(*tensors):
        return list(tensors)

    def mim():
        return L.mim_loss(model.forward_mim(pixels, iplans, "image")["pixels"], target, iplans)

    def mlm():
        return L.mlm_loss(model.forward_mlm(ids, tplans, "text")["logits"], ids[:, 1:], tplans)

    def cmm():
        return L.cmm_loss(model.forward_cmm(pixels, ids, jplans, "joint"), target, ids[:, 1:], jplans)[0]

    def gc():
        return L.global_contrastive_loss(L.ContrastiveBatchOutput(model.image_vectors(pixels),
                                                                  model.text_vectors(ids), model.tau))

    def itm():
        all_pix = np.concatenate([pixels, pixels, pixels[neg_img]])
        all_ids = np.concatenate([ids, ids[neg_txt], ids])
        return L.balanced_bce(model.itm_score(model.encode_joint(all_pix, all_ids)), labels)

    dec_i, dec_t, dec_j = model.decoders["image"], model.decoders["text"], model.decoders["joint"]
    return [
        ("mim_path", lambda *_: mim(), params(model.patch_embed.weight, enc.attn.qkv.weight, model.mask_token,
                                              dec_i.pixel_head.weight)),
        ("mlm_path", lambda *_: mlm(), params(model.token_embed, enc.mlp.fc1.weight, dec_t.text_transform.weight,
                                              dec_t.text_bias)),
        ("cmm_path", lambda *_: cmm(), params(model.cls_token, enc.attn.proj.weight, dec_j.body.blocks[0].attn.qkv.weight,
                                              model.type_embed)),
        ("gc_path", lambda *_: gc(), params(model.image_proj, model.text_proj, model.tau, enc.norm1.weight)),
        ("itm_path", lambda *_: itm(), params(model.itm_fc1.weight, model.itm_fc2.weight, enc.mlp.fc2.weight,
                                              model.image_pos)),
    ]


def run_suite(f64: bool = False, max_coords: int = 24, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Per-op checks (1e-3 in f32, 1e-5 in f64) then loss paths (1e-2 in f32, 1e-5 in f64)."""
    from .tensor import precision
    out = []
    with precision("f64" if f64 else "f32"):
        op_tol = 1e-5 if f64 else 1e-3
        for name, f, inputs in op_cases(seed):
            out.append((name, grad_check(f, inputs, op_tol)))
        path_tol = 1e-5 if f64 else 1e-2
        for name, f, inputs in loss_path_cases(seed):
            out.append((name, grad_check(f, inputs, path_tol, max_coords=max_coords, seed=seed)))
    return out
