"""Shared-encoder multimodal transformer.

One encoder parameter set consumes image-only, text-only and concatenated
image+text sequences.  Masked positions never reach the encoder; they are
filled with a learned mask vector before a stage-specific shallow decoder
reconstructs pixels and/or token ids.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .masking import JointMaskPlan, MaskPlan, gather_visible, restore_full
from .nn import LINEAR_INITS, LayerNorm, Linear, Module, Transformer, sincos_table, trunc_normal
from .tensor import Tensor, parameter

IMAGE, TEXT = 0, 1
DECODER_KINDS = ("image", "text", "joint", "shared")


@dataclass
class ModelConfig:
    enc_layers: int = 4
    enc_dim: int = 64
    enc_heads: int = 4
    dec_layers: int = 2
    dec_dim: int = 32
    dec_heads: int = 4
    patch_size: int = 4
    image_size: int = 32
    channels: int = 3
    vocab_size: int = 32
    max_text_pos: int = 16
    contrastive_dim: int = 32
    temperature_init: float = 0.07
    mlp_ratio: int = 4
    dropout: float = 0.0
    norm_pix_loss: bool = True
    sincos_pos: bool = False
    ln_eps: float = 1e-6
    linear_init: str = "xavier"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ConfigError("model dims must be divisible by their head counts")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must leave room beyond the 4 reserved ids")
        if self.max_text_pos < 2:
            raise ConfigError("max_text_pos must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.linear_init not in LINEAR_INITS:
            raise ConfigError(f"linear_init must be one of {LINEAR_INITS}, got {self.linear_init!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def max_img_pos(self) -> int:
        return self.n_patches

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, p*p*C), patches in row-major grid order."""
    b, h, w, c = images.shape
    gh, gw = h // p, w // p
    x = images.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, p * p * c)


def unpatchify(patches: np.ndarray, p: int, channels: int = 3) -> np.ndarray:
    b, n, _ = patches.shape
    g = int(round(np.sqrt(n)))
    x = patches.reshape(b, g, g, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * p, g * p, channels)


def pixel_targets(images: np.ndarray, p: int, normalize: bool = True) -> np.ndarray:
    target = patchify(images, p)
    if normalize:
        mean = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mean) / np.sqrt(var + 1e-6)
    return target


class Decoder(Module):
    """Shallow transformer decoder with a pixel head and/or a tied LM head."""

    def __init__(self, cfg: ModelConfig, kind: str, rng: np.random.Generator):
        if kind not in DECODER_KINDS:
            raise ConfigError(f"unknown decoder kind {kind!r}")
        self.kind = kind
        self.has_pixels = kind in ("image", "joint", "shared")
        self.has_text = kind in ("text", "joint", "shared")
        if kind == "image":
            max_len = cfg.n_patches + 1
        elif kind == "text":
            max_len = cfg.max_text_pos
        elif kind == "joint":
            max_len = cfg.n_patches + cfg.max_text_pos
        else:
            max_len = max(cfg.n_patches + 1, cfg.max_text_pos)
        init = cfg.linear_init
        self.embed = Linear(cfg.enc_dim, cfg.dec_dim, rng, init=init)
        self.pos = parameter(trunc_normal(rng, (max_len, cfg.dec_dim)))
        self.body = Transformer(cfg.dec_layers, cfg.dec_dim, cfg.dec_heads, rng, cfg.mlp_ratio, cfg.ln_eps, init=init)
        if self.has_pixels:
            self.pixel_head = Linear(cfg.dec_dim, cfg.patch_dim, rng, init=init)
        if self.has_text:
            self.text_transform = Linear(cfg.dec_dim, cfg.enc_dim, rng, init=init)
            self.text_norm = LayerNorm(cfg.enc_dim, cfg.ln_eps)
            self.text_bias = parameter(np.zeros(cfg.vocab_size))

    def lm_logits(self, h: Tensor, token_table: Tensor) -> Tensor:
        x = self.text_norm(T.gelu(self.text_transform(h)))
        return T.matmul(x, T.transpose(token_table, (1, 0))) + self.text_bias

    def __call__(self, restored: Tensor, token_table: Tensor, modality: str, n_image: int = 0,
                 record: list | None = None) -> dict[str, Tensor]:
        n = restored.shape[1]
        if n > self.pos.shape[0]:
            raise ValueError(f"decoder sequence of {n} exceeds {self.pos.shape[0]} positions")
        x = self.embed(restored) + self.pos[:n]
        h = self.body(x, record)
        out: dict[str, Tensor] = {}
        if modality == "image":
            out["pixels"] = self.pixel_head(h[:, 1:])
        elif modality == "text":
            out["logits"] = self.lm_logits(h[:, 1:], token_table)
        elif modality == "joint":
            out["pixels"] = self.pixel_head(h[:, 1:1 + n_image])
            out["logits"] = self.lm_logits(h[:, 1 + n_image:], token_table)
        else:
            raise ValueError(f"unknown modality {modality!r}")
        return out


class MoMoModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0])
        d = cfg.enc_dim
        self.token_embed = parameter(trunc_normal(rng, (cfg.vocab_size, d)))
        init = cfg.linear_init
        self.patch_embed = Linear(cfg.patch_dim, d, rng, init=init)
        if cfg.sincos_pos:
            self.text_pos = T.Tensor(sincos_table(cfg.max_text_pos, d))
            self.image_pos = T.Tensor(sincos_table(cfg.n_patches, d))
        else:
            self.text_pos = parameter(trunc_normal(rng, (cfg.max_text_pos, d)))
            self.image_pos = parameter(trunc_normal(rng, (cfg.n_patches, d)))
        self.type_embed = parameter(trunc_normal(rng, (2, d)))
        self.cls_token = parameter(trunc_normal(rng, (d,)))
        self.mask_token = parameter(trunc_normal(rng, (d,)))
        self.encoder = Transformer(cfg.enc_layers, d, cfg.enc_heads, rng, cfg.mlp_ratio, cfg.ln_eps, cfg.dropout,
                                   init)
        self.image_proj = parameter(trunc_normal(rng, (d, cfg.contrastive_dim)))
        self.text_proj = parameter(trunc_normal(rng, (d, cfg.contrastive_dim)))
        self.itm_fc1 = Linear(d, d, rng, init=init)
        self.itm_fc2 = Linear(d, 1, rng, init=init)
        self.tau = parameter(np.asarray(cfg.temperature_init))
        self.decoders: dict[str, Decoder] = {}
        self.dropout_rng: np.random.Generator | None = None
        self.visible_calls: list[int] = []

    # -- bookkeeping ---------------------------------------------------
    def add_decoder(self, decoder_id: str, kind: str, seed: int = 0) -> Decoder:
        dec = Decoder(self.cfg, kind, np.random.default_rng([seed, 1, zlib.crc32(decoder_id.encode())]))
        self.decoders[decoder_id] = dec
        return dec

    def drop_decoders(self) -> None:
        self.decoders = {}

    def decoder(self, decoder_id: str) -> Decoder:
        try:
            return self.decoders[decoder_id]
        except KeyError:
            raise KeyError(f"decoder {decoder_id!r} is not registered (have {sorted(self.decoders)})") from None

    def no_decay_names(self) -> set[str]:
        names = set()
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if p.ndim < 2 or leaf in ("pos", "token_embed", "text_pos", "image_pos", "type_embed"):
                names.add(name)
        return names

    def lm_head_weight(self) -> Tensor:
        """Output matrix of every LM head; it is the token embedding table itself."""
        return self.token_embed

    def encoder_parameters(self) -> list[Tensor]:
        return self.encoder.parameters()

    def clamp_temperature(self) -> None:
        np.clip(self.tau.data, 0.01, 1.0, out=self.tau.data)

    # -- embeddings ----------------------------------------------------
    def embed_image(self, pixels: np.ndarray) -> Tensor:
        cfg = self.cfg
        if pixels.ndim == 3:
            pixels = pixels[None]
        if pixels.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ValueError(f"image shape {pixels.shape[1:]} does not match the model config")
        patches = T.Tensor(patchify(pixels, cfg.patch_size))
        return self.patch_embed(patches) + self.image_pos + self.type_embed[IMAGE]

    def embed_text(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        n = ids.shape[1]
        if n > self.cfg.max_text_pos:
            raise ValueError(f"text of {n} tokens exceeds max_text_pos={self.cfg.max_text_pos}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")
        return T.embedding(self.token_embed, ids) + self.text_pos[:n] + self.type_embed[TEXT]

    def _global(self, batch: int) -> Tensor:
        return T.broadcast_rows(self.cls_token, (batch, 1))

    def encode(self, tokens: Tensor, record: list | None = None) -> Tensor:
        if tokens.shape[-2] < 1:
            raise ValueError("encoder needs at least one token")
        self.visible_calls.append(tokens.shape[-2])
        del self.visible_calls[:-64]
        return self.encoder(tokens, record, self.dropout_rng)

    def _check_visible(self, seq: Tensor, n_visible: int) -> None:
        assert seq.shape[1] == n_visible + 1, (
            f"encoder got {seq.shape[1]} rows, expected {n_visible} visible + 1 global")

    # -- masked reconstruction paths -----------------------------------
    def forward_mim(self, pixels: np.ndarray, plans: list[MaskPlan], decoder_id: str) -> dict[str, Tensor]:
        x = self.embed_image(pixels)
        b = x.shape[0]
        seq = T.concat([self._global(b), gather_visible(x, plans)], axis=1)
        self._check_visible(seq, plans[0].n_visible)
        h = self.encode(seq)
        restored = T.concat([h[:, :1], restore_full(h[:, 1:], plans, self.mask_token)], axis=1)
        return self.decoder(decoder_id)(restored, self.lm_head_weight(), "image")

    def forward_mlm(self, ids: np.ndarray, plans: list[MaskPlan], decoder_id: str) -> dict[str, Tensor]:
        x = self.embed_text(ids)
        seq = T.concat([x[:, :1], gather_visible(x[:, 1:], plans)], axis=1)
        self._check_visible(seq, plans[0].n_visible)
        h = self.encode(seq)
        restored = T.concat([h[:, :1], restore_full(h[:, 1:], plans, self.mask_token)], axis=1)
        return self.decoder(decoder_id)(restored, self.lm_head_weight(), "text")

    def forward_cmm(self, pixels: np.ndarray, ids: np.ndarray, plans: list[JointMaskPlan], decoder_id: str,
                    record: list | None = None, dec_record: list | None = None) -> dict[str, Tensor]:
        img = self.embed_image(pixels)
        txt = self.embed_text(ids)[:, 1:]
        b = img.shape[0]
        iplans = [p.image_plan for p in plans]
        tplans = [p.text_plan for p in plans]
        vis_i = gather_visible(img, iplans)
        vis_t = gather_visible(txt, tplans)
        seq = T.concat([self._global(b), vis_i, vis_t], axis=1)
        self._check_visible(seq, plans[0].visible_len - 1)
        h = self.encode(seq, record)
        nvi = vis_i.shape[1]
        restored = T.concat([
            h[:, :1],
            restore_full(h[:, 1:1 + nvi], iplans, self.mask_token),
            restore_full(h[:, 1 + nvi:], tplans, self.mask_token),
        ], axis=1)
        return self.decoder(decoder_id)(restored, self.lm_head_weight(), "joint", n_image=img.shape[1], record=dec_record)

    # -- unmasked paths ------------------------------------------------
    def encode_image(self, pixels: np.ndarray, record: list | None = None) -> Tensor:
        x = self.embed_image(pixels)
        return self.encode(T.concat([self._global(x.shape[0]), x], axis=1), record)

    def encode_text(self, ids: np.ndarray, record: list | None = None) -> Tensor:
        return self.encode(self.embed_text(ids), record)

    def encode_joint(self, pixels: np.ndarray, ids: np.ndarray, record: list | None = None) -> Tensor:
        img = self.embed_image(pixels)
        txt = self.embed_text(ids)[:, 1:]
        return self.encode(T.concat([self._global(img.shape[0]), img, txt], axis=1), record)

    def project_contrastive(self, cls_hidden: Tensor, modality: str) -> Tensor:
        if modality == "image":
            w = self.image_proj
        elif modality == "text":
            w = self.text_proj
        else:
            raise ValueError(f"unknown modality {modality!r}")
        return T.l2_normalize(T.matmul(cls_hidden, w))

    def image_vectors(self, pixels: np.ndarray) -> Tensor:
        return self.project_contrastive(self.encode_image(pixels)[:, 0], "image")

    def text_vectors(self, ids: np.ndarray) -> Tensor:
        return self.project_contrastive(self.encode_text(ids)[:, 0], "text")

    def itm_score(self, joint_hidden: Tensor) -> Tensor:
        """One matching logit per sequence, read from the leading global token."""
        if joint_hidden.shape[-2] < 1:
            raise ValueError("empty joint sequence")
        g = joint_hidden[:, 0]
        return self.itm_fc2(T.gelu(self.itm_fc1(g)))[:, 0]

    # -- state ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing tensors in state: {sorted(missing)[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} vs {p.shape}")
                p.data[...] = arr

    def decoder_kinds(self) -> dict[str, str]:
        return {k: d.kind for k, d in self.decoders.items()}
