"""Stage-wise pretraining: stage configs, cross-modality gradient accumulation,
the epoch loop with checkpoints and per-step metrics, and stage transitions."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .data import Loader, TrainData, collate_images, collate_pairs, collate_texts
from .errors import ConfigError, TrainingError
from .losses import ContrastiveBatchOutput, cmm_loss, global_contrastive_loss, itm_loss, mim_loss, mlm_loss
from .masking import joint_plan, sample_masks
from .model import MoMoModel, ModelConfig, pixel_targets
from .optim import Optimizer, Schedule, clip_grad_norm, lr_at, make_optimizer

METRIC_COLUMNS = ("step", "stage", "lr", "loss_total", "loss_mim", "loss_mlm", "loss_cmm", "loss_gc",
                  "loss_itm", "grad_norm", "wall_ms")
LOSS_NAMES = ("mim", "mlm", "cmm", "gc", "itm")

# stream tags keep loader shuffles and per-step draws independent
_TAGS = {"image": 1, "text": 2, "pair": 3}


@dataclass
class StageConfig:
    stage: int
    epochs: int
    batch_size: int = 64
    base_lr: float = 1e-4
    warmup_epochs: int = 0
    mask_ratio_image: float = 0.75
    mask_ratio_text: float = 0.15
    cmm_ratio_image: float = 0.75
    cmm_ratio_text: float = 0.75
    loss_weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_NAMES})
    cmm_lambda: float = 1.0
    simultaneous: bool = True
    cmga: bool = True
    shared_decoder: bool = False
    combined_stages23: bool = False
    repetition: int = 1
    optimizer: str = "adamw"
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    grad_clip: float | None = 1.0
    augment: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.loss_weights = {**{k: 1.0 for k in LOSS_NAMES}, **dict(self.loss_weights)}
        self.validate()

    def validate(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.warmup_epochs < 0 or (self.warmup_epochs and self.warmup_epochs >= self.epochs):
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("mask_ratio_image", "mask_ratio_text", "cmm_ratio_image", "cmm_ratio_text"):
            r = getattr(self, name)
            if not 0.0 < r < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {r}")
        if self.repetition < 1:
            raise ConfigError("repetition must be >= 1")
        unknown = set(self.loss_weights) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown loss weights {sorted(unknown)}")
        if self.combined_stages23 and self.stage != 3:
            raise ConfigError("combined_stages23 is a stage-3 toggle")
        if self.shared_decoder and self.stage != 2:
            raise ConfigError("shared_decoder is a stage-2 toggle")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown stage config keys: {sorted(unknown)}")
        if "stage" not in d or "epochs" not in d:
            raise ConfigError("stage config needs 'stage' and 'epochs'")
        return cls(**d)


def full_scale_stage_config(stage: int) -> StageConfig:
    """Full-scale schedule of each stage; desk runs override epochs and LR."""
    if stage == 1:
        return StageConfig(1, epochs=1600, batch_size=64, base_lr=1.5e-4, warmup_epochs=40)
    if stage == 2:
        return StageConfig(2, epochs=100, batch_size=64, base_lr=5e-5, warmup_epochs=10, repetition=5)
    if stage == 3:
        return StageConfig(3, epochs=100, batch_size=64, base_lr=1e-4, warmup_epochs=10)
    raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")


def stage_decoders(cfg: StageConfig) -> dict[str, str]:
    """Decoder ids and kinds a stage trains with."""
    if cfg.stage == 1:
        return {"s1_image": "image"}
    if cfg.stage == 2:
        return {"s2_shared": "shared"} if cfg.shared_decoder else {"s2_image": "image", "s2_text": "text"}
    if cfg.combined_stages23:
        return {"s23_image": "image", "s23_text": "text", "s23_joint": "joint"}
    return {"s3_text": "text", "s3_joint": "joint"}


def stage_streams(cfg: StageConfig) -> list[str]:
    """Modality streams consumed per step, in forward order."""
    if cfg.stage == 1:
        return ["image"]
    if cfg.stage == 2:
        return ["image", "text"] if cfg.simultaneous else ["text"]
    if cfg.combined_stages23:
        return ["image", "text", "pair"]
    return ["text", "pair"] if cfg.simultaneous else ["pair"]


def config_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# per-modality loss terms

LossTerm = Callable[[], tuple[T.Tensor, dict[str, float]]]


def _decoder_for(cfg: StageConfig, modality: str) -> str:
    ids = stage_decoders(cfg)
    if "s2_shared" in ids:
        return "s2_shared"
    for dec_id, kind in ids.items():
        if (modality, kind) in (("image", "image"), ("text", "text"), ("pair", "joint")):
            return dec_id
    raise ConfigError(f"stage {cfg.stage} has no decoder for the {modality} stream")


def image_term(model: MoMoModel, cfg: StageConfig, pixels: np.ndarray, rng: np.random.Generator) -> LossTerm:
    def run():
        mc = model.cfg
        plans = sample_masks(pixels.shape[0], mc.n_patches, cfg.mask_ratio_image, rng)
        out = model.forward_mim(pixels, plans, _decoder_for(cfg, "image"))
        loss = mim_loss(out["pixels"], pixel_targets(pixels, mc.patch_size, mc.norm_pix_loss), plans)
        return loss * cfg.loss_weights["mim"], {"mim": float(loss.data)}
    return run


def text_term(model: MoMoModel, cfg: StageConfig, ids: np.ndarray, rng: np.random.Generator) -> LossTerm:
    def run():
        plans = sample_masks(ids.shape[0], ids.shape[1] - 1, cfg.mask_ratio_text, rng)
        out = model.forward_mlm(ids, plans, _decoder_for(cfg, "text"))
        loss = mlm_loss(out["logits"], ids[:, 1:], plans)
        return loss * cfg.loss_weights["mlm"], {"mlm": float(loss.data)}
    return run


def pair_term(model: MoMoModel, cfg: StageConfig, pixels: np.ndarray, ids: np.ndarray,
              rng: np.random.Generator) -> LossTerm:
    """Cross-modal masking + global contrast + matching on one paired batch."""
    def run():
        mc = model.cfg
        w = cfg.loss_weights
        plans = [joint_plan(mc.n_patches, ids.shape[1] - 1, rng, cfg.cmm_ratio_image, cfg.cmm_ratio_text)
                 for _ in range(pixels.shape[0])]
        out = model.forward_cmm(pixels, ids, plans, _decoder_for(cfg, "pair"))
        cmm, _, _ = cmm_loss(out, pixel_targets(pixels, mc.patch_size, mc.norm_pix_loss), ids[:, 1:], plans,
                             cfg.cmm_lambda)
        batch = ContrastiveBatchOutput(model.image_vectors(pixels), model.text_vectors(ids), model.tau)
        gc = global_contrastive_loss(batch)
        itm = itm_loss(model, pixels, ids, batch.similarity(), rng)
        total = cmm * w["cmm"] + gc * w["gc"] + itm * w["itm"]
        return total, {"cmm": float(cmm.data), "gc": float(gc.data), "itm": float(itm.data)}
    return run


# ---------------------------------------------------------------------------
# update rules

def _checked(term: LossTerm, step: int, modality: str) -> tuple[T.Tensor, dict[str, float]]:
    total, parts = term()
    for name, value in {**parts, "total": float(total.data)}.items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} loss ({value}) at step {step} on the {modality} stream")
    return total, parts


def _after_update(model) -> None:
    clamp = getattr(model, "clamp_temperature", None)
    if clamp is not None:
        clamp()


def cmga_step(model, optimizer: Optimizer, terms: Sequence[tuple[str, LossTerm]],
              grad_clip: float | None = None, step: int = 0) -> dict:
    """Backward every stream onto shared gradient buffers, then apply one update."""
    optimizer.zero_grad()
    parts: dict[str, float] = {}
    total = 0.0
    for modality, term in terms:
        loss, p = _checked(term, step, modality)
        loss.backward()
        parts.update(p)
        total += float(loss.data)
    norm = clip_grad_norm(optimizer.params, grad_clip)
    optimizer.step()
    _after_update(model)
    return {"loss_total": total, "grad_norm": norm, **parts}


def sequential_step(model, optimizer: Optimizer, terms: Sequence[tuple[str, LossTerm]],
                    grad_clip: float | None = None, step: int = 0) -> dict:
    """One update per stream (the accumulation-off ablation)."""
    parts: dict[str, float] = {}
    total = 0.0
    norm = 0.0
    for modality, term in terms:
        optimizer.zero_grad()
        loss, p = _checked(term, step, modality)
        loss.backward()
        norm = clip_grad_norm(optimizer.params, grad_clip)
        optimizer.step()
        _after_update(model)
        parts.update(p)
        total += float(loss.data)
    return {"loss_total": total, "grad_norm": norm, **parts}


# ---------------------------------------------------------------------------
# epoch iteration

def _loaders(cfg: StageConfig, data: TrainData, seed: int) -> dict[str, Loader]:
    sources = {"image": data.images, "text": data.texts, "pair": data.pairs}
    return {m: Loader(sources[m], cfg.batch_size, seed=seed, tag=_TAGS[m] + 10 * cfg.stage)
            for m in stage_streams(cfg)}


def _repeated(loader: Loader, epoch: int, rep: int):
    for p in range(rep):
        yield from loader.batches(epoch, p)


def _stream_reps(cfg: StageConfig) -> dict[str, int]:
    # the repetition factor applies to the image stream in stage 2 and to the
    # paired stream in stage 3 (images in the combined variant)
    streams = stage_streams(cfg)
    target = "image" if "image" in streams and len(streams) > 1 else "pair"
    return {m: (cfg.repetition if m == target else 1) for m in streams}


def steps_per_epoch(cfg: StageConfig, data: TrainData, seed: int = 0) -> int:
    loaders = _loaders(cfg, data, seed)
    reps = _stream_reps(cfg)
    return min(len(l) * reps[m] for m, l in loaders.items())


def epoch_batches(cfg: StageConfig, data: TrainData, seed: int, epoch: int):
    """Yield dicts {modality: list of samples}; ends with the shortest stream."""
    loaders = _loaders(cfg, data, seed)
    reps = _stream_reps(cfg)
    names = list(loaders)
    streams = [_repeated(loaders[m], epoch, reps[m]) for m in names]
    for items in zip(*streams):
        yield dict(zip(names, items))


def step_rng(seed: int, stage: int, step: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, step, tag])


def build_terms(model: MoMoModel, cfg: StageConfig, batch: dict, seed: int, step: int) -> list[tuple[str, LossTerm]]:
    terms = []
    for modality in stage_streams(cfg):
        rng = step_rng(seed, cfg.stage, step, _TAGS[modality])
        aug = rng if cfg.augment else None
        items = batch[modality]
        if modality == "image":
            terms.append((modality, image_term(model, cfg, collate_images(items, aug).pixels, rng)))
        elif modality == "text":
            terms.append((modality, text_term(model, cfg, collate_texts(items).ids, rng)))
        else:
            b = collate_pairs(items, aug)
            terms.append((modality, pair_term(model, cfg, b.pixels, b.ids, rng)))
    return terms


# ---------------------------------------------------------------------------
# checkpoints and metrics

def ensure_decoders(model: MoMoModel, cfg: StageConfig, seed: int = 0) -> None:
    for dec_id, kind in stage_decoders(cfg).items():
        if dec_id not in model.decoders:
            model.add_decoder(dec_id, kind, seed)


def model_from_checkpoint(ckpt: Checkpoint) -> MoMoModel:
    model = MoMoModel(ModelConfig.from_dict(ckpt.header["model_config"]))
    for dec_id, kind in ckpt.header["decoders"].items():
        model.add_decoder(dec_id, kind)
    model.load_state_dict(ckpt.subset("model/"))
    return model


def save_training_state(path, model: MoMoModel, optimizer: Optimizer | None, cfg: StageConfig,
                        step: int, epoch: int, run_hash: str, extra: dict | None = None) -> Path:
    header = {
        "format": 1,
        "stage": cfg.stage,
        "step": step,
        "epoch": epoch,
        "config_hash": run_hash,
        "model_config": model.cfg.to_dict(),
        "stage_config": cfg.to_dict(),
        "decoders": model.decoder_kinds(),
        "optimizer": {"name": cfg.optimizer, "step_count": optimizer.step_count if optimizer else 0},
        **(extra or {}),
    }
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update({f"optim/{k}": v for k, v in optimizer.state_dict().items()})
    return write_checkpoint(path, header, tensors)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return path


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        row = {}
        for k, v in r.items():
            if v == "":
                row[k] = None
            elif k in ("step", "stage"):
                row[k] = int(v)
            else:
                row[k] = float(v)
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# stage runner

def check_data_fits(mc: ModelConfig, data: TrainData) -> None:
    if len(data.vocab) > mc.vocab_size:
        raise ConfigError(f"vocabulary of {len(data.vocab)} tokens exceeds vocab_size={mc.vocab_size}")
    longest = max(len(s.ids) for s in list(data.texts) + [p.caption for p in data.pairs])
    if longest > mc.max_text_pos:
        raise ConfigError(f"captions of {longest} tokens exceed max_text_pos={mc.max_text_pos}")
    size = data.pairs[0].image.pixels.shape[0]
    if size != mc.image_size:
        raise ConfigError(f"images are {size}px but the model expects {mc.image_size}px")


@dataclass
class StageResult:
    model: MoMoModel
    optimizer: Optimizer
    metrics: list[dict]
    step: int
    checkpoint_path: Path | None = None


def run_stage(cfg: StageConfig, model: MoMoModel, data: TrainData, *, seed: int = 0, out_dir=None,
              resume=None, run_hash: str | None = None, stop_after_epochs: int | None = None,
              max_steps: int | None = None, callback: Callable[[int, dict], bool] | None = None) -> StageResult:
    """Train one stage.

    Checkpoints (``stage{k}_last.momo`` each epoch, ``stage{k}.momo`` at the
    end) and ``stage{k}_metrics.csv`` go to ``out_dir`` when given.  Training
    stops early after ``stop_after_epochs`` epochs, ``max_steps`` steps, or
    when ``callback(step, row)`` returns True.
    """
    cfg.validate()
    if run_hash is None:
        run_hash = config_hash(model.cfg.to_dict(), cfg.to_dict(), seed)
    ensure_decoders(model, cfg, seed)
    check_data_fits(model.cfg, data)
    optimizer = make_optimizer(cfg.optimizer, model, cfg.betas, cfg.weight_decay)
    per_epoch = steps_per_epoch(cfg, data, seed)
    if per_epoch < 1:
        raise ConfigError("a stage epoch has no steps; check dataset sizes against batch_size")
    schedule = Schedule(cfg.base_lr, cfg.warmup_epochs * per_epoch, cfg.epochs * per_epoch)
    out = Path(out_dir) if out_dir is not None else None

    step, start_epoch, metrics = 0, 0, []
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else read_checkpoint(resume)
        if ckpt.header.get("config_hash") != run_hash:
            raise ConfigError(f"checkpoint config hash {ckpt.header.get('config_hash')} != current {run_hash}")
        if ckpt.stage != cfg.stage:
            raise ConfigError(f"checkpoint is from stage {ckpt.stage}, resuming stage {cfg.stage}")
        ensure_decoders(model, cfg, seed)
        model.load_state_dict(ckpt.subset("model/"))
        optimizer.load_state_dict(ckpt.subset("optim/"), ckpt.header["optimizer"]["step_count"])
        step, start_epoch = ckpt.step, ckpt.header["epoch"]
        if out is not None and (out / f"stage{cfg.stage}_metrics.csv").exists():
            metrics = [r for r in read_metrics(out / f"stage{cfg.stage}_metrics.csv") if r["step"] < step]

    update = cmga_step if cfg.cmga else sequential_step
    ckpt_path = None
    stop = False
    for epoch in range(start_epoch, cfg.epochs):
        for batch in epoch_batches(cfg, data, seed, epoch):
            t0 = time.perf_counter()
            optimizer.lr = lr_at(step, schedule)
            model.dropout_rng = step_rng(seed, cfg.stage, step, 99) if model.cfg.dropout > 0 else None
            res = update(model, optimizer, build_terms(model, cfg, batch, seed, step), cfg.grad_clip, step)
            row = {"step": step, "stage": cfg.stage, "lr": optimizer.lr, "loss_total": res["loss_total"],
                   **{f"loss_{k}": res.get(k) for k in LOSS_NAMES}, "grad_norm": res["grad_norm"],
                   "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
            metrics.append(row)
            step += 1
            if (callback is not None and callback(step, row)) or (max_steps is not None and step >= max_steps):
                stop = True
                break
        if out is not None:
            ckpt_path = save_training_state(out / f"stage{cfg.stage}_last.momo", model, optimizer, cfg, step,
                                            epoch + 1, run_hash)
            write_metrics(out / f"stage{cfg.stage}_metrics.csv", metrics)
        if stop or (stop_after_epochs is not None and epoch + 1 - start_epoch >= stop_after_epochs):
            return StageResult(model, optimizer, metrics, step, ckpt_path)
    if out is not None:
        ckpt_path = save_training_state(out / f"stage{cfg.stage}.momo", model, optimizer, cfg, step, cfg.epochs,
                                        run_hash)
    return StageResult(model, optimizer, metrics, step, ckpt_path)


def evaluate_stage_loss(model: MoMoModel, cfg: StageConfig, data: TrainData, seed: int = 0) -> float:
    """Mean total stage loss over one epoch of batches, gradient-free.

    Masks and negatives come from a fixed evaluation stream and augmentation is
    off, so two models are scored on exactly the same draws whatever update
    rule trained them.
    """
    cfg = dataclasses.replace(cfg, augment=False)
    totals = []
    with T.no_grad():
        for i, batch in enumerate(epoch_batches(cfg, data, seed, epoch=0)):
            terms = build_terms(model, cfg, batch, seed + 7919, i)
            totals.append(sum(float(_checked(term, i, m)[0].data) for m, term in terms))
    if not totals:
        raise ConfigError("evaluation epoch has no batches")
    return float(np.mean(totals))


def transition(ckpt: Checkpoint | str | Path, next_cfg: StageConfig, seed: int = 0) -> MoMoModel:
    """Carry encoder, embeddings and heads into the next stage with fresh decoders.

    The optimizer is not part of the returned state; ``run_stage`` builds a
    new one, so moments start at zero.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = read_checkpoint(ckpt)
    # the combined 2+3 variant starts straight from stage 1
    expected = {1} if next_cfg.combined_stages23 else {next_cfg.stage - 1}
    if ckpt.stage not in expected:
        raise ConfigError(f"cannot start stage {next_cfg.stage} from a stage-{ckpt.stage} checkpoint")
    model = model_from_checkpoint(ckpt)
    model.drop_decoders()
    ensure_decoders(model, next_cfg, seed)
    return model
