"""Two-path cycle-consistent adversarial training of G, F, D_image and D_mask."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import pickle
import zipfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import LossConfig, ModelConfig, TrainingConfig
from .data import AugmentationPolicy, DatasetSplit, augment, stack_batch
from .errors import CheckpointError, NanosynthError, NonFiniteLossError, ValidationError
from .evaluation import ssim
from .extractors import get_extractor
from .generation import generate
from .losses import LossReport, cycle_losses, l1_loss, lsgan_loss, perceptual_loss, segmentation_loss
from .networks import build_discriminator, build_generator, build_segmenter

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_FORMAT = "nanosynth-checkpoint"
NETWORKS = ("generator", "segmenter", "disc_image", "disc_mask")
OPTIMIZERS = ("gen", "disc_image", "disc_mask")


@dataclass
class TrainState:
    model_config: ModelConfig
    generator: torch.nn.Module
    segmenter: torch.nn.Module
    disc_image: torch.nn.Module
    disc_mask: torch.nn.Module
    opt_gen: torch.optim.Optimizer
    opt_disc_image: torch.optim.Optimizer
    opt_disc_mask: torch.optim.Optimizer
    torch_rng: torch.Generator
    np_rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    @property
    def dtype(self):
        return next(self.generator.parameters()).dtype

    def networks(self):
        return {name: getattr(self, name) for name in NETWORKS}

    def optimizers(self):
        return {name: getattr(self, f"opt_{name}") for name in OPTIMIZERS}


def _adam(params, cfg: TrainingConfig):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def init_state(model_config: ModelConfig, training_config: TrainingConfig, dtype=torch.float32) -> TrainState:
    """Fresh networks and optimizers, initialized reproducibly from ``training_config.seed``."""
    seed = training_config.seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        nets = [build_generator(model_config), build_segmenter(model_config),
                build_discriminator(model_config), build_discriminator(model_config)]
    device = torch.device(training_config.device)
    gen, seg, d_img, d_mask = (n.to(device=device, dtype=dtype) for n in nets)
    gen.image_size = seg.image_size = tuple(model_config.image_size)
    return TrainState(
        model_config=model_config,
        generator=gen, segmenter=seg, disc_image=d_img, disc_mask=d_mask,
        opt_gen=_adam(list(gen.parameters()) + list(seg.parameters()), training_config),
        opt_disc_image=_adam(d_img.parameters(), training_config),
        opt_disc_mask=_adam(d_mask.parameters(), training_config),
        torch_rng=torch.Generator().manual_seed(seed + 1),
        np_rng=np.random.default_rng(seed + 2),
    )


@lru_cache(maxsize=None)
def _cached_extractor(name, dtype):
    return get_extractor(name, dtype)


def perceptual_extractor(loss_config: LossConfig, dtype=torch.float32):
    if loss_config.weight_perceptual == 0 and loss_config.weight_cycle_perceptual == 0:
        return None
    return _cached_extractor(loss_config.perceptual_extractor, dtype)


def _check_finite(terms: dict):
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(name, float(value.detach()))


def generator_losses(state: TrainState, images, masks, loss_config: LossConfig, extractor=None):
    """Forward and backward cycle paths plus every generator/segmenter objective.

    Returns ``(terms, fakes)`` where ``fakes`` holds the generated image and the
    predicted mask, still attached to the graph.
    """
    if extractor is None:
        extractor = perceptual_extractor(loss_config, images.dtype)
    G, Fseg = state.generator, state.segmenter
    b = images.shape[0]
    z = torch.randn(b, G.latent_dim, generator=state.torch_rng, dtype=images.dtype).to(images.device)
    # forward path: mask -> image -> mask
    fake_image = G(masks, z, generator=state.torch_rng)
    mask_rec = Fseg(fake_image)
    # backward path: image -> mask (soft) -> image
    mask_pred = Fseg(images)
    image_rec = G(mask_pred, z, generator=state.torch_rng)

    terms = {
        "adv_image": lsgan_loss(state.disc_image(fake_image), 1.0),
        "adv_mask": lsgan_loss(state.disc_mask(mask_pred), 1.0),
        "l1": l1_loss(fake_image, images),
    }
    if loss_config.weight_perceptual > 0:
        terms["perceptual"] = perceptual_loss(fake_image, images, extractor)
    else:
        terms["perceptual"] = images.new_zeros(())
    terms["mask_cycle"], terms["image_cycle"] = cycle_losses(masks, mask_rec, images, image_rec, loss_config,
                                                             extractor)
    terms["segmentation"] = segmentation_loss(mask_pred, masks, loss_config)
    c = loss_config
    terms["generator_total"] = (
        c.weight_adversarial * (terms["adv_image"] + terms["adv_mask"])
        + c.weight_l1 * terms["l1"]
        + c.weight_perceptual * terms["perceptual"]
        + c.weight_cycle * (terms["mask_cycle"] + terms["image_cycle"])
        + terms["segmentation"]
    )
    return terms, {"image": fake_image, "mask": mask_pred}


def discriminator_loss(disc, real, fake):
    """LSGAN discriminator objective; ``fake`` is detached so no gradient reaches its producer."""
    return lsgan_loss(disc(real), 1.0) + lsgan_loss(disc(fake.detach()), 0.0)


def train_step(batch, state: TrainState, loss_config: LossConfig, training_config: Optional[TrainingConfig] = None,
               extractor=None):
    """One update of (G, F) jointly, then D_image, then D_mask. Mutates and returns ``state``."""
    if not batch:
        raise ValidationError("train_step needs a nonempty batch")
    shapes = {p.shape for p in batch}
    if len(shapes) != 1:
        raise ValidationError(f"batch rasters differ in size: {sorted(shapes)}")
    if extractor is None:
        extractor = perceptual_extractor(loss_config, state.dtype)
    device = next(state.generator.parameters()).device
    images, masks = (torch.from_numpy(a).to(device=device, dtype=state.dtype) for a in stack_batch(batch))

    discs = (state.disc_image, state.disc_mask)
    for d in discs:
        d.requires_grad_(False)
    terms, fakes = generator_losses(state, images, masks, loss_config, extractor)
    for d in discs:
        d.requires_grad_(True)
    _check_finite(terms)
    state.opt_gen.zero_grad(set_to_none=True)
    terms["generator_total"].backward()
    state.opt_gen.step()

    terms["disc_image"] = discriminator_loss(state.disc_image, images, fakes["image"])
    _check_finite({"disc_image": terms["disc_image"]})
    state.opt_disc_image.zero_grad(set_to_none=True)
    terms["disc_image"].backward()
    state.opt_disc_image.step()

    terms["disc_mask"] = discriminator_loss(state.disc_mask, masks, fakes["mask"])
    _check_finite({"disc_mask": terms["disc_mask"]})
    state.opt_disc_mask.zero_grad(set_to_none=True)
    terms["disc_mask"].backward()
    state.opt_disc_mask.step()

    state.step += 1
    report = LossReport({k: float(v.detach()) for k, v in terms.items()})
    report.values["segmentation_total"] = report.values["segmentation"]
    return state, report


# ---------------------------------------------------------------------------
# logging

class MetricsLog:
    """Append-only ``step<TAB>name<TAB>value`` lines."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, step, values: dict):
        with self.path.open("a") as fh:
            for name, value in values.items():
                fh.write(f"{step}\t{name}\t{float(value)!r}\n")


def read_metrics_log(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        step, name, value = line.split("\t")
        rows.append((int(step), name, float(value)))
    return rows


def validation_report(state: TrainState, pairs, loss_config: LossConfig, seed: int):
    """Mean segmentation loss of F and mean SSIM of G(mask) against the paired image."""
    if not pairs:
        return {}
    seg_losses, ssims = [], []
    with torch.no_grad():
        for i, pair in enumerate(pairs):
            img = torch.from_numpy(pair.image).to(state.dtype)[None, None]
            mask = torch.from_numpy(pair.mask).to(state.dtype)[None, None]
            seg_losses.append(float(segmentation_loss(state.segmenter(img), mask, loss_config)))
            ssims.append(ssim(generate(pair.mask, state.generator, seed=seed + i), pair.image))
    return {"val/segmentation": float(np.mean(seg_losses)), "val/ssim": float(np.mean(ssims))}


def train(dataset: DatasetSplit, loss_config: LossConfig, training_config: TrainingConfig,
          model_config: Optional[ModelConfig] = None, policy: Optional[AugmentationPolicy] = None,
          out_dir=None, state: Optional[TrainState] = None, extractor=None,
          checkpoint_meta: Optional[dict] = None) -> TrainState:
    """Run epochs ``state.epoch .. training_config.epochs - 1``.

    Writes ``checkpoints/epoch_XXXX.pt`` every ``checkpoint_every`` epochs and
    ``checkpoints/final.pt`` after the last one, plus ``metrics.tsv`` and
    ``validation.tsv`` when ``out_dir`` is given.
    """
    if not dataset.train:
        raise ValidationError("training split is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if state is None:
        if model_config is None:
            raise ValidationError("either model_config or state is required")
        state = init_state(model_config, training_config)
        if out_dir is not None:
            for name in ("metrics.tsv", "validation.tsv"):
                (out_dir / name).unlink(missing_ok=True)
    policy = policy or AugmentationPolicy(0.0, 0.0, False)
    metrics = MetricsLog(out_dir / "metrics.tsv") if out_dir is not None else None
    if extractor is None:
        extractor = perceptual_extractor(loss_config, state.dtype)

    bs = training_config.batch_size
    n_batches = math.ceil(len(dataset.train) / bs)
    if training_config.max_steps_per_epoch is not None:
        n_batches = min(n_batches, training_config.max_steps_per_epoch)
    start = state.epoch
    for epoch in range(start, training_config.epochs):
        order = state.np_rng.permutation(len(dataset.train))
        for bi in range(n_batches):
            batch = [augment(dataset.train[j], policy, state.np_rng) for j in order[bi * bs:(bi + 1) * bs]]
            _, report = train_step(batch, state, loss_config, training_config, extractor)
            if metrics:
                metrics.write(state.step, report.values)
        state.epoch = epoch + 1
        val = validation_report(state, dataset.val, loss_config, training_config.seed)
        if out_dir is not None:
            if val:
                metrics.write(state.step, val)
                vpath = out_dir / "validation.tsv"
                if not vpath.exists():
                    vpath.write_text("epoch\tstep\tval_segmentation\tval_ssim\n")
                with vpath.open("a") as fh:
                    fh.write(f"{state.epoch}\t{state.step}\t{val['val/segmentation']!r}\t{val['val/ssim']!r}\n")
            if state.epoch % training_config.checkpoint_every == 0:
                save_checkpoint(state, out_dir / "checkpoints" / f"epoch_{state.epoch:04d}.pt", checkpoint_meta)
        log.info("epoch %d/%d step %d %s", state.epoch, training_config.epochs, state.step, val)
    if out_dir is not None and state.epoch > start:
        save_checkpoint(state, out_dir / "checkpoints" / "final.pt", checkpoint_meta)
    return state


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: TrainState, path, extra: Optional[dict] = None):
    """Atomically write the full training state (networks, optimizers, RNGs) to one file."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "model_config": json.dumps(dataclasses.asdict(state.model_config)),
        "dtype": str(state.dtype).replace("torch.", ""),
        "networks": {name: net.state_dict() for name, net in state.networks().items()},
        "optimizers": {name: opt.state_dict() for name, opt in state.optimizers().items()},
        "epoch": state.epoch,
        "step": state.step,
        "torch_rng": state.torch_rng.get_state(),
        "numpy_rng": json.dumps(state.np_rng.bit_generator.state),
        "extra": json.dumps(extra or {}),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # fixed temp name: torch embeds the file stem in the archive, keep bytes reproducible
        tmp = path.with_name(f".{path.name}.tmp")
        try:
            torch.save(payload, tmp)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
    except OSError as exc:
        raise NanosynthError(f"failed to write checkpoint {path}: {exc}") from None
    return path


def _read_payload(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile, OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema_version {version} unsupported (expected {SCHEMA_VERSION})")
    missing = [k for k in ("model_config", "networks", "optimizers", "epoch", "step", "torch_rng", "numpy_rng")
               if k not in payload]
    if missing:
        raise CheckpointError(f"{path}: missing field(s) {missing}")
    return payload


def _norm(v):
    return tuple(v) if isinstance(v, list) else v


def checkpoint_model_config(path) -> ModelConfig:
    return ModelConfig(**json.loads(_read_payload(path)["model_config"]))


def load_checkpoint(path, model_config: Optional[ModelConfig] = None,
                    training_config: Optional[TrainingConfig] = None) -> TrainState:
    """Restore a :class:`TrainState`; with ``model_config`` given, every field must match."""
    payload = _read_payload(path)
    stored = ModelConfig(**json.loads(payload["model_config"]))
    if model_config is not None:
        for f in dataclasses.fields(ModelConfig):
            a, b = _norm(getattr(stored, f.name)), _norm(getattr(model_config, f.name))
            if a != b:
                raise CheckpointError(f"{path}: checkpoint {f.name}={a!r} does not match configured {b!r}")
    training_config = training_config or TrainingConfig()
    dtype = getattr(torch, payload.get("dtype", "float32"))
    state = init_state(stored, training_config, dtype=dtype)
    try:
        for name, net in state.networks().items():
            net.load_state_dict(payload["networks"][name])
        for name, opt in state.optimizers().items():
            opt.load_state_dict(payload["optimizers"][name])
        state.torch_rng.set_state(payload["torch_rng"])
        state.np_rng.bit_generator.state = json.loads(payload["numpy_rng"])
    except (KeyError, RuntimeError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: incompatible contents ({exc})") from None
    state.epoch, state.step = int(payload["epoch"]), int(payload["step"])
    return state


def checkpoint_extra(path) -> dict:
    return json.loads(_read_payload(path).get("extra", "{}"))
