"""Optimization loop: identity-balanced batches, SGD with momentum,
linear warmup + cosine decay, per-epoch metrics, exact resume.

Every random stream is derived from (seed, purpose, epoch, image index), so
two runs with the same config are bit-identical and a run resumed from a
checkpoint continues exactly where the uninterrupted run would be.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import evaluate as ev
from . import geometry as geo
from . import losses as ls
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import PatchConfig
from .model import DipModel

_PK_TAG, _ERASE_TAG, _AFFINE_TAG = 0x9A17, 0xE7A5, 0xAFF1


class DivergenceError(FloatingPointError):
    """Raised when the total loss stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    p_ids: int = 8
    k_imgs: int = 4
    lr0: float = 0.04
    momentum: float = 0.9
    warmup_epochs: int = 5
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.33)
    erase_aspect: tuple = (0.3, 3.3)
    lambda_id: float = 1.0
    lambda_t: float = 1.0
    lambda_pe: float = 1.0
    margin: float = 0.3
    use_transform: bool = True
    use_weighting: bool = True
    seed: int = 0
    eval_every: int = 1
    checkpoint_every: int = 0   # 0 = final epoch only
    affine: geo.AffineConfig = field(default_factory=geo.AffineConfig)

    def __post_init__(self):
        if self.p_ids * self.k_imgs != self.batch_size:
            raise ValueError(
                f"P*K = {self.p_ids}*{self.k_imgs} != batch {self.batch_size}"
            )
        if self.k_imgs < 2 or self.p_ids < 2:
            raise ValueError("need at least 2 identities and 2 images each")


def lr_at(step, config: TrainConfig, steps_per_epoch):
    """Warmup from lr0/10 to lr0, then cosine decay to 0 at the last step."""
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warmup:
        return config.lr0 / 10 + (config.lr0 - config.lr0 / 10) * step / warmup
    horizon = max(1, total - 1 - warmup)
    t = min(step - warmup, horizon)
    return config.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence(key))


def _coeffs(tc: TrainConfig):
    return ls.LossCoefficients(
        lambda_id=tc.lambda_id, lambda_t=tc.lambda_t,
        lambda_pe=tc.lambda_pe, margin=tc.margin,
    )


def train_step(model, images, labels, tc: TrainConfig, epoch, image_indices):
    """One forward/backward/update over a prepared batch.

    Returns the loss breakdown. ``image_indices`` key the per-sample
    augmentation streams.
    """
    erase_cfg = dat.EraseConfig(tc.erase_prob, tc.erase_area, tc.erase_aspect)
    batch = np.stack([
        dat.random_erase(img, _rng(tc.seed, _ERASE_TAG, epoch, int(gi)), erase_cfg)
        for img, gi in zip(images, image_indices)
    ])

    transforms = None
    warped = None
    if tc.use_transform:
        transforms = [
            geo.sample_affine(_rng(tc.seed, _AFFINE_TAG, epoch, int(gi)), tc.affine)
            for gi in image_indices
        ]
        warped = np.stack([
            geo.transform_image(img, K) for img, K in zip(batch, transforms)
        ])

    state = {}

    def loss_fn():
        out_x = model.forward(batch)
        out_xp = None
        targets_xp = None
        if warped is not None:
            out_xp = model.forward(warped)
            if model.config.M > 0:
                targets_xp = np.stack([
                    geo.transform_position(p, K)
                    for p, K in zip(out_x.impl_positions.data, transforms)
                ]).astype(out_x.impl_positions.dtype)
        state["breakdown"] = ls.total_loss(
            out_x, labels, model.params, _coeffs(tc),
            out_xp=out_xp, targets_xp=targets_xp,
            use_weighting=tc.use_weighting,
        )
        return state["breakdown"].total_tensor

    trace = ad.record(loss_fn)
    breakdown = state["breakdown"]
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite total loss at epoch {epoch}")
    grads = ad.backward(trace, ad.Tensor(np.ones_like(trace.outputs[0].data)))
    return breakdown, grads


def train(dataset, tc: TrainConfig, pc: PatchConfig, out_dir,
          eval_query=None, eval_gallery=None, camera_filter=True,
          resume_from=None):
    """Full training run; returns (model, metrics records).

    Writes ``metrics.jsonl`` (one JSON record per epoch) and
    ``checkpoint.dip`` under ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = dataset.labels
    steps_per_epoch = dat.epoch_capacity(labels, tc.p_ids, tc.k_imgs)
    if steps_per_epoch < 1:
        raise dat.InsufficientDataError("dataset too small for one batch")

    model = DipModel(pc, num_classes=dataset.num_ids, seed=tc.seed)
    velocity = {k: np.zeros_like(v.data) for k, v in model.params.items()}
    start_epoch = 0
    if resume_from is not None:
        cfg_json, epoch, params, momentum, _ = load_checkpoint(resume_from)
        if cfg_json.get("patch") != _patch_dict(pc):
            raise ev.ConfigMismatchError("checkpoint patch config differs")
        for name, arr in params.items():
            model.params[name].data = arr.astype(model.params[name].dtype, copy=True)
        for name, arr in momentum.items():
            velocity[name] = arr.astype(velocity[name].dtype, copy=True)
        start_epoch = epoch + 1

    records = []
    log_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "checkpoint.dip"
    with open(log_path, "w" if start_epoch == 0 else "a") as log:
        for epoch in range(start_epoch, tc.epochs):
            batches = dat.pk_batches(labels, tc.p_ids, tc.k_imgs,
                                     _rng(tc.seed, _PK_TAG, epoch))
            sums = {}
            lr = 0.0
            for b, idxs in enumerate(batches):
                step = epoch * steps_per_epoch + b
                lr = lr_at(step, tc, steps_per_epoch)
                breakdown, grads = train_step(
                    model, dataset.images[idxs], labels[idxs], tc, epoch, idxs
                )
                for k, v in breakdown.to_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                mu = tc.momentum
                for name, p in model.params.items():
                    g = grads.get(p)
                    if g is None:
                        continue
                    velocity[name] = mu * velocity[name] + g
                    p.data = p.data - (lr * velocity[name]).astype(p.dtype)
            record = {"epoch": epoch, "lr": lr}
            record.update({k: v / max(1, len(batches)) for k, v in sums.items()})
            if eval_query is not None and eval_gallery is not None and (
                epoch % tc.eval_every == 0 or epoch == tc.epochs - 1
            ):
                result = ev.evaluate_retrieval(
                    model,
                    eval_query.images, eval_query.labels, eval_query.cameras,
                    eval_gallery.images, eval_gallery.labels, eval_gallery.cameras,
                    camera_filter=camera_filter,
                )
                record["rank1"] = result.rank1
                record["map"] = result.map
            records.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            last = epoch == tc.epochs - 1
            if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                _save(out_dir / f"checkpoint_ep{epoch:04d}.dip", model, tc,
                      epoch, velocity)
            if last:
                _save(ckpt_path, model, tc, epoch, velocity)
    return model, records


def _patch_dict(pc: PatchConfig):
    return {k: getattr(pc, k) for k in
            ("H", "W", "C", "P", "S", "D", "M", "L", "heads", "dropout")}


def _save(path, model, tc: TrainConfig, epoch, velocity):
    config = {
        "patch": _patch_dict(model.config),
        "num_classes": model.num_classes,
        "train": {k: v for k, v in asdict(tc).items() if k != "affine"},
    }
    save_checkpoint(
        path, config, epoch, model.params, velocity,
        rng_state={"seed": tc.seed, "completed_epoch": epoch},
    )


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, config dict)."""
    config, _epoch, params, _vel, _rng_state = load_checkpoint(path)
    pc = PatchConfig(**config["patch"])
    model = DipModel(pc, num_classes=config["num_classes"], seed=0)
    for name, arr in params.items():
        model.params[name].data = arr.astype(model.params[name].dtype, copy=True)
    return model, config
