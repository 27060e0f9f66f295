"""Training loop: BCE on logits, Adam, deterministic batching, checkpointing.

Batch order is a pure function of (seed, step): every epoch has its own
permutation stream, so resuming from a checkpoint at step k replays exactly
the batches an uninterrupted run would have seen, making resume bit-exact.
"""

import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as model_mod
from .data import extract_patches, select_frames
from .errors import ConfigError, DivergenceError, ValidationError
from .metrics import confusion, mcc
from .ops import bce_with_logits
from .rng import stream
from .serial import canonical_json
from .tensor import Tensor, adam_step, backward, zero_grads


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    steps: int = 200
    patch: int = 32
    train_frames: int = 6
    seed: int = 0
    eval_interval: int = 0
    checkpoint_dir: str | None = None
    max_cloud: float = 0.25

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.patch < 1:
            raise ConfigError(f"patch must be >= 1, got {self.patch}")
        return self


@dataclass
class TrainLog:
    model_config: dict
    train_config: dict
    seed: int
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (step, avg_mcc)
    wall_seconds: float = 0.0
    best_step: int = -1
    best_mcc: float = float("-inf")

    def save(self, path: str) -> None:
        """Line-delimited canonical JSON: config header, steps, evals, summary."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                canonical_json(
                    {"type": "config", "model": self.model_config, "train": self.train_config, "seed": self.seed}
                )
                + "\n"
            )
            for i, loss in enumerate(self.losses):
                fh.write(canonical_json({"type": "step", "step": i, "loss": loss}) + "\n")
            for step, m in self.evals:
                fh.write(canonical_json({"type": "eval", "step": step, "mcc": m}) + "\n")
            fh.write(
                canonical_json(
                    {
                        "type": "summary",
                        "steps": len(self.losses),
                        "best_step": self.best_step,
                        "best_mcc": self.best_mcc if self.best_mcc > float("-inf") else None,
                        "wall_seconds": self.wall_seconds,
                    }
                )
                + "\n"
            )


def shuffle(dataset, seed: int):
    """Deterministic permutation of a sample list."""
    order = stream(seed, "shuffle").permutation(len(dataset))
    return [dataset[i] for i in order]


def _batch_indices(n: int, batch: int, step: int, seed: int):
    per_epoch = max(1, n // batch)
    epoch = step // per_epoch
    slot = step % per_epoch
    order = stream(seed, f"epoch:{epoch}").permutation(n)
    return [int(order[(slot * batch + j) % n]) for j in range(batch)]


def _stack_batch(patches, indices, train_frames, max_cloud):
    chosen = [select_frames(patches[i], max_cloud, target_frames=train_frames) for i in indices]
    t_common = min(s.frames for s in chosen)
    if t_common < 1:
        raise ValidationError("batch has a sample with zero usable frames")
    xs = np.stack([s.lr_stack[:t_common] for s in chosen]).astype(np.float32)
    ys = np.stack([s.label[None].astype(np.float32) for s in chosen])
    return Tensor(xs), Tensor(ys)


def _prepare_patches(scenes, patch):
    patches = []
    for s in scenes:
        patches.extend(extract_patches(s, patch=patch))
    if not patches:
        raise ValidationError("training set is empty")
    return patches


def train(model_config, train_config, train_set, val_set=None, resume=None):
    """Run the training loop; returns (model, TrainLog).

    When ``train_config.checkpoint_dir`` is set, writes ``final.ckpt`` at the
    end and ``best.ckpt`` whenever periodic evaluation improves the running
    best validation MCC. ``resume`` takes a checkpoint path and continues
    from its recorded step count (bit-exact given the same data and seed).
    """
    model_config.validate()
    train_config.validate()
    patches = _prepare_patches(train_set, train_config.patch)

    if resume is not None:
        model = model_mod.restore_model(resume, config=model_config)
        start_step = max((p.step_count for p in model.parameters()), default=0)
    else:
        model = model_mod.SPInet(model_config, rng=stream(train_config.seed, "init"))
        start_step = 0

    log = TrainLog(
        model_config=model_config.to_dict(),
        train_config=asdict(train_config),
        seed=train_config.seed,
    )
    params = model.parameters()
    ckpt_dir = train_config.checkpoint_dir
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)

    t0 = time.perf_counter()
    model.train()
    for step in range(start_step, train_config.steps):
        idx = _batch_indices(len(patches), train_config.batch_size, step, train_config.seed)
        x, y = _stack_batch(patches, idx, train_config.train_frames, train_config.max_cloud)
        logits = model(x)
        loss = bce_with_logits(logits, y)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            worst = max(params, key=lambda p: float(np.abs(p.data).max()))
            raise DivergenceError(
                f"non-finite loss at step {step}; largest parameter {worst.name!r} "
                f"has max |value| {float(np.abs(worst.data).max()):.3e}"
            )
        backward(loss)
        adam_step(params, train_config.lr)
        zero_grads(params)
        log.losses.append(loss_val)

        if (
            val_set
            and train_config.eval_interval > 0
            and ((step + 1) % train_config.eval_interval == 0 or step + 1 == train_config.steps)
        ):
            _, _, avg = evaluate(model, val_set, max_cloud=train_config.max_cloud)
            log.evals.append((step + 1, avg))
            if avg > log.best_mcc:
                log.best_mcc = avg
                log.best_step = step + 1
                if ckpt_dir:
                    model_mod.save_checkpoint(model, os.path.join(ckpt_dir, "best.ckpt"))
            model.train()
    log.wall_seconds = time.perf_counter() - t0

    if ckpt_dir:
        model_mod.save_checkpoint(model, os.path.join(ckpt_dir, "final.ckpt"))
        if log.best_step < 0:
            model_mod.save_checkpoint(model, os.path.join(ckpt_dir, "best.ckpt"))
        log.save(os.path.join(ckpt_dir, "train_log.jsonl"))
    return model, log


def evaluate(model, scenes, threshold: float = 0.5, max_cloud: float = 0.25, target_frames: int | None = None):
    """Per-scene MCC of thresholded predictions plus the unweighted average.

    Scenes are evaluated one by one with all frames that pass the cloud
    filter; returns (names, per_scene_mcc, avg_mcc).
    """
    scenes = list(scenes)
    if not scenes:
        raise ValidationError("evaluate needs at least one scene")
    model.eval()
    names, scores = [], []
    for i, scene in enumerate(scenes):
        sel = select_frames(scene, max_cloud, target_frames=target_frames)
        x = Tensor(sel.lr_stack[None].astype(np.float32))
        pred = model.predict(x, threshold=threshold)
        scores.append(mcc(confusion(pred.data[0, 0], scene.label)))
        names.append(scene.name or f"scene-{i:04d}")
    return names, scores, float(np.mean(scores))
