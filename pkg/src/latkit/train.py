"""Natural training and localized adversarial training (LAT).

LAT replaces every image of a minibatch with a PGD iterate computed against
the current parameters, restricted by the attack's epsilon matrix, and then
takes one optimizer step on that all-adversarial batch.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from latkit import tensor_core as tc
from latkit.attack import AttackSpec, pgd_batch
from latkit.checkpoint import save_model
from latkit.config import dump_config
from latkit.data import Dataset, batch_stream
from latkit.errors import InputError, NumericError
from latkit.mask import build_epsilon_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 1000
    batch_size: int = 50
    optimizer: tc.OptimizerConfig = field(default_factory=tc.OptimizerConfig)
    attack: AttackSpec | None = None
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    mix_natural_fraction: float = 0.0
    arch: tc.Architecture | None = None  # None: standard net for the data's image shape

    def __post_init__(self):
        if self.total_steps < 1:
            raise InputError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise InputError("checkpoint_every must be >= 0")
        if not 0 <= self.mix_natural_fraction <= 1:
            raise InputError("mix_natural_fraction must lie in [0, 1]")

    def as_dict(self) -> dict:
        out = {
            "mode": "natural" if self.attack is None else "lat",
            "steps": self.total_steps,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer.kind,
            "lr": self.optimizer.lr,
            "beta1": self.optimizer.beta1,
            "beta2": self.optimizer.beta2,
            "adam_eps": self.optimizer.eps,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "mix_natural_fraction": self.mix_natural_fraction,
        }
        if self.attack is not None:
            spec = self.attack.as_dict()
            spec["attack_steps"] = spec.pop("steps")
            spec["attack_seed"] = spec.pop("seed")
            out.update(spec)
        return out


@dataclass
class TrainRecord:
    step: int
    batch_loss: float
    batch_accuracy: float
    wall_ms: float


def _arch_for(config: TrainConfig, data: Dataset) -> tc.Architecture:
    if config.arch is not None:
        arch = config.arch
    else:
        arch = tc.Architecture(tuple(data.image_shape))
    if tuple(data.image_shape) != tuple(arch.input_shape):
        raise InputError(f"data images are {data.image_shape}, network expects {arch.input_shape}")
    return arch


def _validate(config: TrainConfig, data: Dataset) -> tc.Architecture:
    if len(data) == 0:
        raise InputError("training set is empty")
    if config.batch_size > len(data):
        raise InputError(f"batch_size {config.batch_size} exceeds training set size {len(data)}")
    arch = _arch_for(config, data)
    if data.labels.min() < 0 or data.labels.max() >= arch.num_classes:
        raise InputError(f"labels must lie in [0, {arch.num_classes})")
    return arch


def train_natural(config: TrainConfig, data: Dataset, run_dir=None, on_record=None) -> tc.Model:
    """Plain minibatch training on unaltered images."""
    if config.attack is not None:
        raise InputError("train_natural takes a config without an attack; use lat_train")
    return _train(config, data, run_dir, on_record, None)


def lat_train(config: TrainConfig, data: Dataset, run_dir=None, on_record=None, on_batch=None) -> tc.Model:
    """Localized adversarial training.

    ``on_batch(step, model, adversarial_images, source_images)`` is called after
    the batch has been attacked and before the update, with the exact parameter
    snapshot the attack used.
    """
    if config.attack is None:
        raise InputError("lat_train needs config.attack")
    return _train(config, data, run_dir, on_record, on_batch)


def _train(config, data, run_dir, on_record, on_batch):
    arch = _validate(config, data)
    model = tc.init_model(arch, seed=config.seed)
    state = tc.OptimizerState()
    stream = batch_stream(data, config.batch_size, config.seed)
    attack = config.attack
    n_natural = int(round(config.mix_natural_fraction * config.batch_size))

    log_writer = None
    log_fh = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(dump_config(config.as_dict()))
        log_fh = open(os.path.join(run_dir, "train_log.csv"), "w", newline="", encoding="utf-8")
        log_writer = csv.writer(log_fh)
        log_writer.writerow(["step", "loss", "accuracy", "wall_ms"])

    try:
        for step in range(1, config.total_steps + 1):
            t0 = time.perf_counter()
            idx = next(stream)
            images = data.images[idx]
            labels = data.labels[idx]
            if attack is not None:
                # the budget is rebuilt per batch from the strategy
                ep = build_epsilon_matrix(arch.input_shape, attack.strategy)
                k = min(n_natural, len(idx))
                keys = [(attack.seed, config.seed, step, i) for i in range(k, len(idx))]
                try:
                    res = pgd_batch(model, images[k:], labels[k:], attack, ep, keys=keys)
                except NumericError as exc:
                    raise NumericError(f"training step {step}: {exc}") from exc
                source = images
                images = np.concatenate([images[:k], res.adversarial]) if k else res.adversarial
                if on_batch is not None:
                    on_batch(step, model, images, source)
            loss, grads, logits = tc.batch_gradients(model, images, labels)
            if not np.isfinite(loss):
                raise NumericError(f"training step {step}: non-finite batch loss")
            accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
            model = tc.apply_update(model, grads, state, config.optimizer)
            record = TrainRecord(step, loss, accuracy, (time.perf_counter() - t0) * 1e3)
            if log_writer is not None:
                log_writer.writerow([step, repr(loss), repr(accuracy), f"{record.wall_ms:.3f}"])
            if on_record is not None:
                on_record(record)
            if step % 100 == 0:
                log.info("step %d loss %.4f acc %.3f", step, loss, accuracy)
            if run_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_model(model, os.path.join(run_dir, f"ckpt_{step:07d}.latm"))
    finally:
        if log_fh is not None:
            log_fh.close()
    if run_dir is not None:
        save_model(model, os.path.join(run_dir, "final.latm"))
    return model


def smoothed(values, decay: float = 0.98) -> np.ndarray:
    """Exponential moving average, seeded with the first value."""
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else decay * acc + (1 - decay) * v
        out[i] = acc
    return out
