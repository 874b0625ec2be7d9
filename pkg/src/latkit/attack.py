"""L-infinity PGD whose per-pixel radius comes from an epsilon matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from latkit import tensor_core as tc
from latkit.checkpoint import fingerprint
from latkit.data import Dataset, to_bytes
from latkit.errors import InputError, NumericError, StructuralError
from latkit.mask import EpsilonMatrix, MaskStrategy, altered_fraction, build_epsilon_matrix, clip_to_budget


@dataclass(frozen=True)
class AttackSpec:
    strategy: MaskStrategy = field(default_factory=MaskStrategy)
    steps: int = 100
    step_size: float | None = None  # None -> min(2.5 * epsilon / steps, epsilon)
    random_start: bool = False
    best_iterate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InputError(f"steps must be >= 1, got {self.steps}")
        eps = self.epsilon
        if self.step_size is not None:
            if not math.isfinite(self.step_size) or self.step_size < 0:
                raise InputError(f"step size must be finite and >= 0, got {self.step_size}")
            if eps > 0 and not 0 < self.step_size <= eps:
                raise InputError(f"step size {self.step_size} must lie in (0, epsilon={eps}]")

    @classmethod
    def create(cls, epsilon=0.3, kind="full", fraction=0.5, boxes=(), path=None, **kw) -> "AttackSpec":
        return cls(MaskStrategy(kind, epsilon, fraction, tuple(boxes), path), **kw)

    @property
    def epsilon(self) -> float:
        return self.strategy.epsilon

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return min(2.5 * self.epsilon / self.steps, self.epsilon)

    def with_epsilon(self, epsilon: float) -> "AttackSpec":
        return replace(self, strategy=replace(self.strategy, epsilon=epsilon))

    def as_dict(self) -> dict:
        s = self.strategy
        out = {
            "strategy": s.kind,
            "epsilon": s.epsilon,
            "steps": self.steps,
            "step_size": self.alpha,
            "random_start": self.random_start,
            "best_iterate": self.best_iterate,
            "seed": self.seed,
        }
        if s.kind == "center_exempt":
            out["fraction"] = s.fraction
        if s.kind == "bbox_exempt":
            out["boxes"] = ";".join(str(b) for b in s.boxes)
        if s.kind == "file":
            out["mask_file"] = s.path
        return out


@dataclass(eq=False)
class AttackResult:
    adversarial: np.ndarray
    loss_trace: np.ndarray  # loss of iterate 0 (the start) through iterate `steps`
    final_loss: float
    pixels_altered_pct: float
    best_step: int
    last_loss: float


@dataclass(eq=False)
class BatchAttack:
    """Vectorised result for a batch of images; row i belongs to image i."""

    adversarial: np.ndarray
    loss_trace: np.ndarray  # (N, steps + 1)
    best_step: np.ndarray
    last: np.ndarray

    @property
    def final_loss(self) -> np.ndarray:
        return self.loss_trace[np.arange(len(self.best_step)), self.best_step]


def fgsm_step(x, grad, step_size) -> np.ndarray:
    """One signed-gradient ascent step, sign(0) = 0. No clipping."""
    x = np.asarray(x, dtype=np.float32)
    grad = np.asarray(grad)
    if x.shape != grad.shape:
        raise StructuralError(f"image shape {x.shape} != gradient shape {grad.shape}")
    return x + np.float32(step_size) * np.sign(grad).astype(np.float32)


def random_start_noise(shape, epsilon: float, keys) -> np.ndarray:
    """Uniform [-eps, eps] noise, one independent stream per image key."""
    return np.stack([
        np.random.default_rng(key).uniform(-epsilon, epsilon, shape).astype(np.float32)
        for key in keys
    ])


def pgd_batch(model: tc.Model, x, labels, spec: AttackSpec, ep: EpsilonMatrix | None = None,
              keys=None, offset: int = 0) -> BatchAttack:
    """Run PGD on every image of a batch against a fixed model snapshot.

    ``keys`` seed the random start per image (default ``(spec.seed, offset + i)``);
    ``offset`` only affects error messages and default keys.
    """
    x = tc.check_images(model, x).astype(np.float32, copy=False)
    labels = tc.check_labels(model, labels, len(x))
    if ep is None:
        ep = build_epsilon_matrix(x.shape[1:], spec.strategy)
    elif ep.shape != x.shape[1:]:
        raise StructuralError(f"budget shape {ep.shape} != image shape {x.shape[1:]}")
    n, steps = len(x), spec.steps
    alpha = spec.alpha

    if ep.is_zero():
        # every iterate is x itself, so the trace is the natural loss repeated
        losses = tc.batch_losses(model, x, labels)
        _check_finite(losses, "loss", 0, offset)
        trace = np.repeat(losses[:, None], steps + 1, axis=1)
        return BatchAttack(x.copy(), trace, np.zeros(n, dtype=np.int64), x.copy())

    cur = x
    if spec.random_start:
        if keys is None:
            keys = [(spec.seed, offset + i) for i in range(n)]
        noise = random_start_noise(x.shape[1:], spec.epsilon, keys)
        cur = clip_to_budget(x + noise, x, ep)

    trace = np.empty((n, steps + 1), dtype=np.float64)
    best = cur.copy()
    best_loss = np.full(n, -np.inf)
    best_step = np.zeros(n, dtype=np.int64)
    for t in range(steps + 1):
        if t < steps:
            grad, losses, _ = tc.input_gradient_batch(model, cur, labels)
            _check_finite(grad.reshape(n, -1), "gradient", t, offset)
        else:
            losses = tc.batch_losses(model, cur, labels)
        _check_finite(losses, "loss", t, offset)
        trace[:, t] = losses
        better = losses > best_loss
        if better.any():
            best[better] = cur[better]
            best_loss[better] = losses[better]
            best_step[better] = t
        if t < steps:
            cur = clip_to_budget(fgsm_step(cur, grad, alpha), x, ep)

    if not spec.best_iterate:
        best, best_step = cur, np.full(n, steps)
    return BatchAttack(best, trace, best_step, cur)


def _check_finite(values, what, step, offset):
    values = np.asarray(values)
    bad = ~np.isfinite(values)
    if bad.any():
        rows = bad.reshape(len(values), -1).any(axis=1)
        image = offset + int(np.argmax(rows))
        raise NumericError(f"non-finite {what} at PGD step {step} (image {image})")


def pgd_attack(model: tc.Model, x, label, spec: AttackSpec) -> AttackResult:
    x = tc.check_image(model, x)
    ep = build_epsilon_matrix(x.shape[1:], spec.strategy)
    out = pgd_batch(model, x, [label], spec, ep)
    return AttackResult(
        adversarial=out.adversarial[0],
        loss_trace=out.loss_trace[0],
        final_loss=float(out.final_loss[0]),
        pixels_altered_pct=altered_fraction(ep),
        best_step=int(out.best_step[0]),
        last_loss=float(out.loss_trace[0, -1]),
    )


def attack_dataset(model: tc.Model, dataset: Dataset, spec: AttackSpec, batch_size: int = 100,
                   model_id: str | None = None) -> Dataset:
    """Replace every image with its PGD iterate; labels and order are kept.

    Images are attacked in fixed chunks of ``batch_size``; results do not depend
    on how the chunks are scheduled. The returned ``meta`` records the attack
    and the fingerprint of the attacked model.
    """
    meta = dict(dataset.meta)
    meta.update({f"attack.{k}": v for k, v in spec.as_dict().items()})
    meta["attack.target_fingerprint"] = fingerprint(model)
    if model_id is not None:
        meta["attack.target_model"] = model_id
    if len(dataset) == 0:
        return Dataset(dataset.images.copy(), dataset.labels.copy(), dataset.name, meta)
    ep = build_epsilon_matrix(dataset.image_shape, spec.strategy)
    meta["attack.pixels_altered_pct"] = altered_fraction(ep)
    out = np.empty_like(dataset.images, dtype=np.float32)
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        res = pgd_batch(model, dataset.images[start:stop], dataset.labels[start:stop], spec, ep,
                        offset=start)
        out[start:stop] = res.adversarial
    return Dataset(out, dataset.labels.copy(), dataset.name, meta)


def quantize_within_budget(adversarial, origin, ep: EpsilonMatrix) -> np.ndarray:
    """Byte pixels for saving an adversarial set without leaving the budget.

    Rounds to the nearest byte, then clamps to the whole number of byte levels
    the budget allows around the original byte value.
    """
    base = to_bytes(origin).astype(np.int64)
    allowance = np.floor(ep.values.astype(np.float64) * 255.0 + 1e-9).astype(np.int64)
    q = np.rint(np.asarray(adversarial, dtype=np.float64) * 255.0).astype(np.int64)
    q = np.clip(q, base - allowance, base + allowance)
    return np.clip(q, 0, 255).astype(np.uint8)
