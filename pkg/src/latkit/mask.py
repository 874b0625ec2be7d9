"""Per-pixel perturbation budgets.

An epsilon matrix has the image's (H, W, C) shape and holds either 0 (pixel is
frozen) or epsilon (pixel may move by up to +/- epsilon). A spatial position is
budgeted or frozen as a whole, across all channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from latkit.errors import InputError, ParseError, StructuralError

STRATEGIES = ("full", "center_exempt", "bbox_exempt", "file")
MASK_MAGIC = b"LATMASK"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, x0/y0 inclusive and x1/y1 exclusive (x is the column)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @classmethod
    def parse(cls, text: str) -> "Box":
        try:
            x0, y0, x1, y1 = (int(v) for v in text.split(","))
        except ValueError:
            raise InputError(f"bad box {text!r}, expected x0,y0,x1,y1") from None
        return cls(x0, y0, x1, y1)

    def __str__(self):
        return f"{self.x0},{self.y0},{self.x1},{self.y1}"

    def check(self, h: int, w: int) -> None:
        if not (0 <= self.x0 < self.x1 <= w and 0 <= self.y0 < self.y1 <= h):
            raise InputError(f"box {self} does not fit inside a {h}x{w} image")


@dataclass(frozen=True)
class MaskStrategy:
    kind: str = "full"
    epsilon: float = 0.3
    fraction: float = 0.5
    boxes: tuple = ()
    path: str | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise InputError(f"unknown mask strategy {self.kind!r}; choose from {STRATEGIES}")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise InputError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.kind == "center_exempt" and not 0 < self.fraction < 1:
            raise InputError(f"center fraction must lie in (0, 1), got {self.fraction}")
        if self.kind == "bbox_exempt" and not self.boxes:
            raise InputError("bbox_exempt needs at least one box")
        if self.kind == "file" and not self.path:
            raise InputError("file strategy needs a mask path")

    def describe(self) -> str:
        if self.kind == "center_exempt":
            return f"center_exempt({self.fraction:g})"
        if self.kind == "bbox_exempt":
            return "bbox_exempt(" + ";".join(str(b) for b in self.boxes) + ")"
        if self.kind == "file":
            return f"file({self.path})"
        return "full"


@dataclass(frozen=True, eq=False)
class EpsilonMatrix:
    values: np.ndarray
    epsilon: float

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def budgeted(self) -> np.ndarray:
        """(H, W) boolean map of positions allowed to change."""
        return (self.values != 0).any(axis=-1)

    def is_zero(self) -> bool:
        return not self.values.any()


def center_box(h: int, w: int, fraction: float) -> Box:
    bh = int(math.floor(fraction * h + 0.5))
    bw = int(math.floor(fraction * w + 0.5))
    y0 = (h - bh) // 2
    x0 = (w - bw) // 2
    return Box(x0, y0, x0 + bw, y0 + bh)


def read_mask_file(path) -> np.ndarray:
    """(H, W) boolean map; True marks a budgeted pixel.

    File layout: b"LATMASK", then "H W" as ASCII on the header line, then
    H*W bytes, 0 for exempt and 1 for budgeted.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read mask file {path}: {exc}") from exc
    if not raw.startswith(MASK_MAGIC):
        raise ParseError(f"{path}: not a LATMASK file")
    newline = raw.find(b"\n")
    if newline < 0:
        raise ParseError(f"{path}: missing header line")
    try:
        h, w = (int(v) for v in raw[len(MASK_MAGIC):newline].split())
    except ValueError:
        raise ParseError(f"{path}: bad header {raw[:newline]!r}") from None
    body = raw[newline + 1:]
    if len(body) != h * w:
        raise ParseError(f"{path}: expected {h * w} mask bytes, found {len(body)}")
    cells = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if cells.max(initial=0) > 1:
        raise ParseError(f"{path}: mask bytes must be 0 or 1")
    return cells.astype(bool)


def write_mask_file(path, budgeted: np.ndarray) -> None:
    budgeted = np.asarray(budgeted, dtype=bool)
    h, w = budgeted.shape
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC + f" {h} {w}\n".encode("ascii"))
        fh.write(budgeted.astype(np.uint8).tobytes())


def budget_map(h: int, w: int, strategy: MaskStrategy) -> np.ndarray:
    """(H, W) boolean map of budgeted positions for a strategy."""
    if strategy.kind == "full":
        return np.ones((h, w), dtype=bool)
    if strategy.kind == "file":
        cells = read_mask_file(strategy.path)
        if cells.shape != (h, w):
            raise InputError(f"mask file is {cells.shape[0]}x{cells.shape[1]}, images are {h}x{w}")
        return cells
    if strategy.kind == "center_exempt":
        box = center_box(h, w, strategy.fraction)
        # a tiny fraction of a tiny image can round to an empty box
        boxes = [box] if box.x1 > box.x0 and box.y1 > box.y0 else []
    else:
        boxes = strategy.boxes
    out = np.ones((h, w), dtype=bool)
    for box in boxes:
        box.check(h, w)
        out[box.y0:box.y1, box.x0:box.x1] = False
    return out


def build_epsilon_matrix(shape, strategy: MaskStrategy) -> EpsilonMatrix:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise StructuralError(f"expected an (H, W, C) shape, got {shape}")
    h, w, c = shape
    allowed = budget_map(h, w, strategy)
    values = np.where(allowed[:, :, None], np.float32(strategy.epsilon), np.float32(0))
    return EpsilonMatrix(np.broadcast_to(values, shape).copy(), strategy.epsilon)


def altered_fraction(ep: EpsilonMatrix) -> float:
    """Percentage of spatial positions with a nonzero budget in any channel."""
    budgeted = ep.budgeted()
    return 100.0 * float(budgeted.sum()) / budgeted.size


def _budget_bounds(origin, ep):
    # float32 rounding of origin -/+ ep can overshoot the budget by an ulp;
    # nudge those bounds back inside so |result - origin| <= ep holds exactly.
    lo = origin - ep
    hi = origin + ep
    o64 = origin.astype(np.float64)
    e64 = ep.astype(np.float64)
    over = (o64 - lo.astype(np.float64)) > e64
    if over.any():
        lo[over] = np.nextafter(lo[over], np.float32(np.inf))
    over = (hi.astype(np.float64) - o64) > e64
    if over.any():
        hi[over] = np.nextafter(hi[over], np.float32(-np.inf))
    np.maximum(lo, 0, out=lo)
    np.minimum(hi, 1, out=hi)
    return lo, hi


def clip_to_budget(candidate, origin, ep) -> np.ndarray:
    """Clamp into [origin - ep, origin + ep] intersected with [0, 1].

    ``ep`` may be an EpsilonMatrix or an array broadcastable to the images, so
    a batch (N, H, W, C) can be clipped against one (H, W, C) budget.
    """
    values = ep.values if isinstance(ep, EpsilonMatrix) else np.asarray(ep)
    candidate = np.asarray(candidate, dtype=np.float32)
    origin = np.asarray(origin, dtype=np.float32)
    if candidate.shape != origin.shape:
        raise StructuralError(f"candidate shape {candidate.shape} != origin shape {origin.shape}")
    if values.ndim == 0 or values.shape != origin.shape[origin.ndim - values.ndim:]:
        raise StructuralError(f"budget shape {values.shape} does not match images {origin.shape}")
    values = np.broadcast_to(values.astype(np.float32), origin.shape)
    lo, hi = _budget_bounds(origin, values)
    out = np.minimum(np.maximum(candidate, lo), hi)
    # frozen pixels come back as the original bits
    frozen = values == 0
    if frozen.any():
        out[frozen] = origin[frozen]
    return out
