"""Model x input-type cross evaluation and per-image report tables."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass

import numpy as np

from latkit import tensor_core as tc
from latkit.attack import attack_dataset
from latkit.checkpoint import fingerprint
from latkit.data import Dataset
from latkit.errors import InputError
from latkit.mask import EpsilonMatrix, altered_fraction

INPUT_TYPES = ("natural", "standard_adv", "background_adv", "custom")
# display scaling applied to natural-input loss in the plot-values table
NATURAL_LOSS_SCALE = {"mnist": 1000.0, "cifar10": 100.0}
MATRIX_HEADER = ["model", "input_type", "loss", "accuracy", "n"]


@dataclass(frozen=True)
class EvalReport:
    model_id: str
    input_type: str
    mean_cross_entropy: float
    accuracy: float
    n: int


@dataclass(frozen=True)
class PerImageRecord:
    index: int
    true_class: int
    predicted_class: int
    correct: bool
    in_top5: bool
    in_top10: bool
    confidence_in_true: float
    pixels_altered_pct: float


def _check_eval_data(model: tc.Model, data: Dataset):
    if len(data) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    tc.check_images(model, data.images[:1])


def _logits(model, data, batch_size):
    return np.concatenate([tc.forward_batch(model, data.images[i:i + batch_size])
                           for i in range(0, len(data), batch_size)]).astype(np.float64)


def evaluate(model: tc.Model, data: Dataset, model_id: str = "model", input_type: str = "natural",
             batch_size: int = 500) -> EvalReport:
    """Mean softmax cross-entropy and top-1 accuracy (ties go to the lowest class)."""
    _check_eval_data(model, data)
    labels = tc.check_labels(model, data.labels, len(data))
    logits = _logits(model, data, batch_size)
    losses, _ = tc.softmax_cross_entropy(logits, labels)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    return EvalReport(model_id, input_type, float(np.mean(losses)), accuracy, len(data))


def _altered_pcts(masks, n):
    if masks is None:
        return [0.0] * n
    if isinstance(masks, EpsilonMatrix):
        return [altered_fraction(masks)] * n
    if isinstance(masks, (int, float)):
        return [float(masks)] * n
    masks = list(masks)
    if len(masks) != n:
        raise InputError(f"{len(masks)} masks for {n} images")
    return [m if isinstance(m, (int, float)) else altered_fraction(m) for m in masks]


def per_image_report(model: tc.Model, data: Dataset, masks=None, batch_size: int = 500) -> list:
    """One row per image in the style of a top-k classification table.

    ``masks`` is None, a single EpsilonMatrix or percentage shared by every
    image, or one EpsilonMatrix/percentage per image.
    """
    _check_eval_data(model, data)
    labels = tc.check_labels(model, data.labels, len(data))
    probs = tc.softmax(_logits(model, data, batch_size))
    # descending probability, lower class index first on ties
    order = np.argsort(-probs, axis=1, kind="stable")
    pcts = _altered_pcts(masks, len(data))
    records = []
    for i, (row, label) in enumerate(zip(order, labels)):
        rank = int(np.flatnonzero(row == label)[0])
        records.append(PerImageRecord(
            index=i,
            true_class=int(label),
            predicted_class=int(row[0]),
            correct=rank == 0,
            in_top5=rank < 5,
            in_top10=rank < 10,
            confidence_in_true=float(probs[i, label]),
            pixels_altered_pct=float(pcts[i]),
        ))
    return records


def summarize(records) -> dict:
    """Column averages, like the 'Average' line under a per-image table."""
    if not records:
        return {}
    keys = ("correct", "in_top5", "in_top10", "confidence_in_true", "pixels_altered_pct")
    return {k: float(np.mean([float(getattr(r, k)) for r in records])) for k in keys}


def write_per_image_csv(records, path) -> None:
    fields = list(PerImageRecord.__dataclass_fields__)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in records:
            row = asdict(r)
            writer.writerow([_fmt(row[f]) for f in fields])


# ---------------------------------------------------------------------------
# cross evaluation


def build_eval_sets(models: dict, natural: Dataset, attacks: dict, batch_size: int = 100) -> dict:
    """Natural set plus, for every model, adversarial sets crafted against that model."""
    sets = {"natural": natural}
    for model_id, model in models.items():
        for input_type, spec in attacks.items():
            sets[(model_id, input_type)] = attack_dataset(model, natural, spec, batch_size, model_id)
    return sets


def _lookup(eval_sets, model_id, input_type):
    if (model_id, input_type) in eval_sets:
        return eval_sets[(model_id, input_type)]
    if input_type in eval_sets:
        return eval_sets[input_type]
    raise InputError(f"no evaluation set for model {model_id!r}, input type {input_type!r}")


def cross_matrix(models: dict, eval_sets: dict, input_types=None, batch_size: int = 500) -> list:
    """Evaluate every model on every input type.

    ``eval_sets`` maps an input type (shared across models) or a
    ``(model_id, input_type)`` pair to a Dataset. Adversarial sets must have
    been crafted against the model they are evaluated on.
    """
    if input_types is None:
        seen = []
        for key in eval_sets:
            t = key[1] if isinstance(key, tuple) else key
            if t not in seen:
                seen.append(t)
        input_types = seen
    reports = []
    for model_id, model in models.items():
        for input_type in input_types:
            data = _lookup(eval_sets, model_id, input_type)
            target = data.meta.get("attack.target_fingerprint")
            if target is not None and target != fingerprint(model):
                raise InputError(
                    f"{input_type} set for model {model_id!r} was crafted against a different model")
            reports.append(evaluate(model, data, model_id, input_type, batch_size))
    return reports


def relative_loss_decrease(reference_loss: float, loss: float) -> float:
    """(reference - loss) / reference; positive means less loss than the reference."""
    return (reference_loss - loss) / reference_loss


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def matrix_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MATRIX_HEADER)
    for r in reports:
        writer.writerow([r.model_id, r.input_type, _fmt(r.mean_cross_entropy), _fmt(r.accuracy), r.n])
    return buf.getvalue()


def plot_values_csv(reports, dataset: str) -> str:
    scale = NATURAL_LOSS_SCALE.get(dataset, 1.0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "input_type", "plot_value", "scale"])
    for r in reports:
        s = scale if r.input_type == "natural" else 1.0
        writer.writerow([r.model_id, r.input_type, _fmt(r.mean_cross_entropy * s), _fmt(s)])
    return buf.getvalue()


def deltas_csv(reports, reference: str = "natural") -> str:
    ref = {r.input_type: r for r in reports if r.model_id == reference}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "input_type", "reference", "loss_decrease", "accuracy_change"])
    for r in reports:
        base = ref.get(r.input_type)
        if base is None or r.model_id == reference:
            continue
        dec = relative_loss_decrease(base.mean_cross_entropy, r.mean_cross_entropy)
        writer.writerow([r.model_id, r.input_type, reference, _fmt(dec), _fmt(r.accuracy - base.accuracy)])
    return buf.getvalue()


def emit_report(reports, out_dir, dataset: str = "mnist", reference: str = "natural") -> dict:
    """Write the raw matrix, the display-scaled values and loss deltas as CSV."""
    if not reports:
        raise InputError("empty cross matrix")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out_dir}: {exc}") from exc
    files = {
        "matrix": (os.path.join(out_dir, "cross_matrix.csv"), matrix_csv(reports)),
        "plot_values": (os.path.join(out_dir, "plot_values.csv"), plot_values_csv(reports, dataset)),
        "deltas": (os.path.join(out_dir, "deltas.csv"), deltas_csv(reports, reference)),
    }
    for path, text in files.values():
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise InputError(f"cannot write {path}: {exc}") from exc
    return {k: v[0] for k, v in files.items()}


def read_matrix_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MATRIX_HEADER:
        raise InputError(f"{path}: expected header {','.join(MATRIX_HEADER)}")
    return [EvalReport(m, t, float(loss), float(acc), int(n)) for m, t, loss, acc, n in rows[1:]]
