"""Registration quality metrics and the evaluation report."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from tokenreg.volume import DisplacementField, GeometryMismatchError, LabelVolume, ScalarVolume
from tokenreg.warp import jacobian_det, tensor_to_field, volume_to_tensor, warp_labels

REPORT_KEYS = ("dice_per_label", "mean_dice", "pct_nonpos_jacobian", "register_time_ms")


@dataclass
class EvalReport:
    dice_per_label: dict[int, float]
    mean_dice: float
    pct_nonpos_jacobian: float
    register_time_ms: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dice_per_label"] = {str(k): v for k, v in sorted(self.dice_per_label.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        missing = set(REPORT_KEYS) - set(d)
        extra = set(d) - set(REPORT_KEYS)
        if missing or extra:
            raise ValueError(f"report schema mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        return cls(
            dice_per_label={int(k): float(v) for k, v in d["dice_per_label"].items()},
            mean_dice=float(d["mean_dice"]),
            pct_nonpos_jacobian=float(d["pct_nonpos_jacobian"]),
            register_time_ms=float(d["register_time_ms"]),
        )


def _check(a, b):
    if a.geometry != b.geometry:
        raise GeometryMismatchError(f"geometry mismatch: {a.geometry.dims} vs {b.geometry.dims}")


def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Overlap ``2|A & B| / (|A| + |B|)``; 1.0 when neither map has the label."""
    _check(a, b)
    ma = a.data == label
    mb = b.data == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / denom


def dice_per_label(warped: LabelVolume, fixed: LabelVolume) -> dict[int, float]:
    labels = sorted(label for label in fixed.labels() if label != 0)
    return {label: dice(warped, fixed, label) for label in labels}


def mean_dice(warped: LabelVolume, fixed: LabelVolume) -> float:
    scores = dice_per_label(warped, fixed)
    return float(np.mean(list(scores.values()))) if scores else 1.0


def fold_fraction(phi: DisplacementField) -> float:
    """Percentage of voxels with a non-positive Jacobian determinant."""
    det = jacobian_det(phi).data
    return 100.0 * np.count_nonzero(det <= 0) / det.size


def evaluate_pair(
    source,
    moving: ScalarVolume | None,
    fixed: ScalarVolume | None,
    seg_moving: LabelVolume,
    seg_fixed: LabelVolume,
    steps: int | None = None,
) -> EvalReport:
    """Score a registration.

    ``source`` is either a ready :class:`DisplacementField` or a model; a
    model is run on ``(moving, fixed)`` and its inference time recorded.
    """
    _check(seg_moving, seg_fixed)
    if isinstance(source, DisplacementField):
        phi, elapsed = source, 0.0
    else:
        phi, elapsed = register(source, moving, fixed, steps)
    _check(seg_moving, phi)
    scores = dice_per_label(warp_labels(seg_moving, phi), seg_fixed)
    return EvalReport(
        dice_per_label=scores,
        mean_dice=float(np.mean(list(scores.values()))) if scores else 1.0,
        pct_nonpos_jacobian=fold_fraction(phi),
        register_time_ms=elapsed,
    )


def register(model, moving: ScalarVolume, fixed: ScalarVolume, steps: int | None = None):
    """Predict a field with ``model``; returns ``(field, inference milliseconds)``."""
    _check(moving, fixed)
    if steps is None:
        steps = max(model.trained_steps, default=1)
    mv, fx = volume_to_tensor(moving), volume_to_tensor(fixed)
    model.eval()
    with torch.no_grad():
        start = time.perf_counter()
        disp = model.forward_cascaded(mv, fx, steps=steps).field
        elapsed = (time.perf_counter() - start) * 1000.0
    return tensor_to_field(disp), elapsed
