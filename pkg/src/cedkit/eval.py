"""Online detection metrics: window-level F1, focal loss and noise degradation curves."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .core import CE_IDS, N_CLASSES, NORM_TOL, CedError, LabeledTrace, NotNormalized
from .fsm import detect_labels
from .probfsm import DEFAULT_THRESHOLD, detect_many
from .simulator import corrupt, derive_seed

REPORT_SCHEMA = 1
DIVISION_RULES = ("exclude", "zero", "one")

Labels = Sequence[int]
Truth = Union[LabeledTrace, Labels]


class LengthMismatch(CedError, ValueError):
    pass


class ProbabilityZero(CedError, ValueError):
    """The true class received probability zero, so the loss is infinite."""


def _labels(x: Truth) -> Labels:
    return x.labels if isinstance(x, LabeledTrace) else x


def confusion_matrix(pred: Sequence[Labels], truth: Sequence[Truth]) -> np.ndarray:
    """11x11 window counts pooled over traces; rows are true labels, columns predictions."""
    if len(pred) != len(truth):
        raise LengthMismatch(f"{len(pred)} predicted traces for {len(truth)} reference traces")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for i, (p, t) in enumerate(zip(pred, truth)):
        t = _labels(t)
        if len(p) != len(t):
            raise LengthMismatch(f"trace {i}: {len(p)} predictions for {len(t)} windows")
        if len(t):
            np.add.at(cm, (np.asarray(t, dtype=np.int64), np.asarray(p, dtype=np.int64)), 1)
    return cm


@dataclass(frozen=True)
class EvalReport:
    """Per-class and macro F1 over pooled windows.

    ``per_class_f1`` holds ``None`` for classes dropped from the macro
    averages under the ``exclude`` division rule.
    """

    per_class_f1: dict[int, float | None]
    f1_all: float
    f1_pos: float
    confusion: list[list[int]]
    support: dict[int, int]
    division: str = "exclude"

    @property
    def n_windows(self) -> int:
        return int(sum(map(sum, self.confusion)))

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA,
            "division": self.division,
            "f1_all": self.f1_all,
            "f1_pos": self.f1_pos,
            "per_class_f1": {f"e{k}": v for k, v in self.per_class_f1.items()},
            "support": {f"e{k}": v for k, v in self.support.items()},
            "confusion": self.confusion,
            "n_windows": self.n_windows,
        }

    def to_csv(self) -> str:
        """Columns All, Pos., e0..e10; excluded classes are left blank."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["All", "Pos.", *(f"e{k}" for k in range(N_CLASSES))])

        def fmt(v):
            return "" if v is None or math.isnan(v) else f"{v:.4f}"

        w.writerow([fmt(self.f1_all), fmt(self.f1_pos), *(fmt(self.per_class_f1[k]) for k in range(N_CLASSES))])
        return buf.getvalue()


def _macro(values) -> float:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def report_from_confusion(cm: np.ndarray, division: str = "exclude") -> EvalReport:
    """Per-class F1 = 2TP / (2TP + FP + FN).

    A class with neither support nor predictions has no defined F1; the
    ``division`` rule decides whether it is left out of the macro averages
    (``exclude``) or counted as 0 or 1.
    """
    if division not in DIVISION_RULES:
        raise ValueError(f"division must be one of {DIVISION_RULES}")
    cm = np.asarray(cm)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    per_class: dict[int, float | None] = {}
    for k in range(N_CLASSES):
        denom = support[k] + predicted[k]
        if denom == 0:
            per_class[k] = {"exclude": None, "zero": 0.0, "one": 1.0}[division]
        else:
            per_class[k] = float(2 * tp[k] / denom)
    return EvalReport(
        per_class_f1=per_class,
        f1_all=_macro(per_class.values()),
        f1_pos=_macro(per_class[k] for k in CE_IDS),
        confusion=cm.astype(int).tolist(),
        support={k: int(support[k]) for k in range(N_CLASSES)},
        division=division,
    )


def f1_report(
    pred: Sequence[Labels] | Mapping[str, Labels],
    truth: Sequence[Truth],
    division: str = "exclude",
) -> EvalReport:
    """Window-level F1 pooled over all traces.

    ``pred`` is either aligned with ``truth`` or a mapping from trace id to
    predicted labels (then ``truth`` must hold LabeledTraces).
    """
    if isinstance(pred, Mapping):
        aligned = []
        for t in truth:
            if not isinstance(t, LabeledTrace):
                raise TypeError("id-keyed predictions need LabeledTrace references")
            if t.id not in pred:
                raise LengthMismatch(f"no prediction for trace {t.id!r}")
            aligned.append(pred[t.id])
        if len(pred) != len(truth):
            raise LengthMismatch(f"{len(pred)} predicted traces for {len(truth)} reference traces")
        pred = aligned
    return report_from_confusion(confusion_matrix(pred, truth), division)


# --- focal loss -----------------------------------------------------------


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: tuple[float, ...] = field(default=(0.005,) + (0.25,) * len(CE_IDS))

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        alpha = tuple(float(a) for a in self.alpha)
        if len(alpha) != N_CLASSES or any(not a > 0 for a in alpha):
            raise ValueError("alpha needs 11 positive class weights")
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def uniform(cls, gamma: float = 0.0, alpha: float = 1.0) -> FocalParams:
        return cls(gamma, (alpha,) * N_CLASSES)


def focal_loss(
    probs: Sequence[np.ndarray] | np.ndarray,
    truth: Sequence[Truth],
    params: FocalParams = FocalParams(),
    strict: bool = False,
) -> float:
    """Sum over traces and windows of -alpha_y (1 - p_y)^gamma ln p_y.

    ``probs[i]`` is a (T_i, 11) array of class probabilities for trace i.
    A zero probability on the true class makes the loss +inf, or raises
    ProbabilityZero with ``strict``.
    """
    if len(probs) != len(truth):
        raise LengthMismatch(f"{len(probs)} probability traces for {len(truth)} reference traces")
    alpha = np.asarray(params.alpha)
    total = 0.0
    for i, (p, t) in enumerate(zip(probs, truth)):
        p = np.asarray(p, dtype=float)
        y = np.asarray(_labels(t), dtype=np.int64)
        if p.ndim != 2 or p.shape[1] != N_CLASSES or p.shape[0] != len(y):
            raise LengthMismatch(f"trace {i}: probabilities of shape {p.shape} for {len(y)} windows")
        if not np.all(np.isfinite(p)) or np.any(p < 0) or (len(p) and np.abs(p.sum(axis=1) - 1).max() > NORM_TOL):
            raise NotNormalized(f"trace {i}: class probabilities must be nonnegative and sum to 1")
        py = p[np.arange(len(y)), y]
        if np.any(py == 0):
            if strict:
                raise ProbabilityZero(f"trace {i}: true class has probability 0")
            return math.inf
        total += float(np.sum(-alpha[y] * (1.0 - py) ** params.gamma * np.log(py)))
    return total


# --- degradation under classifier noise -----------------------------------


@dataclass(frozen=True)
class CurvePoint:
    noise: float
    f1_pos_argmax: float
    f1_pos_prob: float
    f1_all_argmax: float
    f1_all_prob: float


def degradation_curve(
    dataset: Sequence[LabeledTrace],
    noise_levels: Sequence[float] = (0.0, 0.05, 0.1, 0.2),
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
    confusion=None,
) -> list[CurvePoint]:
    """Corrupt every trace at each noise level and score both symbolic detectors.

    Trace ``i`` is corrupted with seed ``derive_seed(seed, i)`` at every
    level, so the flipped windows grow monotonically with the noise rate.
    The argmax detector labels the observed symbols with the deterministic
    monitors; the probabilistic one runs the belief machines on the
    classifier's distributions.
    """
    points = []
    for noise in noise_levels:
        if not 0 <= noise <= 1:
            raise ValueError("noise levels must lie in [0, 1]")
        ptraces, observed = [], []
        for i, lt in enumerate(dataset):
            pt, obs = corrupt(lt.trace, 1.0 - noise, derive_seed(seed, i), confusion)
            ptraces.append(pt)
            observed.append(obs)
        arg = f1_report([detect_labels(o) for o in observed], dataset)
        prob = f1_report(detect_many(ptraces, threshold), dataset)
        points.append(CurvePoint(float(noise), arg.f1_pos, prob.f1_pos, arg.f1_all, prob.f1_all))
    return points


def curve_csv(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["noise", "f1_pos_argmax", "f1_pos_prob", "f1_all_argmax", "f1_all_prob"])
    for p in points:
        w.writerow([p.noise, f"{p.f1_pos_argmax:.4f}", f"{p.f1_pos_prob:.4f}", f"{p.f1_all_argmax:.4f}", f"{p.f1_all_prob:.4f}"])
    return buf.getvalue()
