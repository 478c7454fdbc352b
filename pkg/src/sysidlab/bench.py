"""Training scheduler, stopping rule, evaluation and epoch-count metrics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

from . import nn
from .data import Dataset

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "ThresholdMismatch",
    "LearningCurve",
    "MetricsReport",
    "ComparisonReport",
    "train",
    "evaluate",
    "epochs_to_threshold",
    "dynamic_threshold",
    "metrics",
    "compare",
    "rebase",
    "percent_reduction",
    "format_percent",
]


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))


class ThresholdMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_group: int = 10
    stop_tol: float = 5e-5
    max_epochs: int = 200
    bptt_window: int = 100
    constant_mse: float = 1e-2
    eval_every: int = 1
    seed: int = 2021
    stop_on: str = "test"
    lr: float = 0.01
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.stop_tol >= 0:
            raise ValueError("stop_tol must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.epochs_per_group < 1 or self.bptt_window < 1 or self.eval_every < 1:
            raise ValueError("epochs_per_group, bptt_window and eval_every must be >= 1")
        if self.stop_on not in ("train", "test"):
            raise ValueError(f"stop_on must be 'train' or 'test', got {self.stop_on!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LearningCurve:
    """Per-epoch records. Epochs are 1-based; ``test_mse`` is None on
    epochs skipped by ``eval_every``."""

    epochs: list[int] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)
    test_mse: list[float | None] = field(default_factory=list)
    stopped_by: str = "none"

    def __len__(self) -> int:
        return len(self.epochs)

    def append(self, train_mse: float, test_mse: float | None) -> None:
        self.epochs.append(len(self.epochs) + 1)
        self.train_mse.append(float(train_mse))
        self.test_mse.append(None if test_mse is None else float(test_mse))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "test_mse"])
        for e, tr, te in zip(self.epochs, self.train_mse, self.test_mse):
            w.writerow([e, f"{tr:.17g}", "" if te is None else f"{te:.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LearningCurve":
        curve = cls()
        for row in csv.DictReader(io.StringIO(text)):
            te = row["test_mse"]
            curve.append(float(row["train_mse"]), float(te) if te else None)
        return curve

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LearningCurve":
        return cls(list(d["epochs"]), list(d["train_mse"]), list(d["test_mse"]), d.get("stopped_by", "none"))


def evaluate(net: nn.Network, test: Dataset) -> float:
    """Test-set MSE over every sequence and time step."""
    pred, _ = nn.forward(net, test.features, keep_cache=False)
    return nn.mse(pred, test.labels)


def _clip(grads: nn.Network, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.tensors()))
    if total > max_norm:
        for g in grads.tensors():
            g *= max_norm / total


def _run_epoch(net, group: Dataset, flags, adam: nn.AdamState, cfg: TrainConfig) -> float:
    T = group.length
    state = None
    sq_err, count = 0.0, 0
    for start in range(0, T, cfg.bptt_window):
        x = group.features[:, start:start + cfg.bptt_window]
        y = group.labels[:, start:start + cfg.bptt_window]
        pred, cache = nn.forward(net, x, state)
        loss = nn.mse(pred, y)
        sq_err += loss * y.size
        count += y.size
        grads = nn.backward(net, cache, y, flags)
        if cfg.clip_norm is not None:
            _clip(grads, cfg.clip_norm)
        nn.adam_step(net, grads, adam, flags)
        # carry state into the next window; gradients stop at the boundary
        state = cache.final_state
    return sq_err / count


def train(
    net: nn.Network,
    groups: Sequence[Dataset],
    test: Dataset,
    mask: Sequence[bool] | None = None,
    cfg: TrainConfig = TrainConfig(),
    *,
    fixed_epochs: int | None = None,
) -> tuple[nn.Network, LearningCurve]:
    """Train ``net`` in place with a fresh Adam state.

    Groups are visited round-robin, ``cfg.epochs_per_group`` consecutive
    epochs each. Training stops once two consecutive evaluated MSEs differ by
    less than ``cfg.stop_tol`` or after ``cfg.max_epochs`` epochs. With
    ``fixed_epochs`` the stopping rule is disabled and exactly that many
    epochs run.
    """
    if not groups:
        raise ValueError("need at least one training group")
    for k, g in enumerate(groups):
        if g.n_sequences == 0 or g.length == 0:
            raise ValueError(f"training group {k} is empty")
    flags = list(mask) if mask is not None else None
    adam = nn.AdamState.fresh(net, lr=cfg.lr)
    curve = LearningCurve()
    n_epochs = cfg.max_epochs if fixed_epochs is None else fixed_epochs
    prev = None
    for epoch in range(1, n_epochs + 1):
        group = groups[((epoch - 1) // cfg.epochs_per_group) % len(groups)]
        try:
            train_mse = _run_epoch(net, group, flags, adam, cfg)
            test_mse = evaluate(net, test) if epoch % cfg.eval_every == 0 else None
        except nn.NonFiniteError as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc
        if not math.isfinite(train_mse) or (test_mse is not None and not math.isfinite(test_mse)):
            raise TrainingDiverged(epoch, "non-finite loss")
        curve.append(train_mse, test_mse)
        if fixed_epochs is not None:
            continue
        watched = test_mse if cfg.stop_on == "test" else train_mse
        if watched is None:
            continue
        if prev is not None and abs(watched - prev) < cfg.stop_tol:
            curve.stopped_by = "criterion"
            return net, curve
        prev = watched
    curve.stopped_by = "fixed" if fixed_epochs is not None else "max_epochs"
    return net, curve


# --- metrics -------------------------------------------------------------------


def epochs_to_threshold(curve: LearningCurve, tau: float) -> int | None:
    """First 1-based epoch whose test MSE is <= tau, or None."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    for e, v in zip(curve.epochs, curve.test_mse):
        if v is not None and v <= tau:
            return e
    return None


def _min_test(curve: LearningCurve) -> float:
    vals = [v for v in curve.test_mse if v is not None]
    if not vals:
        raise ValueError("curve has no test MSE values")
    return min(vals)


def dynamic_threshold(baseline: LearningCurve) -> float:
    """Twice the baseline's minimal test MSE."""
    return 2.0 * _min_test(baseline)


@dataclass
class MetricsReport:
    minimal_test_mse: float          # reference minimum the dynamic threshold derives from
    dynamic_threshold: float
    constant_threshold: float
    epochs_to_constant: int | None
    epochs_to_dynamic: int | None
    converged_at: int | None
    curve_minimal_test_mse: float
    test_mse: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def metrics(
    curve: LearningCurve,
    *,
    constant: float = 1e-2,
    reference_min: float | None = None,
) -> MetricsReport:
    """Epoch-count metrics of ``curve``.

    ``reference_min`` is the baseline's minimal test MSE; pass it when scoring
    a transferred curve so both share the same dynamic threshold. It
    defaults to the curve's own minimum (the baseline case).
    """
    own_min = _min_test(curve)
    ref = own_min if reference_min is None else float(reference_min)
    dyn = 2.0 * ref
    return MetricsReport(
        minimal_test_mse=ref,
        dynamic_threshold=dyn,
        constant_threshold=constant,
        epochs_to_constant=epochs_to_threshold(curve, constant),
        epochs_to_dynamic=epochs_to_threshold(curve, dyn),
        converged_at=len(curve) if curve.stopped_by == "criterion" else None,
        curve_minimal_test_mse=own_min,
        test_mse=list(curve.test_mse),
    )


def rebase(report: MetricsReport, reference_min: float) -> MetricsReport:
    """Recompute ``report`` against another reference minimum."""
    curve = LearningCurve()
    for v in report.test_mse:
        curve.append(float("nan"), v)
    if report.converged_at is not None:
        curve.stopped_by = "criterion"
    return metrics(curve, constant=report.constant_threshold, reference_min=reference_min)


def percent_reduction(raw: int, transferred: int) -> float:
    return 100.0 * (raw - transferred) / raw


def format_percent(value: float, digits: int = 1) -> str:
    """Round half-up, so 31.25 prints as 31.3."""
    q = Decimal(1).scaleb(-digits)
    return f"{Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP)}%"


@dataclass
class ComparisonReport:
    rows: dict  # metric name -> {raw, transferred, threshold, reduction_pct, comparable}

    def to_dict(self) -> dict:
        return {"rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'metric':<10}{'threshold':>14}{'raw':>8}{'transf.':>10}{'reduction':>12}"]
        for name, r in self.rows.items():
            red = format_percent(r["reduction_pct"]) if r["comparable"] else "n/a"
            if r["comparable"] and r["reduction_pct"] > 0:
                red = "+" + red
            fmt = lambda v: "-" if v is None else str(v)
            lines.append(
                f"{name:<10}{r['threshold']:>14.6g}{fmt(r['raw']):>8}{fmt(r['transferred']):>10}{red:>12}"
            )
        return "\n".join(lines)


def compare(raw: MetricsReport, transferred: MetricsReport) -> ComparisonReport:
    """Percent epoch reductions of ``transferred`` relative to ``raw``.

    Positive means the transferred network needed fewer epochs.
    """
    if raw.constant_threshold != transferred.constant_threshold:
        raise ThresholdMismatch(
            f"constant thresholds differ: {raw.constant_threshold} vs {transferred.constant_threshold}"
        )
    if raw.dynamic_threshold != transferred.dynamic_threshold:
        raise ThresholdMismatch(
            f"dynamic thresholds differ: {raw.dynamic_threshold} vs {transferred.dynamic_threshold}"
        )
    rows = {}
    for name, thr, a, b in (
        ("constant", raw.constant_threshold, raw.epochs_to_constant, transferred.epochs_to_constant),
        ("dynamic", raw.dynamic_threshold, raw.epochs_to_dynamic, transferred.epochs_to_dynamic),
    ):
        ok = a is not None and b is not None
        rows[name] = {
            "threshold": thr,
            "raw": a,
            "transferred": b,
            "reduction_pct": percent_reduction(a, b) if ok else None,
            "comparable": ok,
        }
    return ComparisonReport(rows)
