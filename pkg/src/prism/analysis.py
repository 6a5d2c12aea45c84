"""Run classification: outcomes, failure modes, divergence statistics.

Every completed training run is reduced to one :class:`RunRecord`, a
self-contained JSON-serializable summary carrying the full configuration,
per-step telemetry, the divergence trace against the fault-free twin, and
the two labels the campaign reports aggregate over:

* outcome: did the final validation perplexity survive (Unchanged), move
  by more than the tolerance band (Changed), or never materialize
  (Crashed)?
* mode: how the run got there, ordered by precedence from Crashed through
  the spike and silent-degradation shapes down to Benign.

All classification here is a pure function of recorded scalars; nothing
re-reads weights or reruns the model.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .faultengine import FaultSiteTuple
from .model import ModelConfig
from .trainer import StepRecord, TrainConfig, TrainResult

__all__ = [
    "PPL_TOLERANCE",
    "DRIFT_NORM_FRACTION",
    "Outcome",
    "Mode",
    "weight_divergence",
    "classify_outcome",
    "drift_threshold",
    "classify_mode",
    "spearman_rank",
    "DivergenceTrend",
    "divergence_trend",
    "nan_event_steps",
    "RunRecord",
    "build_run_record",
]

# Relative PPL band treated as Unchanged.  The boundary itself is inside
# the band: a deviation of exactly the tolerance still counts as Unchanged.
PPL_TOLERANCE = 0.01

# Drift threshold as a fraction of the baseline's final weight norm.  With
# identical seeds the no-fault divergence is exactly zero, so any material
# nonzero divergence is drift; the fraction absorbs skipped-step noise.
DRIFT_NORM_FRACTION = 1e-3


class Outcome(str, Enum):
    UNCHANGED = "Unchanged"
    CHANGED = "Changed"
    CRASHED = "Crashed"


class Mode(str, Enum):
    BENIGN = "Benign"
    SPIKE_RECOVER = "SpikeRecover"
    SPIKE_DEGRADE = "SpikeDegrade"
    SILENT_DEGRADATION = "SilentDegradation"
    GRADUAL_DRIFT = "GradualDrift"
    CRASHED = "Crashed"


def weight_divergence(w_fault, w_baseline) -> float:
    """L2 norm of the flattened elementwise difference, in wide precision.

    Accepts either two mappings of parameter name to array (same key sets,
    matching shapes per key) or two plain arrays of identical shape.
    """
    fault_is_map = isinstance(w_fault, Mapping)
    if fault_is_map != isinstance(w_baseline, Mapping):
        raise ValueError("weight containers must both be mappings or both arrays")
    if fault_is_map:
        if set(w_fault) != set(w_baseline):
            raise ValueError("weight mappings must hold the same tensor names")
        total = 0.0
        for name in sorted(w_fault):
            a = np.asarray(w_fault[name], dtype=np.float64)
            b = np.asarray(w_baseline[name], dtype=np.float64)
            if a.shape != b.shape:
                raise ValueError(f"shape mismatch for {name}: {a.shape} vs {b.shape}")
            d = (a - b).ravel()
            total += float(np.dot(d, d))
        return math.sqrt(total)
    a = np.asarray(w_fault, dtype=np.float64)
    b = np.asarray(w_baseline, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm((a - b).ravel()))


def classify_outcome(final_ppl: float | None, baseline_ppl: float) -> Outcome:
    """Label a run by its final validation perplexity.

    Absent or non-finite PPL is Crashed; a relative deviation at or below
    PPL_TOLERANCE is Unchanged; anything beyond, in either direction, is
    Changed.
    """
    if not math.isfinite(baseline_ppl) or baseline_ppl <= 0:
        raise ValueError("baseline PPL must be finite and positive")
    if final_ppl is None or not math.isfinite(final_ppl):
        return Outcome.CRASHED
    rel = abs(final_ppl - baseline_ppl) / baseline_ppl
    return Outcome.UNCHANGED if rel <= PPL_TOLERANCE else Outcome.CHANGED


def drift_threshold(baseline_final_norm: float) -> float:
    """Divergence above this (strictly) counts as drift for a quiet run."""
    if not math.isfinite(baseline_final_norm) or baseline_final_norm < 0:
        raise ValueError("baseline weight norm must be finite and non-negative")
    return DRIFT_NORM_FRACTION * baseline_final_norm


def classify_mode(
    outcome: Outcome,
    n_nan_events: int,
    final_divergence: float,
    threshold: float,
) -> Mode:
    """Assign the failure mode, by precedence.

    Crashed wins outright.  At least one NaN event makes the run a spike,
    split by whether the PPL recovered.  A quiet run that still changed is
    silent degradation; a quiet unchanged run whose weights drifted past
    the threshold is gradual drift; everything else is benign.
    """
    if outcome is Outcome.CRASHED:
        return Mode.CRASHED
    if n_nan_events > 0:
        return Mode.SPIKE_RECOVER if outcome is Outcome.UNCHANGED else Mode.SPIKE_DEGRADE
    if outcome is Outcome.CHANGED:
        return Mode.SILENT_DEGRADATION
    if final_divergence > threshold:
        return Mode.GRADUAL_DRIFT
    return Mode.BENIGN


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rank(x: Sequence[float], y: Sequence[float]) -> tuple[float, bool]:
    """Spearman rank correlation with average ranks for ties.

    Returns (rho, degenerate).  Fewer than two points, or a constant
    series on either side, leaves the correlation undefined; those cases
    report 0.0 with the degenerate flag set.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError("inputs must be 1-D sequences of equal length")
    if len(xa) < 2:
        return 0.0, True
    rx = _average_ranks(xa)
    ry = _average_ranks(ya)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy)))
    if denom == 0.0:
        return 0.0, True
    return float(np.dot(dx, dy) / denom), False


@dataclass(frozen=True)
class DivergenceTrend:
    """Shape of the weight divergence trace from fault onset onward."""

    delta: float  # final divergence minus divergence at onset
    rank_correlation: float  # divergence vs step, average-rank Spearman
    degenerate: bool  # correlation undefined (constant or too short)


def divergence_trend(
    trace: Sequence[tuple[int, float]], onset_step: int
) -> DivergenceTrend:
    """Summarize the post-onset part of a (step, divergence) trace."""
    if not trace:
        raise ValueError("divergence trace is empty")
    post = [(s, d) for s, d in trace if s >= onset_step]
    if not post:
        post = [trace[-1]]
    steps = [float(s) for s, _ in post]
    divs = [float(d) for _, d in post]
    rho, degenerate = spearman_rank(steps, divs)
    return DivergenceTrend(delta=divs[-1] - divs[0], rank_correlation=rho, degenerate=degenerate)


def nan_event_steps(steps: Sequence[StepRecord]) -> list[int]:
    """Steps where any monitored dimension saw a non-finite value."""
    return [
        s.step
        for s in steps
        if s.nan_in_loss or s.nan_in_activations or s.nan_in_weights
    ]


def _train_config_to_json(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _train_config_from_json(d: dict) -> TrainConfig:
    d = dict(d)
    d["model"] = ModelConfig(**d["model"])
    return TrainConfig(**d)


_STEP_FIELDS = (
    "step",
    "loss",
    "lr",
    "loss_scale",
    "grad_norm",
    "skipped",
    "fault_active",
    "n_corrupted",
    "nan_in_loss",
    "nan_in_activations",
    "nan_in_weights",
)


def _step_to_json(s: StepRecord) -> list:
    return [getattr(s, f) for f in _STEP_FIELDS]


def _step_from_json(row: list) -> StepRecord:
    return StepRecord(**dict(zip(_STEP_FIELDS, row)))


@dataclass
class RunRecord:
    """One run, reduced to everything the campaign reports ever need.

    A record is self-describing: the training config and the fault site
    tuple are embedded in full, so the run can be re-executed from the
    record alone.
    """

    run_id: str
    train_config: TrainConfig
    fault: FaultSiteTuple | None
    checkpoint_frac: float | None  # onset as the requested fraction of the horizon
    baseline_ppl: float
    initial_ppl: float | None
    final_ppl: float | None
    steps: list[StepRecord]
    nan_event_steps: list[int]
    n_nan_loss_steps: int
    n_nan_activation_steps: int
    n_nan_weight_steps: int
    n_skipped_steps: int
    n_corruption_events: int
    n_elements_corrupted: int
    divergence: list[tuple[int, float]]
    early_stop_step: int | None
    early_stop_reason: str | None
    outcome: Outcome
    mode: Mode
    div_delta: float
    div_rank_correlation: float
    div_degenerate: bool
    error: str | None = None  # exception text when the run itself blew up

    @property
    def format(self) -> str:
        return self.train_config.train_format

    @property
    def rate(self) -> float | None:
        return self.fault.rate if self.fault is not None else None

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "train_config": _train_config_to_json(self.train_config),
            "fault": self.fault.to_json() if self.fault is not None else None,
            "checkpoint_frac": self.checkpoint_frac,
            "baseline_ppl": self.baseline_ppl,
            "initial_ppl": self.initial_ppl,
            "final_ppl": self.final_ppl,
            "steps": [_step_to_json(s) for s in self.steps],
            "nan_event_steps": list(self.nan_event_steps),
            "n_nan_loss_steps": self.n_nan_loss_steps,
            "n_nan_activation_steps": self.n_nan_activation_steps,
            "n_nan_weight_steps": self.n_nan_weight_steps,
            "n_skipped_steps": self.n_skipped_steps,
            "n_corruption_events": self.n_corruption_events,
            "n_elements_corrupted": self.n_elements_corrupted,
            "divergence": [[s, d] for s, d in self.divergence],
            "early_stop_step": self.early_stop_step,
            "early_stop_reason": self.early_stop_reason,
            "outcome": self.outcome.value,
            "mode": self.mode.value,
            "div_delta": self.div_delta,
            "div_rank_correlation": self.div_rank_correlation,
            "div_degenerate": self.div_degenerate,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        return cls(
            run_id=d["run_id"],
            train_config=_train_config_from_json(d["train_config"]),
            fault=FaultSiteTuple.from_json(d["fault"]) if d["fault"] is not None else None,
            checkpoint_frac=d["checkpoint_frac"],
            baseline_ppl=d["baseline_ppl"],
            initial_ppl=d["initial_ppl"],
            final_ppl=d["final_ppl"],
            steps=[_step_from_json(row) for row in d["steps"]],
            nan_event_steps=list(d["nan_event_steps"]),
            n_nan_loss_steps=d["n_nan_loss_steps"],
            n_nan_activation_steps=d["n_nan_activation_steps"],
            n_nan_weight_steps=d["n_nan_weight_steps"],
            n_skipped_steps=d["n_skipped_steps"],
            n_corruption_events=d["n_corruption_events"],
            n_elements_corrupted=d["n_elements_corrupted"],
            divergence=[(int(s), float(v)) for s, v in d["divergence"]],
            early_stop_step=d["early_stop_step"],
            early_stop_reason=d["early_stop_reason"],
            outcome=Outcome(d["outcome"]),
            mode=Mode(d["mode"]),
            div_delta=d["div_delta"],
            div_rank_correlation=d["div_rank_correlation"],
            div_degenerate=d["div_degenerate"],
            error=d.get("error"),
        )


def build_run_record(
    run_id: str,
    result: TrainResult,
    site: FaultSiteTuple | None,
    baseline_ppl: float,
    baseline_final_norm: float,
    checkpoint_frac: float | None = None,
    error: str | None = None,
) -> RunRecord:
    """Classify a finished run and pack it into a RunRecord."""
    events = nan_event_steps(result.steps)
    outcome = classify_outcome(result.final_ppl, baseline_ppl)
    final_div = result.divergence[-1][1] if result.divergence else 0.0
    mode = classify_mode(
        outcome, len(events), final_div, drift_threshold(baseline_final_norm)
    )
    onset = site.checkpoint if site is not None else 0
    if result.divergence:
        trend = divergence_trend(result.divergence, onset)
    else:
        trend = DivergenceTrend(delta=0.0, rank_correlation=0.0, degenerate=True)
    return RunRecord(
        run_id=run_id,
        train_config=result.config,
        fault=site,
        checkpoint_frac=checkpoint_frac,
        baseline_ppl=baseline_ppl,
        initial_ppl=result.initial_ppl,
        final_ppl=result.final_ppl,
        steps=list(result.steps),
        nan_event_steps=events,
        n_nan_loss_steps=sum(1 for s in result.steps if s.nan_in_loss),
        n_nan_activation_steps=sum(1 for s in result.steps if s.nan_in_activations),
        n_nan_weight_steps=sum(1 for s in result.steps if s.nan_in_weights),
        n_skipped_steps=sum(1 for s in result.steps if s.skipped),
        n_corruption_events=len(result.corruption_records),
        n_elements_corrupted=sum(r.n_changed for r in result.corruption_records),
        divergence=list(result.divergence),
        early_stop_step=result.early_stop_step,
        early_stop_reason=result.early_stop_reason,
        outcome=outcome,
        mode=mode,
        div_delta=trend.delta,
        div_rank_correlation=trend.rank_correlation,
        div_degenerate=trend.degenerate,
        error=error,
    )
