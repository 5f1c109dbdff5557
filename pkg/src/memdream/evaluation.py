"""Rank correlation, prediction-distribution analysis, and the run matrix.

A run is one (model kind, trained-on domain, tested-on domain) cell, named
"(trained on)_(model)_(tested on)" with domain labels Mem10k (real frames,
the genesis domain) and Dream (surrogate images). Scoring is Spearman rank
correlation on fractional ranks; reports add a 20-bin histogram over [0, 1]
and adjusted sample skewness of the predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

MODEL_KINDS = ("bayesian_ridge", "head")
DOMAINS = ("genesis", "dream")
FRAME_MODES = ("single", "middle", "stacked")

_DOMAIN_LABELS = {"genesis": "Mem10k", "dream": "Dream"}
_MODEL_LABELS = {"bayesian_ridge": "CLIP_Ridge_Regression", "head": "DenseNet121"}
_GROUP_NAMES = {"genesis": "Genesis", "dream": "Surrogate Dream"}

REPORT_BINS = 20
REPORT_RANGE = (0.0, 1.0)


class EvaluationError(ValueError):
    """Raised for degenerate inputs or misaligned predictions."""


def _as_finite_vector(values: Sequence[float] | np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise EvaluationError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{name} contains non-finite values")
    return arr


def rank_average(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Fractional ranks 1..n; ties get the mean of the positions they occupy."""
    arr = _as_finite_vector(values, "values")
    n = arr.shape[0]
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Pearson correlation of fractional ranks.

    Constant inputs are an error rather than 0: a silently zero correlation
    would hide a degenerate model.
    """
    va = _as_finite_vector(a, "a")
    vb = _as_finite_vector(b, "b")
    if va.shape[0] != vb.shape[0]:
        raise EvaluationError(f"length mismatch: {va.shape[0]} vs {vb.shape[0]}")
    if va.shape[0] < 2:
        raise EvaluationError(f"need at least 2 items, got {va.shape[0]}")
    for name, v in (("a", va), ("b", vb)):
        if np.all(v == v[0]):
            raise EvaluationError(f"undefined correlation: vector {name} is constant")
    ra = rank_average(va) - (va.shape[0] + 1) / 2.0
    rb = rank_average(vb) - (vb.shape[0] + 1) / 2.0
    return float(ra @ rb / math.sqrt((ra @ ra) * (rb @ rb)))


def skewness(values: Sequence[float] | np.ndarray) -> float:
    """Fisher-Pearson adjusted sample skewness G1."""
    arr = _as_finite_vector(values, "values")
    n = arr.shape[0]
    if n < 3:
        raise EvaluationError(f"skewness needs at least 3 values, got {n}")
    centered = arr - arr.mean()
    m2 = float(np.mean(centered**2))
    if m2 == 0.0:
        raise EvaluationError("skewness undefined for zero-variance values")
    m3 = float(np.mean(centered**3))
    return math.sqrt(n * (n - 1)) / (n - 2) * m3 / m2**1.5


@dataclass(frozen=True)
class Histogram:
    counts: tuple[int, ...]
    lo: float
    hi: float
    underflow: int
    overflow: int

    @property
    def total(self) -> int:
        return sum(self.counts) + self.underflow + self.overflow


def histogram(values: Sequence[float] | np.ndarray, bins: int, range_: tuple[float, float]) -> Histogram:
    """Half-open bins [lo + i*w, lo + (i+1)*w), last bin closed at hi;
    out-of-range values land in the underflow/overflow side counts."""
    lo, hi = range_
    if bins < 1:
        raise EvaluationError(f"bins must be >= 1, got {bins}")
    if not lo < hi:
        raise EvaluationError(f"invalid range: lo {lo} must be < hi {hi}")
    arr = _as_finite_vector(values, "values")
    under = int(np.count_nonzero(arr < lo))
    over = int(np.count_nonzero(arr > hi))
    in_range = arr[(arr >= lo) & (arr <= hi)]
    width = (hi - lo) / bins
    idx = np.minimum(np.floor((in_range - lo) / width).astype(np.intp), bins - 1)
    counts = np.bincount(idx, minlength=bins) if in_range.size else np.zeros(bins, dtype=np.intp)
    return Histogram(counts=tuple(int(c) for c in counts), lo=lo, hi=hi, underflow=under, overflow=over)


def render_run_name(model_kind: str, trained_on: str, tested_on: str) -> str:
    if model_kind not in MODEL_KINDS:
        raise EvaluationError(f"unknown model kind {model_kind!r}")
    for domain in (trained_on, tested_on):
        if domain not in DOMAINS:
            raise EvaluationError(f"unknown domain {domain!r}")
    return f"{_DOMAIN_LABELS[trained_on]}_{_MODEL_LABELS[model_kind]}_{_DOMAIN_LABELS[tested_on]}"


@dataclass(frozen=True)
class FeatureSource:
    """Which images feed one side of a run: the domain plus the frame mode
    ("stacked" first/middle/last, "middle" only, or the "single" surrogate)."""

    domain: str
    frames: str

    def __post_init__(self) -> None:
        if self.domain not in DOMAINS:
            raise EvaluationError(f"unknown domain {self.domain!r}")
        if self.frames not in FRAME_MODES:
            raise EvaluationError(f"unknown frame mode {self.frames!r}")
        if self.domain == "dream" and self.frames != "single":
            raise EvaluationError("dream features come from the one surrogate image")
        if self.domain == "genesis" and self.frames == "single":
            raise EvaluationError("genesis features are 'stacked' or 'middle', not 'single'")

    @property
    def key(self) -> str:
        return f"{self.domain}_{self.frames}"


@dataclass(frozen=True)
class RunSpec:
    model_kind: str
    trained_on: str
    tested_on: str
    train_features: FeatureSource
    test_features: FeatureSource
    run_name: str

    def __post_init__(self) -> None:
        expected = render_run_name(self.model_kind, self.trained_on, self.tested_on)
        if self.run_name != expected:
            raise EvaluationError(f"run name {self.run_name!r} does not match domains (expected {expected!r})")
        if self.train_features.domain != self.trained_on or self.test_features.domain != self.tested_on:
            raise EvaluationError(f"feature sources of {self.run_name!r} disagree with its domains")

    @property
    def group(self) -> str:
        return _GROUP_NAMES[self.trained_on]


def make_run_spec(
    model_kind: str,
    trained_on: str,
    tested_on: str,
    train_frames: str | None = None,
    test_frames: str | None = None,
) -> RunSpec:
    """Build a RunSpec with the conventional frame modes: dream sides use the
    single surrogate image; genesis sides default to stacked for the ridge
    and middle-frame for the head."""
    def default_frames(domain: str) -> str:
        if domain == "dream":
            return "single"
        return "stacked" if model_kind == "bayesian_ridge" else "middle"

    return RunSpec(
        model_kind=model_kind,
        trained_on=trained_on,
        tested_on=tested_on,
        train_features=FeatureSource(trained_on, train_frames or default_frames(trained_on)),
        test_features=FeatureSource(tested_on, test_frames or default_frames(tested_on)),
        run_name=render_run_name(model_kind, trained_on, tested_on),
    )


@dataclass(frozen=True)
class RunResult:
    run_name: str
    group: str
    spearman: float
    n_items: int
    skewness: float
    histogram: Histogram
    predictions: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        if self.histogram.total != self.n_items:
            raise EvaluationError(
                f"histogram accounts for {self.histogram.total} items, expected {self.n_items}"
            )

    def to_json(self) -> dict:
        return {
            "run_name": self.run_name,
            "group": self.group,
            "spearman": self.spearman,
            "n_items": self.n_items,
            "skewness": self.skewness,
            "histogram": {
                "counts": list(self.histogram.counts),
                "lo": self.histogram.lo,
                "hi": self.histogram.hi,
                "underflow": self.histogram.underflow,
                "overflow": self.histogram.overflow,
            },
            "predictions": [[vid, p] for vid, p in self.predictions],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunResult":
        h = obj["histogram"]
        return cls(
            run_name=obj["run_name"],
            group=obj["group"],
            spearman=float(obj["spearman"]),
            n_items=int(obj["n_items"]),
            skewness=float(obj["skewness"]),
            histogram=Histogram(
                counts=tuple(int(c) for c in h["counts"]),
                lo=float(h["lo"]),
                hi=float(h["hi"]),
                underflow=int(h["underflow"]),
                overflow=int(h["overflow"]),
            ),
            predictions=tuple((str(v), float(p)) for v, p in obj["predictions"]),
        )


def evaluate_run(
    spec: RunSpec,
    predictions: Mapping[str, float],
    ground_truth: Mapping[str, float | None],
) -> RunResult:
    """Score one run: Spearman against ground truth, plus the prediction
    histogram and skewness. Predictions and truth must cover the same ids."""
    pred_ids = set(predictions)
    truth_ids = set(ground_truth)
    if pred_ids != truth_ids:
        missing = sorted(truth_ids - pred_ids)[:5]
        extra = sorted(pred_ids - truth_ids)[:5]
        raise EvaluationError(f"prediction ids misaligned with ground truth: missing {missing}, extra {extra}")
    absent = sorted(vid for vid, score in ground_truth.items() if score is None)
    if absent:
        raise EvaluationError(f"ground truth absent for {len(absent)} items (e.g. {absent[:5]})")
    ids = sorted(predictions)
    pred = np.array([predictions[v] for v in ids], dtype=np.float64)
    truth = np.array([ground_truth[v] for v in ids], dtype=np.float64)
    return RunResult(
        run_name=spec.run_name,
        group=spec.group,
        spearman=spearman(pred, truth),
        n_items=len(ids),
        skewness=skewness(pred),
        histogram=histogram(pred, REPORT_BINS, REPORT_RANGE),
        predictions=tuple(zip(ids, (float(p) for p in pred))),
    )


def emit_results_table(results: Sequence[RunResult]) -> str:
    """Text table grouped Genesis first, then Surrogate Dream, sorted by run
    name within each group; Spearman printed to 3 decimals."""
    if not results:
        raise EvaluationError("no results to tabulate")
    group_order = {_GROUP_NAMES["genesis"]: 0, _GROUP_NAMES["dream"]: 1}
    rows = sorted(results, key=lambda r: (group_order[r.group], r.run_name))
    name_w = max(len("Run Name"), max(len(r.run_name) for r in rows))
    group_w = max(len("Approach"), max(len(r.group) for r in rows))
    lines = [
        f"{'Approach':<{group_w}}  {'Run Name':<{name_w}}  Spearman",
        f"{'-' * group_w}  {'-' * name_w}  --------",
    ]
    for r in rows:
        lines.append(f"{r.group:<{group_w}}  {r.run_name:<{name_w}}  {r.spearman:>8.3f}")
    return "\n".join(lines) + "\n"


# The five submitted runs. Cross-domain head runs pair the genesis middle
# frame with the single surrogate image so both sides share one embedding
# dimension; the in-domain ridge run keeps the stacked three-frame features.
PAPER_RUNS: tuple[RunSpec, ...] = (
    make_run_spec("head", "genesis", "dream"),
    make_run_spec("head", "genesis", "genesis"),
    make_run_spec("bayesian_ridge", "genesis", "genesis"),
    make_run_spec("head", "dream", "genesis"),
    make_run_spec("head", "dream", "dream"),
)

# Fixture-only additions: the ridge analogues the concept-transfer harness
# scores. The genesis-to-dream ridge trains on middle-frame features to match
# the surrogate side's dimension.
EXTRA_RUNS: tuple[RunSpec, ...] = (
    make_run_spec("bayesian_ridge", "dream", "dream"),
    make_run_spec("bayesian_ridge", "genesis", "dream", train_frames="middle"),
)

RUN_REGISTRY: dict[str, RunSpec] = {spec.run_name: spec for spec in PAPER_RUNS + EXTRA_RUNS}
