"""Accuracy cost of precision plans on the toy transformer.

Logit deviation and softmax KL divergence stand in for perplexity: there is
no tokenizer or corpus, but both grow with output distortion.  Sweeps follow
two recipes: keep ``X`` whole layers (first/middle/last) at high precision, or
keep one of the 16 module subsets at high precision in every layer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from rtnq.errors import InvalidShapeError
from rtnq.gemm import DEFAULT_THRESHOLD
from rtnq.manifest import MODULES
from rtnq.plan import HorizontalKind, HorizontalStrategy, SelectionPlan, mask_label, render_plan, resolve_plan
from rtnq.quant import DEFAULT_GROUP, KERNEL_INTERLEAVED
from rtnq.store import Model, quantize_weight
from rtnq.toy import config_of, make_inputs, toy_forward

CSV_FIELDS = ("strategy", "x_or_mask", "effective_bits", "max_logit_dev", "mean_kl")


@dataclass(frozen=True)
class TensorError:
    max_abs: float
    mse: float
    rel_fro: float


@dataclass
class ErrorReport:
    tensors: dict = field(default_factory=dict)  # (layer, ModuleId) -> TensorError
    max_logit_dev: float = 0.0
    mean_kl: float = 0.0
    plan: str | None = None
    effective_bits: float = 32.0


def tensor_error(ref: np.ndarray, other: np.ndarray) -> TensorError:
    ref = ref.astype(np.float64)
    diff = other.astype(np.float64) - ref
    norm = float(np.linalg.norm(ref))
    err = float(np.linalg.norm(diff))
    return TensorError(
        float(np.max(np.abs(diff))) if diff.size else 0.0,
        float(np.mean(diff * diff)) if diff.size else 0.0,
        err / norm if norm > 0 else err,
    )


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def mean_kl(logits_a: np.ndarray, logits_b: np.ndarray) -> float:
    """Mean over rows of KL(softmax(a) || softmax(b)) at temperature 1."""
    la, lb = _log_softmax(logits_a), _log_softmax(logits_b)
    kl = np.sum(np.exp(la) * (la - lb), axis=-1)
    return float(np.mean(np.maximum(kl, 0.0)))


def compare(model_a: Model, model_b: Model, inputs, threshold: int = DEFAULT_THRESHOLD,
            logits_a: list | None = None) -> ErrorReport:
    """Weight- and output-level error of ``model_b`` against reference ``model_a``.

    ``logits_a`` may carry precomputed reference outputs for ``inputs``.
    """
    ma, mb = model_a.manifest, model_b.manifest
    if ma.layer_count != mb.layer_count or ma.shapes != mb.shapes or ma.config != mb.config:
        raise InvalidShapeError(f"cannot compare {ma.name!r} with differently shaped {mb.name!r}")
    report = ErrorReport(
        plan=mb.plan,
        effective_bits=model_b.effective_bits(),
    )
    for key in ma.keys():
        report.tensors[key] = tensor_error(model_a.dequantized(*key), model_b.dequantized(*key))
    if logits_a is None:
        logits_a = [toy_forward(model_a, x, threshold) for x in inputs]
    devs, kls = [], []
    for x, la in zip(inputs, logits_a):
        lb = toy_forward(model_b, x, threshold)
        devs.append(float(np.max(np.abs(la.astype(np.float64) - lb.astype(np.float64)))))
        kls.append(mean_kl(la, lb))
    report.max_logit_dev = max(devs) if devs else 0.0
    report.mean_kl = float(np.mean(kls)) if kls else 0.0
    return report


class PlanEvaluator:
    """Quantizes each tensor at most once per bit width and scores plans against a float model."""

    def __init__(self, model: Model, inputs=None, group: int = DEFAULT_GROUP, threshold: int = DEFAULT_THRESHOLD,
                 allow_remainder: bool = False):
        self.model = model
        self.group = group
        self.threshold = threshold
        self.allow_remainder = allow_remainder
        self.inputs = make_inputs(config_of(model)) if inputs is None else list(inputs)
        self._cache = {}
        self._ref_logits = [toy_forward(model, x, threshold) for x in self.inputs]

    def _weight(self, key, bits):
        if (key, bits) not in self._cache:
            self._cache[(key, bits)] = quantize_weight(
                self.model.weights[key], bits, self.group, KERNEL_INTERLEAVED, self.allow_remainder
            )
        return self._cache[(key, bits)]

    def quantized(self, plan) -> Model:
        assignment = resolve_plan(plan, self.model.manifest.layer_count)
        weights = {key: self._weight(key, assignment[key]) for key in self.model.manifest.keys()}
        manifest = self.model.manifest.with_(
            group=self.group, layout=KERNEL_INTERLEAVED, plan=render_plan(assignment.plan)
        )
        return Model(manifest, weights, assignment)

    def report(self, plan) -> ErrorReport:
        return compare(self.model, self.quantized(plan), self.inputs, self.threshold, self._ref_logits)


@dataclass(frozen=True)
class SweepRow:
    strategy: str
    label: str
    effective_bits: float
    max_logit_dev: float
    mean_kl: float

    @classmethod
    def from_report(cls, strategy: str, label: str, report: ErrorReport) -> "SweepRow":
        return cls(strategy, label, report.effective_bits, report.max_logit_dev, report.mean_kl)


def horizontal_sweep(evaluator: PlanEvaluator, kind: str = "first", xs=None) -> list[tuple[SweepRow, ErrorReport]]:
    """Keep ``X`` whole layers at 8 bits (rest 4 bits) for every ``X`` in ``xs`` (default 0..n)."""
    kind = HorizontalKind(kind)
    n = evaluator.model.manifest.layer_count
    rows = []
    for x in range(n + 1) if xs is None else xs:
        rep = evaluator.report(SelectionPlan(HorizontalStrategy(kind, x)))
        rows.append((SweepRow.from_report(kind.value, str(x), rep), rep))
    return rows


def all_masks() -> list[frozenset]:
    """The 16 module subsets, ordered by size then lexicographically."""
    return [frozenset(c) for r in range(len(MODULES) + 1) for c in combinations(MODULES, r)]


def vertical_sweep(evaluator: PlanEvaluator) -> list[tuple[SweepRow, ErrorReport]]:
    """Keep a module subset at 8 bits across all layers, for each of the 16 subsets."""
    n = evaluator.model.manifest.layer_count
    rows = []
    for mask in all_masks():
        rep = evaluator.report(SelectionPlan(HorizontalStrategy(HorizontalKind.FIRST, n), mask))
        rows.append((SweepRow.from_report("vertical", mask_label(mask), rep), rep))
    return rows


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in rows:
        if isinstance(row, tuple):
            row = row[0]
        w.writerow([row.strategy, row.label, _fmt(row.effective_bits), _fmt(row.max_logit_dev), _fmt(row.mean_kl)])
    return buf.getvalue()


def read_sweep_csv(text: str) -> list[SweepRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"unexpected sweep CSV header {reader.fieldnames}")
    return [
        SweepRow(r["strategy"], r["x_or_mask"], float(r["effective_bits"]), float(r["max_logit_dev"]), float(r["mean_kl"]))
        for r in reader
    ]
