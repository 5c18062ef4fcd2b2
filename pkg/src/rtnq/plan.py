"""Selective precision plans.

A plan picks some layers (first, middle or last ``X`` of them, or an explicit
list) and, inside those layers, a subset of the four linear modules.  Picked
``(layer, module)`` slots are quantized to ``high`` bits, everything else to
``base`` bits.

Plan text::

    <first|middle|last>:<X> [modules:<m(+m)*>|all|none] [base:<b>] [high:<b>]
    layers:<i(,i)*>         [modules:...] [base:<b>] [high:<b>]

``modules`` defaults to all four.  ``render_plan`` always writes every field,
and that full form is the canonical text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

from rtnq.errors import InvalidPlanError, PlanSyntaxError
from rtnq.manifest import MODULES, ModelManifest, ModuleId
from rtnq.quant import SUPPORTED_BITS, num_groups

SCALE_BITS = 16


class HorizontalKind(str, Enum):
    FIRST = "first"
    MIDDLE = "middle"
    LAST = "last"
    EXPLICIT = "layers"


@dataclass(frozen=True)
class HorizontalStrategy:
    kind: HorizontalKind
    x: int = 0
    layers: tuple[int, ...] = ()

    def select(self, n: int) -> list[int]:
        if self.kind is HorizontalKind.EXPLICIT:
            bad = [i for i in self.layers if not 0 <= i < n]
            if bad:
                raise InvalidPlanError(f"layer indices {bad} outside a {n}-layer model")
            return sorted(set(self.layers))
        if not 0 <= self.x <= n:
            raise InvalidPlanError(f"cannot select {self.x} layers from a {n}-layer model")
        if self.kind is HorizontalKind.FIRST:
            return list(range(self.x))
        if self.kind is HorizontalKind.LAST:
            return list(range(n - self.x, n))
        start = (n - self.x) // 2
        return list(range(start, start + self.x))


@dataclass(frozen=True)
class SelectionPlan:
    horizontal: HorizontalStrategy
    modules: frozenset = frozenset(MODULES)
    base_bits: int = 4
    high_bits: int = 8

    def __post_init__(self):
        object.__setattr__(self, "modules", frozenset(ModuleId(m) for m in self.modules))
        if self.base_bits not in SUPPORTED_BITS or self.high_bits not in SUPPORTED_BITS:
            raise InvalidPlanError(f"bit widths must be in {SUPPORTED_BITS}")
        if self.high_bits <= self.base_bits:
            raise InvalidPlanError(f"high bits ({self.high_bits}) must exceed base bits ({self.base_bits})")

    def __str__(self):
        return render_plan(self)


def uniform_plan(bits: int, layers: int) -> SelectionPlan:
    """Plan that puts every slot of an ``layers``-layer model at ``bits``."""
    if bits == 4:
        return SelectionPlan(HorizontalStrategy(HorizontalKind.FIRST, 0))
    return SelectionPlan(HorizontalStrategy(HorizontalKind.FIRST, layers))


def mask_label(modules) -> str:
    ids = sorted(int(m) for m in modules)
    return "+".join(map(str, ids)) if ids else "none"


def render_plan(plan: SelectionPlan) -> str:
    h = plan.horizontal
    if h.kind is HorizontalKind.EXPLICIT:
        head = "layers:" + ",".join(map(str, sorted(set(h.layers))))
    else:
        head = f"{h.kind.value}:{h.x}"
    return f"{head} modules:{mask_label(plan.modules)} base:{plan.base_bits} high:{plan.high_bits}"


_TOKEN = re.compile(r"\S+")
_INT = re.compile(r"[+-]?\d+\Z")


def _byte_offset(text: str, i: int) -> int:
    return len(text[:i].encode("utf-8"))


def parse_plan(text: str) -> SelectionPlan:
    """Parse plan text; errors carry the byte offset of the offending token."""

    def fail(msg, i):
        raise PlanSyntaxError(msg, _byte_offset(text, i), text)

    def integer(s, i, what):
        if not _INT.match(s):
            fail(f"malformed integer {s!r} for {what}", i)
        return int(s)

    horizontal = None
    modules = None
    bits = {}
    bit_offsets = {}
    seen = set()
    for tok in _TOKEN.finditer(text):
        word, i = tok.group(), tok.start()
        key, sep, val = word.partition(":")
        vi = i + len(key) + 1
        if not sep:
            fail(f"expected <key>:<value>, got {word!r}", i)
        if key in seen or (key in {"first", "middle", "last", "layers"} and horizontal is not None):
            fail(f"duplicate field {key!r}", i)
        seen.add(key)
        if key in ("first", "middle", "last"):
            x = integer(val, vi, "layer count")
            if x < 0:
                fail(f"layer count must be non-negative, got {x}", vi)
            horizontal = HorizontalStrategy(HorizontalKind(key), x)
        elif key == "layers":
            idx = []
            pos = vi
            for part in val.split(","):
                n = integer(part, pos, "layer index")
                if n < 0:
                    fail(f"layer index must be non-negative, got {n}", pos)
                idx.append(n)
                pos += len(part) + 1
            horizontal = HorizontalStrategy(HorizontalKind.EXPLICIT, len(set(idx)), tuple(sorted(set(idx))))
        elif key == "modules":
            if val == "all":
                modules = set(MODULES)
            elif val == "none":
                modules = set()
            else:
                modules = set()
                pos = vi
                for part in val.split("+"):
                    if not part:
                        fail("empty module id", pos)
                    m = integer(part, pos, "module id")
                    if m not in (1, 2, 3, 4):
                        fail(f"unknown module id {part!r} (expected 1-4)", pos)
                    modules.add(ModuleId(m))
                    pos += len(part) + 1
        elif key in ("base", "high"):
            b = integer(val, vi, f"{key} bits")
            if b not in SUPPORTED_BITS:
                fail(f"{key} bits must be one of {SUPPORTED_BITS}, got {b}", vi)
            bits[key] = b
            bit_offsets[key] = vi
        else:
            fail(f"unknown field {key!r}", i)
    if horizontal is None:
        fail("missing layer selection (first:X, middle:X, last:X or layers:i,j)", len(text))
    base, high = bits.get("base", 4), bits.get("high", 8)
    if high <= base:
        fail(f"high bits ({high}) must exceed base bits ({base})", bit_offsets.get("high", bit_offsets.get("base", 0)))
    return SelectionPlan(horizontal, frozenset(MODULES) if modules is None else frozenset(modules), base, high)


def as_plan(plan) -> SelectionPlan:
    return parse_plan(plan) if isinstance(plan, str) else plan


@dataclass(frozen=True)
class PrecisionAssignment:
    """Bit width for every ``(layer, module)`` slot of an ``n``-layer model."""

    layers: int
    bits: dict  # (layer, ModuleId) -> int
    plan: SelectionPlan | None = None

    def __getitem__(self, key) -> int:
        layer, module = key
        return self.bits[(layer, ModuleId(module))]

    def count(self, bits: int) -> int:
        return sum(1 for b in self.bits.values() if b == bits)

    def high_slots(self) -> set:
        high = self.plan.high_bits if self.plan else max(self.bits.values())
        return {k for k, b in self.bits.items() if b == high}

    def __len__(self):
        return len(self.bits)


def resolve_plan(plan, layers: int) -> PrecisionAssignment:
    plan = as_plan(plan)
    if layers < 1:
        raise InvalidPlanError(f"model must have at least one layer, got {layers}")
    chosen = set(plan.horizontal.select(layers))
    bits = {
        (layer, m): plan.high_bits if layer in chosen and m in plan.modules else plan.base_bits
        for layer in range(layers)
        for m in MODULES
    }
    return PrecisionAssignment(layers, bits, plan)


def assignment_from_slots(layers: int, high_slots, base_bits: int = 4, high_bits: int = 8) -> PrecisionAssignment:
    """Assignment with ``high_bits`` on an arbitrary set of ``(layer, module)`` slots."""
    high = {(int(layer), ModuleId(m)) for layer, m in high_slots}
    bits = {
        (layer, m): high_bits if (layer, m) in high else base_bits
        for layer in range(layers)
        for m in MODULES
    }
    return PrecisionAssignment(layers, bits)


def effective_bits_exact(assign: PrecisionAssignment, manifest: ModelManifest, include_scales: bool = False) -> Fraction:
    if assign.layers != manifest.layer_count:
        raise InvalidPlanError(
            f"assignment covers {assign.layers} layers, manifest has {manifest.layer_count}"
        )
    weighted = 0
    scale_bits = 0
    for (layer, m), b in assign.bits.items():
        rows, cols = manifest.shape(m)
        weighted += b * rows * cols
        if include_scales:
            g = min(manifest.group, cols)
            scale_bits += SCALE_BITS * rows * num_groups(cols, g)
    return Fraction(weighted + scale_bits, manifest.total_params)


def effective_bits(assign: PrecisionAssignment, manifest: ModelManifest, include_scales: bool = False) -> float:
    """Parameter-weighted mean bit width; optionally adds 16-bit scale storage."""
    return float(effective_bits_exact(assign, manifest, include_scales))
