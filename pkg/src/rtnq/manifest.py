"""Transformer topology: layer count and the four linear-module shapes."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

from rtnq.errors import InvalidShapeError
from rtnq.quant import DEFAULT_GROUP, ROW_MAJOR, LayoutTag


class ModuleId(IntEnum):
    """The four linear modules of a layer, numbered as in the usual '1+3+4' notation."""

    QKV = 1
    ATTN_OUT = 2
    FFN_UP = 3  # fused gate and up projections
    FFN_DOWN = 4


MODULES = tuple(ModuleId)


@dataclass(frozen=True)
class ModelManifest:
    """Layer count plus one ``(rows, cols)`` shape per module role.

    ``rows`` is the output dimension and ``cols`` the input dimension of the
    weight, so a module holds ``rows * cols`` parameters in every layer.
    """

    name: str
    layer_count: int
    shapes: dict  # ModuleId -> (rows, cols)
    group: int = DEFAULT_GROUP
    plan: str | None = None
    layout: LayoutTag = field(default=ROW_MAJOR)
    config: dict | None = None

    def __post_init__(self):
        if self.layer_count < 1:
            raise InvalidShapeError(f"a model needs at least one layer, got {self.layer_count}")
        missing = [m for m in MODULES if m not in self.shapes]
        if missing:
            raise InvalidShapeError(f"manifest lacks module shapes for {[int(m) for m in missing]}")
        for m, (r, c) in self.shapes.items():
            if r < 1 or c < 1:
                raise InvalidShapeError(f"module {int(m)} has empty shape {(r, c)}")
        object.__setattr__(self, "shapes", {ModuleId(m): (int(r), int(c)) for m, (r, c) in self.shapes.items()})

    def shape(self, module) -> tuple[int, int]:
        return self.shapes[ModuleId(module)]

    def params(self, module) -> int:
        r, c = self.shape(module)
        return r * c

    @property
    def params_per_layer(self) -> int:
        return sum(self.params(m) for m in MODULES)

    @property
    def total_params(self) -> int:
        return self.layer_count * self.params_per_layer

    def keys(self):
        """All ``(layer, module)`` pairs in canonical (layer-major) order."""
        return [(layer, m) for layer in range(self.layer_count) for m in MODULES]

    def with_(self, **changes) -> "ModelManifest":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layer_count": self.layer_count,
            "modules": {str(int(m)): list(self.shapes[m]) for m in MODULES},
            "group": self.group,
            "plan": self.plan,
            "layout": self.layout.to_dict(),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelManifest":
        return cls(
            name=d["name"],
            layer_count=int(d["layer_count"]),
            shapes={ModuleId(int(k)): tuple(v) for k, v in d["modules"].items()},
            group=int(d.get("group", DEFAULT_GROUP)),
            plan=d.get("plan"),
            layout=LayoutTag.from_dict(d.get("layout", {"kind": "row_major"})),
            config=d.get("config"),
        )


def llama_shapes(hidden: int, intermediate: int, kv_width: int) -> dict:
    """Module shapes of a Llama-style layer with grouped KV projections."""
    return {
        ModuleId.QKV: (hidden + 2 * kv_width, hidden),
        ModuleId.ATTN_OUT: (hidden, hidden),
        ModuleId.FFN_UP: (2 * intermediate, hidden),
        ModuleId.FFN_DOWN: (hidden, intermediate),
    }


def llama70b_manifest() -> ModelManifest:
    """80 layers, hidden 8192, intermediate 28672, 8 KV heads of width 128."""
    return ModelManifest("llama-70b-shaped", 80, llama_shapes(8192, 28672, 1024))


def uniform_manifest(layers: int, rows: int = 64, cols: int = 64, name: str = "uniform") -> ModelManifest:
    return ModelManifest(name, layers, {m: (rows, cols) for m in MODULES})
