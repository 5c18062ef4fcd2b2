"""A small deterministic Llama-style transformer used to measure quantization damage.

Each layer: RMS norm -> QKV projection -> causal softmax attention (grouped KV
heads allowed) -> output projection + residual -> RMS norm -> fused gate/up
projection -> SiLU gating -> down projection + residual.  A final RMS norm
produces the ``(seq, dim)`` output treated as logits.  There are no
embeddings, positional encodings or norm gains.

Randomness is numpy's PCG64 generator.  Weights come from
``default_rng([seed, 0])``, drawn as standard normals scaled by
``1/sqrt(fan_in)`` in layer-major, module 1..4 order.  Inputs come from the
separate stream ``default_rng([seed, 1])``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from rtnq.errors import InvalidShapeError
from rtnq.gemm import DEFAULT_THRESHOLD, gemm_auto
from rtnq.manifest import ModelManifest, ModuleId, llama_shapes
from rtnq.quant import DEFAULT_GROUP
from rtnq.store import Model, write_checkpoint

RMS_EPS = 1e-5


@dataclass(frozen=True)
class ToyTransformerConfig:
    layers: int = 8
    dim: int = 64
    heads: int = 4
    ffn: int = 256
    seq: int = 32
    seed: int = 0
    kv_heads: int | None = None

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1 or self.ffn < 1 or self.seq < 1:
            raise InvalidShapeError(f"invalid toy config {self}")
        if self.heads < 1 or self.dim % self.heads:
            raise InvalidShapeError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.heads % self.n_kv_heads:
            raise InvalidShapeError(f"heads {self.heads} not divisible by kv_heads {self.n_kv_heads}")

    @property
    def n_kv_heads(self) -> int:
        return self.kv_heads or self.heads

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyTransformerConfig":
        return cls(**d)


PRESETS = {
    "toy": ToyTransformerConfig(),
    # Llama-70B proportions at 1/128 width: every module keeps its share of the parameters.
    "llama70b-mini": ToyTransformerConfig(layers=80, dim=64, heads=8, kv_heads=1, ffn=224),
}


def manifest_for_config(cfg: ToyTransformerConfig, name: str = "toy", group: int = DEFAULT_GROUP) -> ModelManifest:
    shapes = llama_shapes(cfg.dim, cfg.ffn, cfg.n_kv_heads * cfg.head_dim)
    return ModelManifest(name, cfg.layers, shapes, group=group, config=cfg.to_dict())


def config_of(model: Model) -> ToyTransformerConfig:
    if not model.manifest.config:
        raise InvalidShapeError(f"model {model.manifest.name!r} carries no toy-transformer config")
    return ToyTransformerConfig.from_dict(model.manifest.config)


def synthetic_model(cfg: ToyTransformerConfig, seed: int | None = None, name: str = "toy",
                    group: int = DEFAULT_GROUP) -> Model:
    seed = cfg.seed if seed is None else seed
    if seed != cfg.seed:
        cfg = ToyTransformerConfig(**{**cfg.to_dict(), "seed": seed})
    manifest = manifest_for_config(cfg, name, group)
    rng = np.random.default_rng([seed, 0])
    weights = {}
    for key in manifest.keys():
        rows, cols = manifest.shape(key[1])
        w = rng.standard_normal((rows, cols), dtype=np.float32)
        w *= np.float32(1.0 / np.sqrt(cols))
        weights[key] = w
    return Model(manifest, weights)


def gen_synthetic_checkpoint(cfg: ToyTransformerConfig, seed: int | None, path, name: str = "toy",
                             group: int = DEFAULT_GROUP) -> Path:
    model = synthetic_model(cfg, seed, name, group)
    return write_checkpoint(model.manifest, model.weights, path)


def make_inputs(cfg: ToyTransformerConfig, count: int = 4, seed: int | None = None) -> list[np.ndarray]:
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
    return [rng.standard_normal((cfg.seq, cfg.dim), dtype=np.float32) for _ in range(count)]


def rms_norm(x: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(RMS_EPS))).astype(np.float32)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (np.float32(1.0) + np.exp(-x))


def linear(x: np.ndarray, w, threshold: int = DEFAULT_THRESHOLD, log: list | None = None) -> np.ndarray:
    if isinstance(w, np.ndarray):
        return x @ w.T
    return gemm_auto(x, w, threshold, log)


def toy_forward(model: Model, x, threshold: int = DEFAULT_THRESHOLD, causal: bool = True,
                log: list | None = None) -> np.ndarray:
    """Run the model on one ``(seq, dim)`` input and return ``(seq, dim)`` logits."""
    cfg = config_of(model)
    h = np.asarray(x, dtype=np.float32)
    s, d = h.shape
    if d != cfg.dim:
        raise InvalidShapeError(f"input width {d} != model dim {cfg.dim}")
    nh, nkv, hd = cfg.heads, cfg.n_kv_heads, cfg.head_dim
    kvw = nkv * hd
    mask = np.triu(np.ones((s, s), dtype=bool), 1) if causal else None
    inv_sqrt = np.float32(1.0 / np.sqrt(hd))
    for layer in range(cfg.layers):
        qkv = linear(rms_norm(h), model.weight(layer, ModuleId.QKV), threshold, log)
        q = qkv[:, :d].reshape(s, nh, hd).transpose(1, 0, 2)
        k = qkv[:, d : d + kvw].reshape(s, nkv, hd).transpose(1, 0, 2)
        v = qkv[:, d + kvw :].reshape(s, nkv, hd).transpose(1, 0, 2)
        if nkv != nh:
            k = np.repeat(k, nh // nkv, axis=0)
            v = np.repeat(v, nh // nkv, axis=0)
        scores = (q @ k.transpose(0, 2, 1)) * inv_sqrt
        if mask is not None:
            scores = np.where(mask, np.float32(-np.inf), scores)
        ctx = (softmax(scores) @ v).transpose(1, 0, 2).reshape(s, d)
        h = h + linear(ctx, model.weight(layer, ModuleId.ATTN_OUT), threshold, log)
        gu = linear(rms_norm(h), model.weight(layer, ModuleId.FFN_UP), threshold, log)
        act = silu(gu[:, : cfg.ffn]) * gu[:, cfg.ffn :]
        h = h + linear(act, model.weight(layer, ModuleId.FFN_DOWN), threshold, log)
    return rms_norm(h)
