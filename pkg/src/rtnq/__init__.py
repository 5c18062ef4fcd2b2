"""Group-wise round-to-nearest weight quantization with mixed 4/8-bit precision plans."""

from rtnq.bitpack import PackedTensor, pack, pack_tensor, reshuffle, unpack, unpack_tensor
from rtnq.errors import (
    CorruptDataError,
    InsufficientDataError,
    InvalidInputError,
    InvalidPlanError,
    InvalidShapeError,
    PlanError,
    PlanSyntaxError,
    RtnqError,
)
from rtnq.gemm import gemm_auto, gemm_dequant, gemm_fused, gemm_oracle
from rtnq.manifest import ModelManifest, ModuleId, llama70b_manifest
from rtnq.plan import SelectionPlan, effective_bits, parse_plan, render_plan, resolve_plan
from rtnq.quant import QuantTensor, dequantize_tensor, quantize_group, quantize_tensor
from rtnq.store import Model, load_model, load_quantized, quantize_model, read_checkpoint, write_checkpoint

__version__ = "0.1.0"
