"""Fine-grained group quantization with integer (amplified) scales for W4A8 GEMM."""

from intscale.gemm import (
    DualQuantWeight,
    GemmPath,
    GemmResult,
    KernelStats,
    dual_quantize,
    gemm_coarse,
    gemm_dual_quant,
    gemm_float_scale,
    gemm_integer_scale,
    gemm_oracle,
    run_layer,
)
from intscale.integer_scale import (
    IntegerScaleSet,
    ScaleAnalysis,
    analyze_scales,
    default_amplifier,
    integerize_scales,
    search_amplifier,
)
from intscale.overflow import OverflowReport, overflow_analyzer
from intscale.quantizer import (
    Granularity,
    QuantizedTensor,
    QuantParams,
    dequantize,
    quantize,
    reconstruction_mse,
)
from intscale.report import emit_report, run_ablation, run_bench
from intscale.tensor_io import FloatTensor, QuantizedPayload, generate_synthetic, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "DualQuantWeight",
    "GemmPath",
    "GemmResult",
    "KernelStats",
    "dual_quantize",
    "gemm_coarse",
    "gemm_dual_quant",
    "gemm_float_scale",
    "gemm_integer_scale",
    "gemm_oracle",
    "run_layer",
    "IntegerScaleSet",
    "ScaleAnalysis",
    "analyze_scales",
    "default_amplifier",
    "integerize_scales",
    "search_amplifier",
    "OverflowReport",
    "overflow_analyzer",
    "Granularity",
    "QuantizedTensor",
    "QuantParams",
    "dequantize",
    "quantize",
    "reconstruction_mse",
    "emit_report",
    "run_ablation",
    "run_bench",
    "FloatTensor",
    "QuantizedPayload",
    "generate_synthetic",
    "read_tensor",
    "write_tensor",
]
