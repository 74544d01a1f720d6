"""Python bindings for the dynfuse two-stream fusion engine."""

from ._dynfuse import (
    conv2d,
    evaluate_pr_sr,
    format_millions,
    gradcheck,
    iou,
    layer_multadds,
    merge_kernels,
    reference_cost_report,
    run_cli,
)

__all__ = [
    "conv2d",
    "evaluate_pr_sr",
    "format_millions",
    "gradcheck",
    "iou",
    "layer_multadds",
    "merge_kernels",
    "reference_cost_report",
    "run_cli",
]
