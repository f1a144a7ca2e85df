"""Region-targeted cross-attention control for layout-to-image diffusion.

The pieces: region-annotated prompts and mask layouts (`regions`), attention
primitives (`attention`), the control methods themselves (`control`), a small
fully-deterministic diffusion harness to run them end to end (`microdiff`),
a synthetic layout+prompt dataset generator (`simplescenes`), localized
embedding-similarity metrics (`metrics`), and a binary request/response
protocol for driving the kernel from another process (`wire`).
"""

from .attention import (
    MASKED_CUTOFF,
    NEG_BIAS,
    AttentionTensor,
    apply_values,
    attention_logits,
    softmax_rows,
    stable_softmax,
)
from .control import (
    METHODS,
    ControlConfig,
    ControlDiagnostics,
    StepContext,
    apply_control,
    boost_schedule,
    cac_attention,
    dd_attention,
    ediffi_attention,
    redistribute,
)
from .regions import (
    AnnotatedPrompt,
    PromptSpan,
    RegionLayout,
    TokenAlignment,
    build_alignment,
    parse_annotated_prompt,
    rescale_mask,
    whitespace_token_spans,
)

__version__ = "0.1.0"

__all__ = [
    "MASKED_CUTOFF",
    "NEG_BIAS",
    "AttentionTensor",
    "apply_values",
    "attention_logits",
    "softmax_rows",
    "stable_softmax",
    "METHODS",
    "ControlConfig",
    "ControlDiagnostics",
    "StepContext",
    "apply_control",
    "boost_schedule",
    "cac_attention",
    "dd_attention",
    "ediffi_attention",
    "redistribute",
    "AnnotatedPrompt",
    "PromptSpan",
    "RegionLayout",
    "TokenAlignment",
    "build_alignment",
    "parse_annotated_prompt",
    "rescale_mask",
    "whitespace_token_spans",
    "__version__",
]
