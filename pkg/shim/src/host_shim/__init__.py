"""Host-side bridge to the attention-control kernel.

Transport and adaptation only — every formula lives on the other side of the
wire.  See ``attach`` for hooking a pipeline's cross-attention up to a
`serve` session, ``tokenizer``/``prompts`` for region-id assignment, and
``embeddings``/``embed_server`` for the evaluator's embedding provider.
"""

from .attach import (
    BoundPipeline,
    ControlSettings,
    HostLayout,
    ProcessorBinding,
    SiteRecord,
    attach,
)
from .client import KernelClient, kernel_command
from .embeddings import real_embedding_provider
from .errors import (
    ConnectionLost,
    KernelStatusError,
    ModelUnavailable,
    ProtocolError,
    PromptSyntaxError,
    ShimError,
    TokenBudgetExceeded,
    UnmappableToken,
)
from .pipeline import PipelineConfig, TinyPipeline
from .tokenizer import map_token_spans, tokenize

__all__ = [
    "BoundPipeline", "ControlSettings", "HostLayout", "ProcessorBinding",
    "SiteRecord", "attach", "KernelClient", "kernel_command",
    "real_embedding_provider", "ConnectionLost", "KernelStatusError",
    "ModelUnavailable", "ProtocolError", "PromptSyntaxError", "ShimError",
    "TokenBudgetExceeded", "UnmappableToken", "PipelineConfig",
    "TinyPipeline", "map_token_spans", "tokenize",
]
