"""Frozen reference text encoder, prompts, adapters and task-vector algebra."""

from moder.encoder.adapters import (
    AdapterModule,
    TaskVector,
    Variant,
    VeraBasis,
    combine,
    materialize,
    new_adapter,
    vera_basis,
)
from moder.encoder.model import ADAPTED_LAYERS, EncoderSpec, ReferenceEncoder, encode
from moder.encoder.text import (
    CANONICAL_TEMPLATE,
    DEFAULT_TEMPLATES,
    ClassPrompt,
    PromptTemplate,
    default_templates,
    load_templates,
    render_prompt,
    tokenize,
)

__all__ = [
    "ADAPTED_LAYERS",
    "AdapterModule",
    "CANONICAL_TEMPLATE",
    "ClassPrompt",
    "DEFAULT_TEMPLATES",
    "EncoderSpec",
    "PromptTemplate",
    "ReferenceEncoder",
    "TaskVector",
    "Variant",
    "VeraBasis",
    "combine",
    "default_templates",
    "encode",
    "load_templates",
    "materialize",
    "new_adapter",
    "render_prompt",
    "tokenize",
    "vera_basis",
]
