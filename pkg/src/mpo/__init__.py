"""Modular prompt optimization.

A prompt is held as five fixed sections (system role, context, task,
constraints, output format). Each refinement iteration critiques every
section against the whole prompt, applies the resulting directives to that
section alone, and de-duplicates, so improvements stay local and the
structure never drifts. A record/replay layer makes whole runs reproducible
without model access, and the evaluation harness scores prompts on
multiple-choice benchmarks by exact match.
"""

from .backends import (
    BackendError,
    ChatTurn,
    CriticBackend,
    GenerationParams,
    HTTPBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayMiss,
    ScriptedBackend,
    Transcript,
    TranscriptEntry,
    request_digest,
)
from .critic import (
    ConsolidationRejected,
    TextualGradient,
    consolidate,
    parse_directives,
    request_gradient,
)
from .evaluation import (
    Comparison,
    Dataset,
    DatasetError,
    DatasetMismatch,
    DuplicateId,
    EvalResult,
    EvaluationAborted,
    FormatError,
    ItemRecord,
    MCQItem,
    MissingAnswerKey,
    compare,
    evaluate,
    extract_answer,
    load_dataset,
    pose_question,
    sample_items,
)
from .mocks import HeadingRuleExtractor, MockCritic, MockSolver
from .optimizer import (
    DedupMode,
    GrowthReport,
    OptimizationAborted,
    OptimizerConfig,
    RunHistory,
    StepResult,
    TargetMismatch,
    apply_gradient,
    baseline_global_step,
    duplicate_line_count,
    growth_metrics,
    lexical_dedup,
    normalize_line,
    optimize,
    step,
)
from .schema import (
    CANONICAL_ORDER,
    DiffReport,
    DuplicateSectionTag,
    EmptyInput,
    ExtractorFailure,
    MalformedTag,
    PromptState,
    Provenance,
    SchemaError,
    Section,
    SectionDiff,
    SectionKind,
    TagCollision,
    UntaggedLeadingContent,
    decompose_unstructured,
    diff_states,
    parse_structured_prompt,
    render_prompt,
    section_context,
    strip_code_fences,
    strip_tag_strings,
    token_count,
    vocabulary_violations,
)
from .templating import PromptTemplate, default_template, load_template

__all__ = [
    "BackendError",
    "CANONICAL_ORDER",
    "ChatTurn",
    "Comparison",
    "ConsolidationRejected",
    "CriticBackend",
    "Dataset",
    "DatasetError",
    "DatasetMismatch",
    "DedupMode",
    "DiffReport",
    "DuplicateId",
    "DuplicateSectionTag",
    "EmptyInput",
    "EvalResult",
    "EvaluationAborted",
    "ExtractorFailure",
    "FormatError",
    "GenerationParams",
    "GrowthReport",
    "HTTPBackend",
    "HeadingRuleExtractor",
    "ItemRecord",
    "MCQItem",
    "MalformedTag",
    "MissingAnswerKey",
    "MockCritic",
    "MockSolver",
    "OptimizationAborted",
    "OptimizerConfig",
    "PromptState",
    "PromptTemplate",
    "Provenance",
    "RecordingBackend",
    "ReplayBackend",
    "ReplayMiss",
    "RunHistory",
    "SchemaError",
    "ScriptedBackend",
    "Section",
    "SectionDiff",
    "SectionKind",
    "StepResult",
    "TagCollision",
    "TargetMismatch",
    "TextualGradient",
    "Transcript",
    "TranscriptEntry",
    "UntaggedLeadingContent",
    "apply_gradient",
    "baseline_global_step",
    "compare",
    "consolidate",
    "decompose_unstructured",
    "default_template",
    "diff_states",
    "duplicate_line_count",
    "evaluate",
    "extract_answer",
    "growth_metrics",
    "lexical_dedup",
    "load_dataset",
    "load_template",
    "normalize_line",
    "optimize",
    "parse_directives",
    "parse_structured_prompt",
    "pose_question",
    "render_prompt",
    "request_digest",
    "request_gradient",
    "sample_items",
    "section_context",
    "step",
    "strip_code_fences",
    "strip_tag_strings",
    "token_count",
    "vocabulary_violations",
]
