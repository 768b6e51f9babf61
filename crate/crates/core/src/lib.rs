//! Executable prompt taxonomy: parse tag-annotated prompts into structural,
//! semantic and syntactic components, profile prompt corpora, perturb
//! prompts, and run scored sensitivity and refinement experiments.

pub mod evalkit;
pub mod llm_gateway;
pub mod perturb;
pub mod profiler;
pub mod prompt_model;
pub mod syntax;
pub mod taxonomy;

pub use evalkit::{one_way_anova, rouge_l, AnovaResult, EvalError, ExperimentReport, TaskBundle};
pub use llm_gateway::{ChatBackend, ChatRequest, Gateway, GatewayConfig, GatewayError, MockBackend, Strategy};
pub use perturb::{
    delete_component, insert_component, modify_delimiter, reorder_component, DelimiterPosition, PerturbError,
    PerturbationSpec, ReorderPosition,
};
pub use profiler::{DatasetProfile, Profiler, ReportFormat};
pub use prompt_model::{
    parse_annotated, parse_lenient, serialize, terminal_user_view, AnnotatedMessage, AnnotatedPrompt, Component,
    ComponentIndex, Message, ParseError, Prompt, Span,
};
pub use syntax::{analyze_delimiter, annotate_markers, DelimiterInfo, DelimiterKind, MarkerProfile, SyntaxAnalyzer};
pub use taxonomy::{Role, TagPath, TagRegistry, TaxonomyError};
