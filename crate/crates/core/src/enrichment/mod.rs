//! Title-guided visual enrichment: prompts, endpoint calls, caching, and
//! encoding of descriptions and item text into feature tables.

pub mod cache;
pub mod features;
pub mod prompt;
pub mod text_encoder;
pub mod vlm;

pub use cache::{CacheKey, Description, EnrichmentCache};
pub use features::{
    build_feature_tables, build_textual_table, build_visual_table, textual_input, EntityKind, FeatureTable,
    Modality,
};
pub use prompt::{build_prompt, extract_description, PromptSpec};
pub use text_encoder::{HashingEncoder, HttpEmbeddingEncoder, TextEncoder};
pub use vlm::{
    describe_item, enrich_items, ChatCompletionClient, EndpointConfig, EnrichFailure, EnrichJob, EnrichOptions,
    EnrichReport, ImageLoader, ItemInput, RetryPolicy, VisionLanguageModel,
};
