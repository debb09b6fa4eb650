//! Few-shot classification by prompting a text completion model with
//! interleaved image codes and class labels.

pub mod client;
pub mod codes;
pub mod episode;
pub mod grid;
pub mod prompt;

pub use client::{
    ClientConfig, CompletionBackend, CompletionClient, CompletionError, NearestCodesBackend, RandomLabelBackend,
};
pub use codes::{encode_image_to_codes, CodeSource, MappedCoder, ModelCoder, TableCoder};
pub use episode::{sample_episode, support_len, Episode, SupportItem};
pub use grid::{evaluate_grid, full_product, score_episode, table_columns, GridRecord, GridResults, Renderer, Setting};
pub use prompt::{ascii_baseline_prompt, build_prompt, truncate_codes, PromptDoc, PromptOptions, Segment};
