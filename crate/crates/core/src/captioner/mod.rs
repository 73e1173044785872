//! Caption generation on top of the fused features: projection into a
//! frozen decoder, training of the three trainable groups, and decoding.

pub mod checkpoint;
mod config;
mod decoder;
mod generate;
mod optim;
mod pipeline;
mod projection;
mod prompt;
pub mod synthetic;

pub use config::TrainConfig;
pub use decoder::{CaptionVocab, DecoderConfig, DecoderState, DecoderStub, EOS, UNK};
pub use generate::{beam_search, greedy, Hypothesis};
pub use optim::{AdamW, AdamWConfig, GroupState, LrSchedule};
pub use pipeline::{
    Caption, Captioner, Example, FrozenChecksums, StepReport, TrainableGrads, TrainableSet, TrainingBatch,
    PARAM_GROUPS, VISUAL_ROWS,
};
pub use projection::{ProjectionGrads, ProjectionLayer};
pub use prompt::{assemble_prompt, PromptLayout, PromptTemplate, FEATURE_PLACEHOLDER};

use serde::Serialize;

/// Trainable parameters per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBudget {
    pub image_queries: u64,
    pub name_queries: u64,
    pub projection: u64,
}

impl ParamBudget {
    pub fn new(d_model: u64, p: u64, d_llm: u64) -> Self {
        Self {
            image_queries: VISUAL_ROWS as u64 * d_model,
            name_queries: p * d_model,
            projection: d_model * d_llm + d_llm,
        }
    }

    /// Budget of a model that trains only the projection.
    pub fn projection_only(d_model: u64, d_llm: u64) -> Self {
        Self {
            image_queries: 0,
            ..Self::new(d_model, 0, d_llm)
        }
    }

    pub fn total(&self) -> u64 {
        self.image_queries + self.name_queries + self.projection
    }
}

/// `32 d_model + P d_model + d_model d_llm + d_llm`.
pub fn count_trainable_params(cfg: &TrainConfig) -> u64 {
    ParamBudget::new(cfg.d_model as u64, cfg.p as u64, cfg.d_llm as u64).total()
}
