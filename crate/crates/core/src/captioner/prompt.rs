use crate::nn::{vstack, Mat};

use super::decoder::{CaptionVocab, DecoderStub};

pub const FEATURE_PLACEHOLDER: &str = "<ProjFeature>";

/// Conversational prompt with a slot for the projected feature rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub prefix: String,
    pub suffix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            prefix: "###Human: <Img>".into(),
            suffix: "</Img> Describe this image in detail. ###Assistant:".into(),
        }
    }
}

impl PromptTemplate {
    pub fn serialize(&self) -> String {
        format!("{}{FEATURE_PLACEHOLDER}{}", self.prefix, self.suffix)
    }

    /// Every word the template contributes to the decoder vocabulary.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.prefix.split_whitespace().chain(self.suffix.split_whitespace())
    }
}

/// Where the feature rows sit inside an assembled prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptLayout {
    pub prefix_len: usize,
    pub feature_len: usize,
    pub suffix_len: usize,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.prefix_len + self.feature_len + self.suffix_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> std::ops::Range<usize> {
        self.prefix_len..self.prefix_len + self.feature_len
    }
}

/// Embedded prompt `prefix ++ projected rows ++ suffix`.
pub fn assemble_prompt(
    projected: &Mat,
    template: &PromptTemplate,
    vocab: &CaptionVocab,
    decoder: &DecoderStub,
) -> (Mat, PromptLayout) {
    let prefix = decoder.embed_tokens(&vocab.encode(&template.prefix));
    let suffix = decoder.embed_tokens(&vocab.encode(&template.suffix));
    let layout = PromptLayout {
        prefix_len: prefix.nrows(),
        feature_len: projected.nrows(),
        suffix_len: suffix.nrows(),
    };
    (vstack(&vstack(&prefix, projected), &suffix), layout)
}
