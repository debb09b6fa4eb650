//! Sources of per-image code sequences for prompts.

use crate::denoiser::TokenSequence;
use crate::error::{LqaeError, Result};
use crate::quantizer::Codebook;
use crate::training::data::Dataset;
use crate::training::pipeline::LqaeModel;

pub trait CodeSource {
    /// Vocabulary used to render the codes as text.
    fn codebook(&self) -> &Codebook<f32>;
    /// Codes of the given dataset items, one row each.
    fn codes(&self, dataset: &Dataset, items: &[usize]) -> Result<TokenSequence>;
}

/// Encodes images with a trained model (encode then quantize, no masking).
pub struct ModelCoder<'a> {
    pub model: &'a LqaeModel<f32>,
    pub l2_normalize: bool,
}

impl CodeSource for ModelCoder<'_> {
    fn codebook(&self) -> &Codebook<f32> {
        &self.model.codebook
    }

    fn codes(&self, dataset: &Dataset, items: &[usize]) -> Result<TokenSequence> {
        encode_image_to_codes(self.model, &dataset.batch(items)?, self.l2_normalize)
    }
}

pub fn encode_image_to_codes(
    model: &LqaeModel<f32>,
    images: &crate::autoencoder::ImageBatch,
    l2_normalize: bool,
) -> Result<TokenSequence> {
    model.encode_codes(images, l2_normalize)
}

/// Precomputed codes, one sequence per dataset item.
pub struct TableCoder {
    pub codebook: Codebook<f32>,
    pub table: Vec<Vec<usize>>,
}

impl CodeSource for TableCoder {
    fn codebook(&self) -> &Codebook<f32> {
        &self.codebook
    }

    fn codes(&self, _: &Dataset, items: &[usize]) -> Result<TokenSequence> {
        let seq = self.table.first().map_or(0, Vec::len);
        let mut ids = Vec::with_capacity(items.len() * seq);
        for &i in items {
            let row = self.table.get(i).ok_or_else(|| LqaeError::Range(format!("no codes for item {i}")))?;
            if row.len() != seq {
                return Err(LqaeError::Shape("code table rows differ in length".into()));
            }
            ids.extend_from_slice(row);
        }
        TokenSequence::new(ids, items.len(), seq)
    }
}

/// Re-labels another source's codes through an id-to-id table, e.g. to
/// render a separately trained VQ-VAE's codes with a language vocabulary.
pub struct MappedCoder<'a> {
    pub inner: &'a dyn CodeSource,
    pub mapping: Vec<usize>,
    pub target: Codebook<f32>,
}

impl MappedCoder<'_> {
    /// Reads a mapping file with one target id per line.
    pub fn parse_mapping(text: &str) -> Result<Vec<usize>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse().map_err(|_| LqaeError::InvalidArgument(format!("bad mapping entry {l:?}"))))
            .collect()
    }
}

impl CodeSource for MappedCoder<'_> {
    fn codebook(&self) -> &Codebook<f32> {
        &self.target
    }

    fn codes(&self, dataset: &Dataset, items: &[usize]) -> Result<TokenSequence> {
        let mut t = self.inner.codes(dataset, items)?;
        for id in &mut t.ids {
            *id = *self
                .mapping
                .get(*id)
                .filter(|&&m| m < self.target.len())
                .ok_or_else(|| LqaeError::Range(format!("code {id} has no valid mapping")))?;
        }
        Ok(t)
    }
}
