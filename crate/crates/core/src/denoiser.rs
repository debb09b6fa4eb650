//! Masking of code sequences and the frozen masked-denoising transformer.
//!
//! The denoiser's input embedding table and its output (tied) projection are
//! the codebook itself. Masked positions take a dedicated mask embedding and
//! the reserved id [`mask_id`]. Every denoiser parameter is frozen: the
//! backward pass only propagates gradient to the input embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use lqae_nn::transformer::{StackCache, StackConfig, TransformerStack};
use lqae_nn::{Float, Mat, Param, ParamBuilder};
use rand::Rng;

use crate::error::{LqaeError, Result};
use crate::quantizer::Codebook;
use crate::rng::derive_rng;
use crate::tensor_io::{load_param, read_tensor_dir, write_tensor_dir, Checksum, RawTensor};

/// Discrete codes for a batch, row-major `batch x seq`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(LqaeError::Shape(format!("{} ids cannot form {batch} x {seq}", ids.len())));
        }
        Ok(TokenSequence { ids, batch, seq })
    }

    pub fn single(ids: Vec<usize>) -> Self {
        let seq = ids.len();
        TokenSequence { ids, batch: 1, seq }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id >= vocab_size) {
            Some(id) => Err(LqaeError::Range(format!("token id {id} outside vocabulary of {vocab_size}"))),
            None => Ok(()),
        }
    }
}

/// The reserved id standing for a masked position: one past the codebook.
pub fn mask_id(vocab_size: usize) -> usize {
    vocab_size
}

/// Number of masked positions for a sequence of `n` at `ratio`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Masks exactly `round(ratio * n)` positions chosen uniformly without replacement.
pub fn sample_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(LqaeError::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = masked_count(n, ratio).min(n);
    let mut mask = vec![false; n];
    for i in rand::seq::index::sample(rng, n, k) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Per-batch mask with the seed that regenerates it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn sample(batch: usize, seq: usize, ratio: f64, seed: u64) -> Result<Self> {
        let mut rng = derive_rng(seed, "mask-spec", 0);
        let mut mask = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            mask.extend(sample_mask(seq, ratio, &mut rng)?);
        }
        Ok(MaskSpec { ratio, mask, batch, seq, seed })
    }

    pub fn none(batch: usize, seq: usize) -> Self {
        MaskSpec { ratio: 0.0, mask: vec![false; batch * seq], batch, seq, seed: 0 }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Replaces masked positions by `mask_id`.
pub fn apply_mask(tokens: &TokenSequence, spec: &MaskSpec, mask_id: usize) -> Result<TokenSequence> {
    if tokens.ids.len() != spec.mask.len() {
        return Err(LqaeError::Shape(format!(
            "mask covers {} positions, sequence has {}",
            spec.mask.len(),
            tokens.ids.len()
        )));
    }
    let ids = tokens.ids.iter().zip(&spec.mask).map(|(&id, &m)| if m { mask_id } else { id }).collect();
    Ok(TokenSequence { ids, batch: tokens.batch, seq: tokens.seq })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Equal to the codebook dimension.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seq: usize,
    pub vocab: usize,
}

impl DenoiserConfig {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            width: self.width,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            seq: self.seq,
        }
    }

    pub fn param_count(&self) -> usize {
        self.width + self.stack().param_count() + self.vocab
    }

    /// Width of the concatenated features for `n_layers` pooled layers.
    pub fn feature_width(&self, n_layers: usize) -> usize {
        self.width * n_layers
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserOutput<T> {
    /// Final-layer activations before the logit projection, `(B*N) x D`.
    pub output_embeddings: Mat<T>,
    /// `(B*N) x V`.
    pub logits: Mat<T>,
    /// Embedding-layer output followed by each block's output; `depth + 1` entries.
    pub layer_features: Vec<Mat<T>>,
}

#[derive(Clone, Debug)]
pub struct DenoiserCache<T> {
    stack: StackCache<T>,
}

/// Frozen masked-denoising transformer.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub cfg: DenoiserConfig,
    pub mask_embedding: Param<T>,
    pub stack: TransformerStack<T>,
    pub lm_bias: Param<T>,
}

impl<T: Float> Denoiser<T> {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, cfg: DenoiserConfig) -> Self {
        pb.push("denoiser");
        let mask_embedding = pb.normal("mask_embedding", &[cfg.width], 1.0 / (cfg.width as f64).sqrt());
        let stack = TransformerStack::new(pb, "stack", cfg.stack());
        let lm_bias = pb.constant("lm_bias", &[cfg.vocab], 0.0);
        pb.pop();
        Denoiser { cfg, mask_embedding, stack, lm_bias }
    }

    /// Randomly initialized denoiser drawn from `seed`.
    pub fn random(cfg: DenoiserConfig, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "denoiser", 0);
        let mut pb = ParamBuilder::new(&mut rng);
        Denoiser::new(&mut pb, cfg)
    }

    /// Reassigns parameter ids sequentially from `first_id`, so the denoiser
    /// can share a gradient store with other modules.
    pub fn renumber(&mut self, first_id: usize) {
        let mut id = first_id;
        self.visit_mut(&mut |p| {
            p.id = id;
            id += 1;
        });
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.mask_embedding);
        self.stack.visit(f);
        f(&self.lm_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.mask_embedding);
        self.stack.visit_mut(f);
        f(&mut self.lm_bias);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    /// SHA-256 of all denoiser parameters.
    pub fn checksum(&self) -> String {
        let mut c = Checksum::default();
        self.visit(&mut |p| c.add_param(p));
        c.hex()
    }

    pub fn tensors(&self) -> BTreeMap<String, RawTensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |p| {
            out.insert(p.name.clone(), RawTensor::from_values(&p.shape, &p.value));
        });
        out
    }

    /// Overwrites parameters from tensors named like [`Denoiser::tensors`].
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, RawTensor>) -> Result<()> {
        let mut result = Ok(());
        self.visit_mut(&mut |p| {
            if result.is_ok() {
                let name = p.name.clone();
                result = load_param(tensors, &name, p);
            }
        });
        result
    }

    /// Loads externally produced weights from a tensor directory.
    pub fn load_pretrained(cfg: DenoiserConfig, dir: &Path) -> Result<Self> {
        let mut d = Denoiser::random(cfg, 0);
        d.load_tensors(&read_tensor_dir(dir)?)?;
        Ok(d)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_tensor_dir(dir, &self.tensors())
    }

    /// Input rows from continuous latents: unmasked rows are copied from
    /// `latent`, masked rows take the mask embedding.
    pub fn input_from_latent(&self, latent: &Mat<T>, mask: &[bool]) -> Result<Mat<T>> {
        if latent.rows != mask.len() || latent.cols != self.cfg.width {
            return Err(LqaeError::Shape(format!(
                "denoiser input {} x {} with {} mask entries",
                latent.rows,
                latent.cols,
                mask.len()
            )));
        }
        let mut x = latent.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                x.row_mut(r).copy_from_slice(&self.mask_embedding.value);
            }
        }
        Ok(x)
    }

    /// Input rows from discrete ids; [`mask_id`] maps to the mask embedding.
    pub fn input_from_ids(&self, tokens: &TokenSequence, codebook: &Codebook<T>) -> Result<Mat<T>> {
        let v = codebook.len();
        let mut x = Mat::zeros(tokens.ids.len(), self.cfg.width);
        for (r, &id) in tokens.ids.iter().enumerate() {
            let src = if id == mask_id(v) {
                &self.mask_embedding.value[..]
            } else if id < v {
                codebook.row(id)
            } else {
                return Err(LqaeError::Range(format!("token id {id} outside vocabulary of {v}")));
            };
            x.row_mut(r).copy_from_slice(src);
        }
        Ok(x)
    }

    pub fn forward(
        &self,
        input: &Mat<T>,
        batch: usize,
        codebook: &Codebook<T>,
    ) -> Result<(DenoiserOutput<T>, DenoiserCache<T>)> {
        if codebook.dim() != self.cfg.width || codebook.len() != self.cfg.vocab {
            return Err(LqaeError::Shape(format!(
                "denoiser expects a {} x {} codebook, got {} x {}",
                self.cfg.vocab,
                self.cfg.width,
                codebook.len(),
                codebook.dim()
            )));
        }
        let (out, stack) = self.stack.forward(input, batch);
        if !out.is_finite() {
            return Err(LqaeError::NumericFailure("denoiser.stack".into()));
        }
        let mut logits = out.matmul_t(codebook.embeddings());
        for r in 0..logits.rows {
            for (l, &b) in logits.row_mut(r).iter_mut().zip(&self.lm_bias.value) {
                *l += b;
            }
        }
        if !logits.is_finite() {
            return Err(LqaeError::NumericFailure("denoiser.logits".into()));
        }
        let layer_features = stack.hidden.clone();
        Ok((DenoiserOutput { output_embeddings: out, logits, layer_features }, DenoiserCache { stack }))
    }

    /// Gradient with respect to the input rows, given gradients on the output
    /// embeddings and (optionally) on the logits. Parameters receive nothing.
    pub fn backward(
        &self,
        cache: &DenoiserCache<T>,
        d_out: &Mat<T>,
        d_logits: Option<&Mat<T>>,
        codebook: &Codebook<T>,
    ) -> Mat<T> {
        let mut d = d_out.clone();
        if let Some(dl) = d_logits {
            d.add_assign(&dl.matmul(codebook.embeddings()));
        }
        self.stack.backward(&cache.stack, &d, None)
    }

    /// Runs unmasked `tokens` through the denoiser and returns the pooled,
    /// concatenated features of the requested layers (`0` is the embedding layer).
    pub fn extract_layer_features(
        &self,
        tokens: &TokenSequence,
        codebook: &Codebook<T>,
        layers: &[usize],
    ) -> Result<Mat<T>> {
        check_layers(layers, self.cfg.depth)?;
        let input = self.input_from_ids(tokens, codebook)?;
        let (out, _) = self.forward(&input, tokens.batch, codebook)?;
        pool_layer_features(&out.layer_features, layers, tokens.batch, tokens.seq)
    }
}

fn check_layers(layers: &[usize], depth: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(LqaeError::InvalidArgument("no feature layers requested".into()));
    }
    match layers.iter().find(|&&l| l > depth) {
        Some(l) => Err(LqaeError::Range(format!("layer {l} requested, denoiser has layers 0..={depth}"))),
        None => Ok(()),
    }
}

/// Mean-pools each requested layer over positions and concatenates the results
/// in the given order: `B x (sum of widths)`.
pub fn pool_layer_features<T: Float>(
    features: &[Mat<T>],
    layers: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Mat<T>> {
    if layers.is_empty() {
        return Err(LqaeError::InvalidArgument("no feature layers requested".into()));
    }
    if let Some(l) = layers.iter().find(|&&l| l >= features.len()) {
        return Err(LqaeError::Range(format!("layer {l} requested, {} available", features.len())));
    }
    let width: usize = layers.iter().map(|&l| features[l].cols).sum();
    let mut out = Mat::zeros(batch, width);
    let inv = T::lit(1.0 / seq as f64);
    for b in 0..batch {
        let mut off = 0;
        for &l in layers {
            let f = &features[l];
            let dst = &mut out.row_mut(b)[off..off + f.cols];
            for s in 0..seq {
                for (o, &v) in dst.iter_mut().zip(f.row(b * seq + s)) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
            off += f.cols;
        }
    }
    Ok(out)
}

/// Orientation of the denoiser likelihood term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BertLossSign {
    /// `alpha * cross-entropy` (minimizing raises the likelihood of the true codes).
    NegativeLogLikelihood,
    /// `alpha * log p(z | z_m)` taken literally.
    LogLikelihood,
}

impl BertLossSign {
    fn factor(self) -> f64 {
        match self {
            BertLossSign::NegativeLogLikelihood => 1.0,
            BertLossSign::LogLikelihood => -1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BertLoss<T> {
    pub value: T,
    /// Gradient with respect to the logits; `None` when the term is disabled.
    pub d_logits: Option<Mat<T>>,
    /// Set when `alpha > 0` but no position was masked.
    pub empty_mask: bool,
}

/// `alpha` times the mean cross-entropy of the true ids over masked positions.
pub fn bert_loss<T: Float>(
    logits: &Mat<T>,
    true_tokens: &[usize],
    mask: &[bool],
    alpha: f64,
    sign: BertLossSign,
) -> Result<BertLoss<T>> {
    if alpha < 0.0 {
        return Err(LqaeError::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    if true_tokens.len() != logits.rows || mask.len() != logits.rows {
        return Err(LqaeError::Shape("logits, tokens and mask disagree in length".into()));
    }
    if alpha == 0.0 {
        return Ok(BertLoss { value: T::zero(), d_logits: None, empty_mask: false });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        log::warn!("denoiser loss requested with an empty mask; contributing 0");
        return Ok(BertLoss { value: T::zero(), d_logits: None, empty_mask: true });
    }
    let scale = T::lit(alpha * sign.factor() / count as f64);
    let mut total = T::zero();
    let mut d = Mat::zeros(logits.rows, logits.cols);
    for (r, (&tok, &m)) in true_tokens.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if tok >= logits.cols {
            return Err(LqaeError::Range(format!("true token {tok} outside {} logits", logits.cols)));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[tok];
        let dr = d.row_mut(r);
        for (j, o) in dr.iter_mut().enumerate() {
            *o = (row[j] - lse).exp() * scale;
        }
        dr[tok] -= scale;
    }
    Ok(BertLoss { value: total * scale, d_logits: Some(d), empty_mask: false })
}

/// Vocabulary strings of `ids` joined by single spaces.
pub fn render_text<T: Float>(ids: &[usize], codebook: &Codebook<T>) -> String {
    ids.iter().map(|&i| codebook.token(i)).collect::<Vec<_>>().join(" ")
}

/// Inverse of [`render_text`] for vocabularies with unique entries.
pub fn parse_text<T: Float>(text: &str, codebook: &Codebook<T>) -> Option<Vec<usize>> {
    text.split_whitespace().map(|t| codebook.lookup(t)).collect()
}
