//! The full model and its loss: encode, quantize, mask, denoise, decode.

use std::collections::BTreeMap;

use lqae_nn::{Float, GradStore, Mat, Param, ParamBuilder, Parameters};
use rand::Rng;

use super::config::{DenoiserInput, LqaeConfig};
use crate::autoencoder::{
    patchify, unpatchify, AutoencoderConfig, Decoder, DecoderCache, Encoder, EncoderCache, ImageBatch,
};
use crate::denoiser::{
    apply_mask, bert_loss, mask_id, sample_mask, BertLoss, BertLossSign, Denoiser, DenoiserCache, DenoiserOutput,
    TokenSequence,
};
use crate::error::{LqaeError, Result, StageContext};
use crate::quantizer::{entropy_regularizer, quantize, Codebook, QuantizationResult, SteAnchor};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor_io::{load_param, Checksum, RawTensor};

/// Seed of the fixed stand-in codebook and denoiser used when no pretrained
/// files are supplied. Independent of the run seed, so every run shares them.
pub const STANDIN_SEED: u64 = 0x4c51_4145;

/// Loss terms of one forward pass, accumulated in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub commit: f64,
    pub bert: f64,
    pub entropy: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, commit: f64, bert: f64, entropy: f64) -> Self {
        LossBreakdown { recon, commit, bert, entropy, total: recon + commit + bert + entropy }
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.commit, self.bert, self.entropy, self.total].iter().all(|v| v.is_finite())
    }
}

/// Switches of the loss that do not change the architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub alpha: f64,
    pub beta: f64,
    pub l2_normalize: bool,
    pub entropy_weight: f64,
    pub decoder_requantize: bool,
    pub bert_loss_sign: BertLossSign,
    pub denoiser_input: DenoiserInput,
}

impl From<&LqaeConfig> for LossSettings {
    fn from(c: &LqaeConfig) -> Self {
        LossSettings {
            alpha: c.alpha,
            beta: c.beta,
            l2_normalize: c.l2_normalize,
            entropy_weight: c.entropy_weight,
            decoder_requantize: c.decoder_requantize,
            bert_loss_sign: c.bert_loss_sign,
            denoiser_input: c.denoiser_input,
        }
    }
}

/// Frozen code assignments for replaying a forward pass as a smooth function
/// of the encoder weights.
#[derive(Clone, Debug)]
pub struct PipelineAnchor<T> {
    pub latent: SteAnchor<T>,
    pub requantize: Option<SteAnchor<T>>,
}

/// Encoder and decoder (trainable) with the frozen codebook and denoiser.
#[derive(Clone, Debug)]
pub struct LqaeModel<T> {
    pub ae: AutoencoderConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub codebook: Codebook<T>,
    pub denoiser: Denoiser<T>,
}

impl<T: Float> Parameters<T> for LqaeModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub loss: LossBreakdown,
    pub mask: Vec<bool>,
    pub quant: QuantizationResult<T>,
    pub requant: Option<QuantizationResult<T>>,
    pub denoised: DenoiserOutput<T>,
    pub bert: BertLoss<T>,
    pub reconstruction: Mat<T>,
    h: Mat<T>,
    target: Mat<T>,
    entropy_grad: Mat<T>,
    enc_cache: EncoderCache<T>,
    den_cache: DenoiserCache<T>,
    dec_cache: DecoderCache<T>,
    batch: usize,
}

impl<T: Float> ForwardPass<T> {
    pub fn anchor(&self) -> PipelineAnchor<T> {
        PipelineAnchor {
            latent: SteAnchor::capture(&self.h, &self.quant),
            requantize: self.requant.as_ref().map(|q| SteAnchor::capture(&self.denoised.output_embeddings, q)),
        }
    }

    pub fn codes(&self) -> TokenSequence {
        TokenSequence { ids: self.quant.codes.clone(), batch: self.batch, seq: self.quant.codes.len() / self.batch }
    }
}

impl<T: Float> LqaeModel<T> {
    /// Builds a model for `cfg`. Encoder and decoder are initialized from the
    /// run seed. The codebook and denoiser come from the configured files, or
    /// from fixed stand-ins; `denoiser_pretrained = false` draws the denoiser
    /// from the run seed instead.
    pub fn build(cfg: &LqaeConfig) -> Result<Self> {
        let ae = cfg.autoencoder();
        let mut rng = derive_rng(cfg.seed, "autoencoder", 0);
        let mut pb = ParamBuilder::new(&mut rng);
        let encoder = Encoder::new(&mut pb, &ae);
        let decoder = Decoder::new(&mut pb, &ae);
        let codebook = match &cfg.codebook {
            Some(dir) => Codebook::<f32>::load(dir)?.cast(),
            None => Codebook::synthetic(cfg.vocab_size, cfg.code_dim, STANDIN_SEED)?,
        };
        if codebook.len() != cfg.vocab_size || codebook.dim() != cfg.code_dim {
            return Err(LqaeError::Shape(format!(
                "codebook is {} x {}, config expects {} x {}",
                codebook.len(),
                codebook.dim(),
                cfg.vocab_size,
                cfg.code_dim
            )));
        }
        let dcfg = cfg.denoiser();
        let first_frozen_id = pb.next_id();
        let mut denoiser = match (cfg.denoiser_pretrained, &cfg.denoiser_weights) {
            (true, Some(dir)) => Denoiser::load_pretrained(dcfg, dir)?,
            (true, None) => Denoiser::random(dcfg, STANDIN_SEED),
            (false, _) => Denoiser::random(dcfg, derive_seed(cfg.seed, "untrained-denoiser", 0)),
        };
        denoiser.renumber(first_frozen_id);
        Ok(LqaeModel { ae, encoder, decoder, codebook, denoiser })
    }

    pub fn seq_len(&self) -> usize {
        self.ae.seq_len()
    }

    /// SHA-256 of the codebook and of the denoiser parameters.
    pub fn frozen_checksums(&self) -> (String, String) {
        (self.codebook.checksum(), self.denoiser.checksum())
    }

    pub fn trainable_checksum(&self) -> String {
        let mut c = Checksum::default();
        self.visit(&mut |p| c.add_param(p));
        c.hex()
    }

    /// Encoder, decoder and denoiser tensors keyed by their full names.
    pub fn tensors(&self) -> BTreeMap<String, RawTensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |p| {
            out.insert(p.name.clone(), RawTensor::from_values(&p.shape, &p.value));
        });
        out.extend(self.denoiser.tensors());
        out
    }

    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, RawTensor>) -> Result<()> {
        let mut result = Ok(());
        self.visit_mut(&mut |p| {
            if result.is_ok() {
                let name = p.name.clone();
                result = load_param(tensors, &name, p);
            }
        });
        result?;
        self.denoiser.load_tensors(tensors)
    }

    fn patches(&self, batch: &ImageBatch) -> Result<Mat<T>> {
        if batch.side != self.ae.image_side || batch.channels != self.ae.channels {
            return Err(LqaeError::Shape(format!(
                "model expects {0}x{0}x{1} images, got {2}x{2}x{3}",
                self.ae.image_side, self.ae.channels, batch.side, batch.channels
            )));
        }
        Ok(patchify(batch, self.ae.patch)?.cast())
    }

    /// Encoder output `h`, `(B*N) x D`.
    pub fn encode(&self, batch: &ImageBatch) -> Result<Mat<T>> {
        let patches = self.patches(batch).stage("encode")?;
        Ok(self.encoder.forward(&patches, batch.batch).stage("encode")?.0)
    }

    /// Discrete codes of each image (encode then quantize, no masking).
    pub fn encode_codes(&self, batch: &ImageBatch, l2_normalize: bool) -> Result<TokenSequence> {
        let h = self.encode(batch)?;
        let q = quantize(&h, &self.codebook, l2_normalize, 0.0).stage("quantize")?;
        TokenSequence::new(q.codes, batch.batch, self.seq_len())
    }

    /// Reconstruction through the unmasked pipeline, clamped to `[0, 1]`.
    pub fn reconstruct(&self, batch: &ImageBatch, settings: &LossSettings) -> Result<ImageBatch> {
        let mask = vec![false; batch.batch * self.seq_len()];
        // Nothing is masked, so there is no denoising loss to compute.
        let settings = LossSettings { alpha: 0.0, ..*settings };
        let pass = self.forward(batch, &mask, &settings, None)?;
        Ok(unpatchify(&pass.reconstruction, batch.batch, self.ae.image_side, self.ae.channels, self.ae.patch)?
            .clamped())
    }

    /// One forward pass with an explicit mask. With an anchor, code
    /// assignments are taken from it instead of the nearest-neighbour lookup.
    pub fn forward(
        &self,
        batch: &ImageBatch,
        mask: &[bool],
        s: &LossSettings,
        anchor: Option<&PipelineAnchor<T>>,
    ) -> Result<ForwardPass<T>> {
        let b = batch.batch;
        let n = self.seq_len();
        if mask.len() != b * n {
            return Err(LqaeError::Shape(format!("mask has {} entries for {} positions", mask.len(), b * n)));
        }
        let target = self.patches(batch).stage("encode")?;
        let (h, enc_cache) = self.encoder.forward(&target, b).stage("encode")?;

        let quant = match anchor {
            Some(a) => a.latent.replay(&h, &self.codebook, s.beta),
            None => quantize(&h, &self.codebook, s.l2_normalize, s.beta).stage("quantize")?,
        };
        let (entropy, entropy_grad) = entropy_regularizer(&h, &self.codebook, s.entropy_weight).stage("entropy")?;

        let den_in = match s.denoiser_input {
            DenoiserInput::Continuous => self.denoiser.input_from_latent(&quant.ste_latent, mask),
            DenoiserInput::Discrete => {
                let codes = TokenSequence::new(quant.codes.clone(), b, n)?;
                let spec = crate::denoiser::MaskSpec { ratio: 0.0, mask: mask.to_vec(), batch: b, seq: n, seed: 0 };
                let masked = apply_mask(&codes, &spec, mask_id(self.codebook.len()))?;
                self.denoiser.input_from_ids(&masked, &self.codebook)
            }
        }
        .stage("denoise")?;
        let (denoised, den_cache) = self.denoiser.forward(&den_in, b, &self.codebook).stage("denoise")?;
        let bert = bert_loss(&denoised.logits, &quant.codes, mask, s.alpha, s.bert_loss_sign).stage("bert_loss")?;

        let requant = if s.decoder_requantize {
            let out = &denoised.output_embeddings;
            Some(match anchor.and_then(|a| a.requantize.as_ref()) {
                Some(a) => a.replay(out, &self.codebook, 0.0),
                None => quantize(out, &self.codebook, s.l2_normalize, 0.0).stage("requantize")?,
            })
        } else {
            None
        };
        let dec_in = requant.as_ref().map_or(&denoised.output_embeddings, |q| &q.ste_latent);
        let (reconstruction, dec_cache) = self.decoder.forward(dec_in, b).stage("decode")?;

        let sq: f64 = reconstruction
            .data
            .iter()
            .zip(&target.data)
            .map(|(&a, &t)| {
                let d = (a - t).as_f64();
                d * d
            })
            .sum();
        let recon = sq / target.data.len() as f64;
        let loss = LossBreakdown::new(recon, quant.commit_loss.as_f64(), bert.value.as_f64(), entropy.as_f64());
        if !loss.is_finite() {
            return Err(LqaeError::NumericFailure(format!("loss terms {loss:?}")));
        }
        Ok(ForwardPass {
            loss,
            mask: mask.to_vec(),
            quant,
            requant,
            denoised,
            bert,
            reconstruction,
            h,
            target,
            entropy_grad,
            enc_cache,
            den_cache,
            dec_cache,
            batch: b,
        })
    }

    /// Accumulates d(total)/d(encoder, decoder) into `grads`. Codebook and
    /// denoiser are only read.
    pub fn backward(&self, pass: &ForwardPass<T>, grads: &mut GradStore<T>, s: &LossSettings) {
        let scale = T::lit(2.0 / pass.target.data.len() as f64);
        let mut d_rec = pass.reconstruction.clone();
        for (d, &t) in d_rec.data.iter_mut().zip(&pass.target.data) {
            *d = (*d - t) * scale;
        }
        // Requantization is straight-through with no commitment term, so the
        // decoder-input gradient passes to the denoiser output unchanged.
        let d_den_out = self.decoder.backward(&pass.dec_cache, &d_rec, grads);
        let d_den_in = self.denoiser.backward(&pass.den_cache, &d_den_out, pass.bert.d_logits.as_ref(), &self.codebook);
        let d_ste = match s.denoiser_input {
            DenoiserInput::Continuous => {
                let mut d = d_den_in;
                for (r, &m) in pass.mask.iter().enumerate() {
                    if m {
                        d.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                Some(d)
            }
            DenoiserInput::Discrete => None,
        };
        let mut dh = pass.quant.backward(&pass.h, d_ste.as_ref());
        dh.add_assign(&pass.entropy_grad);
        self.encoder.backward(&pass.enc_cache, &dh, grads);
    }
}

/// Samples `round(ratio * N)` masked positions per image.
pub fn sample_batch_mask<R: Rng>(batch: usize, seq: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        mask.extend(sample_mask(seq, ratio, rng)?);
    }
    Ok(mask)
}

/// Loss of one batch with a freshly sampled mask.
pub fn total_loss<T: Float, R: Rng>(
    batch: &ImageBatch,
    model: &LqaeModel<T>,
    cfg: &LqaeConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let mask = sample_batch_mask(batch.batch, model.seq_len(), cfg.mask_ratio, rng).stage("mask")?;
    Ok(model.forward(batch, &mask, &LossSettings::from(cfg), None)?.loss)
}
