//! Central-difference check of the analytic encoder gradient.
//!
//! Quantization is piecewise constant, so the check differentiates the
//! straight-through surrogate instead: code assignments and the mask are
//! frozen at the base point (see [`PipelineAnchor`]).

use lqae_nn::{Float, GradStore};
use rand::Rng;

use super::pipeline::{LossSettings, LqaeModel, PipelineAnchor};
use crate::autoencoder::ImageBatch;
use crate::error::Result;
use crate::rng::derive_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

fn total_at<T: Float>(
    model: &LqaeModel<T>,
    batch: &ImageBatch,
    mask: &[bool],
    s: &LossSettings,
    anchor: &PipelineAnchor<T>,
) -> Result<f64> {
    Ok(model.forward(batch, mask, s, Some(anchor))?.loss.total)
}

/// Compares d(total)/d(w) for `samples` encoder weights drawn uniformly
/// (with `seed`) against central differences with step `eps`.
pub fn check_encoder_gradients<T: Float>(
    model: &mut LqaeModel<T>,
    batch: &ImageBatch,
    mask: &[bool],
    s: &LossSettings,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<GradSample>> {
    let pass = model.forward(batch, mask, s, None)?;
    let anchor = pass.anchor();
    let mut grads = GradStore::for_params(&*model);
    model.backward(&pass, &mut grads, s);

    let mut params: Vec<(usize, String, usize)> = Vec::new();
    model.encoder.visit(&mut |p| params.push((p.id, p.name.clone(), p.numel())));
    let total: usize = params.iter().map(|p| p.2).sum();
    let mut rng = derive_rng(seed, "gradcheck", 0);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let (id, name, index) = params
            .iter()
            .find_map(|(id, name, n)| {
                if flat < *n {
                    Some((*id, name.clone(), flat))
                } else {
                    flat -= n;
                    None
                }
            })
            .expect("index within total");
        let nudge = |model: &mut LqaeModel<T>, delta: f64| {
            model.encoder.visit_mut(&mut |p| {
                if p.id == id {
                    p.value[index] += T::lit(delta);
                }
            })
        };
        let mut orig = T::zero();
        model.encoder.visit(&mut |p| {
            if p.id == id {
                orig = p.value[index];
            }
        });
        nudge(model, eps);
        let plus = total_at(model, batch, mask, s, &anchor)?;
        nudge(model, -2.0 * eps);
        let minus = total_at(model, batch, mask, s, &anchor)?;
        model.encoder.visit_mut(&mut |p| {
            if p.id == id {
                p.value[index] = orig;
            }
        });
        out.push(GradSample {
            param: name,
            index,
            analytic: grads.by_id(id)[index].as_f64(),
            numeric: (plus - minus) / (2.0 * eps),
        });
    }
    Ok(out)
}
