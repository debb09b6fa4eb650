//! Linear probes on frozen features.

use lqae_nn::Mat;
use rand_distr::{Distribution, Normal};

use crate::autoencoder::ImageBatch;
use crate::denoiser::pool_layer_features;
use crate::error::{LqaeError, Result};
use crate::rng::derive_rng;
use crate::tensor_io::write_matrix_file;
use crate::training::data::Dataset;
use crate::training::pipeline::LqaeModel;

/// Images are pushed through the model in chunks of this many.
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub features: Mat<f64>,
    pub labels: Vec<usize>,
    pub provenance: String,
}

impl FeatureMatrix {
    pub fn new(features: Mat<f64>, labels: Vec<usize>, provenance: impl Into<String>) -> Result<Self> {
        if features.rows != labels.len() {
            return Err(LqaeError::Shape(format!("{} feature rows, {} labels", features.rows, labels.len())));
        }
        if !features.is_finite() {
            return Err(LqaeError::NumericFailure("probe features".into()));
        }
        Ok(FeatureMatrix { features, labels, provenance: provenance.into() })
    }

    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        let f = self.features.cols;
        let mut data = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
        }
        FeatureMatrix {
            features: Mat::from_vec(rows.len(), f, data),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Writes the features as a matrix file (f32).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let data: Vec<f32> = self.features.data.iter().map(|&v| v as f32).collect();
        write_matrix_file(path, self.features.rows, self.features.cols, &data)
    }
}

fn chunked(
    dataset: &Dataset,
    items: &[usize],
    mut f: impl FnMut(&ImageBatch) -> Result<Mat<f64>>,
) -> Result<FeatureMatrix> {
    let mut rows = Vec::new();
    let mut cols = 0;
    for chunk in items.chunks(CHUNK) {
        let m = f(&dataset.batch(chunk)?)?;
        cols = m.cols;
        rows.extend(m.data);
    }
    let labels = items.iter().map(|&i| dataset.labels[i]).collect();
    FeatureMatrix::new(Mat::from_vec(items.len(), cols, rows), labels, String::new())
}

/// Encode, quantize (no masking), run the denoiser on the codes, and
/// concatenate the position-averaged features of `layers`.
pub fn extract_probe_features(
    model: &LqaeModel<f32>,
    dataset: &Dataset,
    items: &[usize],
    layers: &[usize],
    l2_normalize: bool,
) -> Result<FeatureMatrix> {
    let mut fm = chunked(dataset, items, |batch| {
        let codes = model.encode_codes(batch, l2_normalize)?;
        Ok(model.denoiser.extract_layer_features(&codes, &model.codebook, layers)?.cast())
    })?;
    fm.provenance = format!("denoiser layers {layers:?}");
    Ok(fm)
}

/// Position-averaged encoder output tiled `n_layers` times, so a probe on it
/// has as many parameters as one on `n_layers` denoiser layers.
pub fn baseline_replicated_features(
    model: &LqaeModel<f32>,
    dataset: &Dataset,
    items: &[usize],
    n_layers: usize,
) -> Result<FeatureMatrix> {
    if n_layers == 0 {
        return Err(LqaeError::InvalidArgument("n_layers must be at least 1".into()));
    }
    let seq = model.seq_len();
    let mut fm = chunked(dataset, items, |batch| {
        let h = model.encode(batch)?;
        let pooled = pool_layer_features(&[h], &[0], batch.batch, seq)?;
        Ok(tile(&pooled, n_layers).cast())
    })?;
    fm.provenance = format!("encoder output tiled x{n_layers}");
    Ok(fm)
}

pub fn tile<T: lqae_nn::Float>(m: &Mat<T>, times: usize) -> Mat<T> {
    let mut out = Mat::zeros(m.rows, m.cols * times);
    for r in 0..m.rows {
        for k in 0..times {
            out.row_mut(r)[k * m.cols..(k + 1) * m.cols].copy_from_slice(m.row(r));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub reg: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { iterations: 500, lr: 0.1, reg: 1e-4, seed: 0 }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weights: Mat<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

pub fn probe_param_count(features: usize, classes: usize) -> usize {
    (features + 1) * classes
}

impl LinearProbe {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, x: &Mat<f64>) -> Mat<f64> {
        let mut z = x.clone();
        for r in 0..z.rows {
            for ((v, m), s) in z.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        z
    }

    fn logits(&self, z: &Mat<f64>) -> Mat<f64> {
        let mut l = z.matmul(&self.weights);
        for r in 0..l.rows {
            for (v, b) in l.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        l
    }

    pub fn predict(&self, x: &Mat<f64>) -> Vec<usize> {
        let l = self.logits(&self.standardize(x));
        (0..l.rows)
            .map(|r| l.row(r).iter().enumerate().fold(0, |best, (j, &v)| if v > l.row(r)[best] { j } else { best }))
            .collect()
    }

    pub fn accuracy(&self, fm: &FeatureMatrix) -> f64 {
        if fm.labels.is_empty() {
            return 0.0;
        }
        let pred = self.predict(&fm.features);
        pred.iter().zip(&fm.labels).filter(|(p, l)| p == l).count() as f64 / fm.labels.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub probe: LinearProbe,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Full-batch gradient descent on mean cross-entropy plus `reg/2 * ||W||^2`.
pub fn train_linear_probe(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let m = train.labels.len();
    if m == 0 {
        return Err(LqaeError::InvalidArgument("empty probe training set".into()));
    }
    if test.features.cols != train.features.cols {
        return Err(LqaeError::Shape("train and test features differ in width".into()));
    }
    let k = train.labels.iter().max().map_or(0, |&c| c + 1).max(test.labels.iter().max().map_or(0, |&c| c + 1));
    let mut present = vec![false; k];
    train.labels.iter().for_each(|&c| present[c] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(LqaeError::InvalidArgument("probe training data has a single class".into()));
    }
    let f = train.features.cols;
    let mut mean = vec![0.0; f];
    let mut scale = vec![0.0; f];
    for r in 0..m {
        for (acc, &v) in mean.iter_mut().zip(train.features.row(r)) {
            *acc += v / m as f64;
        }
    }
    for r in 0..m {
        for ((acc, &v), mu) in scale.iter_mut().zip(train.features.row(r)).zip(&mean) {
            *acc += (v - mu) * (v - mu) / m as f64;
        }
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { s.sqrt() } else { 1.0 });

    let mut rng = derive_rng(cfg.seed, "probe", 0);
    let init = Normal::new(0.0, 0.01).expect("valid std");
    let weights = Mat::from_fn(f, k, |_, _| init.sample(&mut rng));
    let mut probe = LinearProbe { weights, bias: vec![0.0; k], mean, scale };
    let z = probe.standardize(&train.features);
    for _ in 0..cfg.iterations {
        let mut d = probe.logits(&z);
        for r in 0..m {
            let row = d.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - max).exp() / sum / m as f64;
            }
            row[train.labels[r]] -= 1.0 / m as f64;
        }
        // dW = Z^T D + reg W
        let mut dw = Mat::zeros(f, k);
        lqae_nn::float::gemm(1.0, z.view().t(), d.view(), 0.0, &mut dw.data, 0, k);
        for (g, &w) in dw.data.iter_mut().zip(&probe.weights.data) {
            *g += cfg.reg * w;
        }
        for (w, g) in probe.weights.data.iter_mut().zip(&dw.data) {
            *w -= cfg.lr * g;
        }
        for c in 0..k {
            let db: f64 = (0..m).map(|r| d.get(r, c)).sum();
            probe.bias[c] -= cfg.lr * db;
        }
    }
    if !probe.weights.is_finite() {
        return Err(LqaeError::NumericFailure("linear probe weights".into()));
    }
    Ok(ProbeResult { train_accuracy: probe.accuracy(train), test_accuracy: probe.accuracy(test), probe })
}

/// Embedding output plus every denoiser layer.
pub fn default_layers(depth: usize) -> Vec<usize> {
    (0..=depth).collect()
}

/// Central binomial interval `[lo, hi]` of `Bin(n, p)` at `level`, as
/// fractions of `n`: the smallest counts whose CDF reaches `(1-level)/2`
/// and `(1+level)/2`.
pub fn binomial_band(n: usize, p: f64, level: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (lo_q, hi_q) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut ln_choose = 0.0;
    let mut cdf = 0.0;
    let (mut lo, mut hi) = (None, None);
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        let pmf = match (k, n - k) {
            (0, _) if p == 0.0 => 1.0,
            (_, 0) if p == 1.0 => 1.0,
            _ if p == 0.0 || p == 1.0 => 0.0,
            _ => (ln_choose + k as f64 * lp + (n - k) as f64 * lq).exp(),
        };
        cdf += pmf;
        if lo.is_none() && cdf >= lo_q {
            lo = Some(k);
        }
        if hi.is_none() && cdf >= hi_q - 1e-12 {
            hi = Some(k);
            break;
        }
    }
    let n_f = n as f64;
    (lo.unwrap_or(0) as f64 / n_f, hi.unwrap_or(n) as f64 / n_f)
}

/// Probe accuracy after independently permuting train and test labels.
/// Any structure the probe finds is then spurious, so the result should sit
/// inside the chance band.
pub fn shuffled_label_control(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ProbeResult> {
    use rand::seq::SliceRandom;
    let mut tr = train.clone();
    let mut te = test.clone();
    tr.labels.shuffle(&mut derive_rng(cfg.seed, "shuffled-labels", 0));
    te.labels.shuffle(&mut derive_rng(cfg.seed, "shuffled-labels", 1));
    train_linear_probe(&tr, &te, cfg)
}
