//! Nearest-neighbour quantization against a frozen text-token codebook.
//!
//! The forward value of the straight-through latent is the selected codebook
//! row; its backward pass is the identity onto the encoder output. The
//! codebook never receives gradient.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use lqae_nn::{Float, Mat};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{LqaeError, Result};
use crate::rng::derive_rng;
use crate::tensor_io::{read_matrix_file, write_matrix_file, Checksum};

pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Frozen `V x D` embedding table with one token string per row.
#[derive(Clone, Debug)]
pub struct Codebook<T = f32> {
    embeddings: Mat<T>,
    vocab: Vec<String>,
    frozen: bool,
    /// Rows in f32, raw and unit-normalized, for the lookup.
    rows32: Vec<f32>,
    unit32: Vec<f32>,
    index: HashMap<String, usize>,
}

impl<T: Float> Codebook<T> {
    pub fn new(embeddings: Mat<T>, vocab: Vec<String>) -> Result<Self> {
        if embeddings.rows == 0 || embeddings.cols == 0 {
            return Err(LqaeError::InvalidArgument("codebook must be non-empty".into()));
        }
        if vocab.len() != embeddings.rows {
            return Err(LqaeError::Shape(format!(
                "codebook has {} rows but {} vocabulary entries",
                embeddings.rows,
                vocab.len()
            )));
        }
        if !embeddings.is_finite() {
            return Err(LqaeError::InvalidArgument("codebook contains non-finite entries".into()));
        }
        if let Some(i) = vocab.iter().position(|s| s.is_empty() || s.contains(char::is_whitespace)) {
            return Err(LqaeError::InvalidArgument(format!("vocabulary entry {i} is empty or contains whitespace")));
        }
        let d = embeddings.cols;
        let rows32: Vec<f32> = embeddings.data.iter().map(|v| v.as_f32()).collect();
        let mut unit32 = rows32.clone();
        for row in unit32.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            index.entry(tok.clone()).or_insert(i);
        }
        Ok(Codebook { embeddings, vocab, frozen: true, rows32, unit32, index })
    }

    /// Seeded stand-in for a pretrained word-embedding table: rows drawn from
    /// `N(0, 1/D)` (so row norms are near 1) and pronounceable pseudo-words.
    pub fn synthetic(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = derive_rng(seed, "codebook", 0);
        let dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let embeddings = Mat::from_fn(vocab_size, dim, |_, _| T::lit(dist.sample(&mut rng)));
        let vocab = pseudo_words(vocab_size, seed);
        Codebook::new(embeddings, vocab)
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn embeddings(&self) -> &Mat<T> {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.embeddings.row(i)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, i: usize) -> &str {
        &self.vocab[i]
    }

    /// First row whose token string is `token`.
    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn checksum(&self) -> String {
        let mut c = Checksum::default();
        c.add_values("codebook.embeddings", &[self.len(), self.dim()], &self.embeddings.data);
        for tok in &self.vocab {
            c.add_bytes(tok.as_bytes());
            c.add_bytes(b"\n");
        }
        c.hex()
    }

    pub fn cast<U: Float>(&self) -> Codebook<U> {
        Codebook::new(self.embeddings.cast(), self.vocab.clone()).expect("cast preserves validity")
    }

    /// Writes `embeddings.bin` (f32 matrix file) and `vocab.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LqaeError::io(dir, e))?;
        write_matrix_file(&dir.join(EMBEDDINGS_FILE), self.len(), self.dim(), &self.rows32)?;
        let mut text = self.vocab.join("\n");
        text.push('\n');
        let path = dir.join(VOCAB_FILE);
        fs::write(&path, text).map_err(|e| LqaeError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (rows, cols, data) = read_matrix_file(&dir.join(EMBEDDINGS_FILE))?;
        let path = dir.join(VOCAB_FILE);
        let text = fs::read_to_string(&path).map_err(|e| LqaeError::io(&path, e))?;
        let vocab: Vec<String> = text.lines().map(str::to_string).collect();
        let embeddings = Mat::from_vec(rows, cols, data.into_iter().map(|v| T::lit(v as f64)).collect());
        Codebook::new(embeddings, vocab).map_err(|e| LqaeError::format(dir, e.to_string()))
    }
}

/// Deterministic unique consonant-vowel pseudo-words.
fn pseudo_words(n: usize, seed: u64) -> Vec<String> {
    const CONS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    let syllables: Vec<String> = CONS.iter().flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}"))).collect();
    let mut words = Vec::new();
    let mut len = 2;
    while words.len() < n {
        let mut layer: Vec<String> = vec![String::new()];
        for _ in 0..len {
            layer = layer.iter().flat_map(|p| syllables.iter().map(move |s| format!("{p}{s}"))).collect();
            if layer.len() > 4 * n + 1000 {
                break;
            }
        }
        let mut rng = derive_rng(seed, "vocab", len as u64);
        layer.shuffle(&mut rng);
        words.extend(layer.into_iter().take(n - words.len()));
        len += 1;
    }
    words
}

/// Index of the codebook row closest to `h` in squared Euclidean distance,
/// accumulated in f32. With `l2_normalize` both sides are scaled to unit norm
/// first. Ties go to the smallest index.
pub fn nearest_code<T: Float>(h: &[T], codebook: &Codebook<T>, l2_normalize: bool) -> Result<usize> {
    let d = codebook.dim();
    if h.len() != d {
        return Err(LqaeError::Shape(format!("query has dim {}, codebook dim {d}", h.len())));
    }
    let mut q: Vec<f32> = h.iter().map(|v| v.as_f32()).collect();
    if q.iter().any(|v| !v.is_finite()) {
        return Err(LqaeError::NumericFailure("quantizer query".into()));
    }
    let rows = if l2_normalize {
        let norm = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm == 0.0 {
            return Err(LqaeError::DegenerateInput("zero-norm latent under L2-normalized lookup".into()));
        }
        q.iter_mut().for_each(|v| *v /= norm);
        &codebook.unit32
    } else {
        &codebook.rows32
    };
    let mut best = 0;
    let mut best_dist = f32::INFINITY;
    for (i, row) in rows.chunks_exact(d).enumerate() {
        let mut dist = 0.0f32;
        for (a, b) in q.iter().zip(row) {
            let diff = a - b;
            dist += diff * diff;
        }
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    Ok(best)
}

/// Output of [`quantize`] for `N` latent rows.
#[derive(Clone, Debug)]
pub struct QuantizationResult<T> {
    pub codes: Vec<usize>,
    /// Codebook rows at `codes`, bit-identical to the table.
    pub quantized: Mat<T>,
    /// Straight-through latent. Its value equals `quantized`; its gradient is
    /// routed to the encoder output by [`QuantizationResult::backward`].
    pub ste_latent: Mat<T>,
    pub commit_loss: T,
    pub beta: T,
}

/// Quantizes every row of `h` and computes the commitment loss
/// `beta * mean_i ||h_i - sg(z_i)||^2`.
pub fn quantize<T: Float>(
    h: &Mat<T>,
    codebook: &Codebook<T>,
    l2_normalize: bool,
    beta: f64,
) -> Result<QuantizationResult<T>> {
    if beta < 0.0 {
        return Err(LqaeError::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let codes = (0..h.rows).map(|i| nearest_code(h.row(i), codebook, l2_normalize)).collect::<Result<Vec<_>>>()?;
    Ok(assemble(h, codebook, codes, beta))
}

/// Quantization with codes fixed in advance (no lookup).
pub fn quantize_with_codes<T: Float>(
    h: &Mat<T>,
    codebook: &Codebook<T>,
    codes: &[usize],
    beta: f64,
) -> QuantizationResult<T> {
    assemble(h, codebook, codes.to_vec(), beta)
}

fn assemble<T: Float>(h: &Mat<T>, codebook: &Codebook<T>, codes: Vec<usize>, beta: f64) -> QuantizationResult<T> {
    let d = codebook.dim();
    let mut quantized = Mat::zeros(h.rows, d);
    for (i, &c) in codes.iter().enumerate() {
        quantized.row_mut(i).copy_from_slice(codebook.row(c));
    }
    let beta_t = T::lit(beta);
    let commit_loss = if beta == 0.0 || h.rows == 0 {
        T::zero()
    } else {
        let total: T = h.data.iter().zip(&quantized.data).map(|(&a, &b)| (a - b) * (a - b)).sum();
        beta_t * total / T::lit(h.rows as f64)
    };
    QuantizationResult { ste_latent: quantized.clone(), codes, quantized, commit_loss, beta: beta_t }
}

impl<T: Float> QuantizationResult<T> {
    /// Gradient reaching the encoder output: identity from the straight-through
    /// latent plus the commitment term.
    pub fn backward(&self, h: &Mat<T>, d_ste: Option<&Mat<T>>) -> Mat<T> {
        let mut dh = match d_ste {
            Some(d) => d.clone(),
            None => Mat::zeros(h.rows, h.cols),
        };
        if self.beta != T::zero() {
            let scale = T::lit(2.0) * self.beta / T::lit(h.rows as f64);
            for ((g, &a), &b) in dh.data.iter_mut().zip(&h.data).zip(&self.quantized.data) {
                *g += scale * (a - b);
            }
        }
        dh
    }
}

/// Stop-gradient values captured at an anchor point. Replaying a forward pass
/// with an anchor evaluates the straight-through surrogate
/// `ste(h) = h + (z0 - h0)`, `commit(h) = beta * mean ||h - z0||^2`, whose
/// ordinary derivative is what the straight-through backward computes. Used
/// for finite-difference checks.
#[derive(Clone, Debug)]
pub struct SteAnchor<T> {
    pub codes: Vec<usize>,
    pub offset: Mat<T>,
}

impl<T: Float> SteAnchor<T> {
    pub fn capture(h0: &Mat<T>, q: &QuantizationResult<T>) -> Self {
        let mut offset = q.quantized.clone();
        for (o, &h) in offset.data.iter_mut().zip(&h0.data) {
            *o -= h;
        }
        SteAnchor { codes: q.codes.clone(), offset }
    }

    pub fn replay(&self, h: &Mat<T>, codebook: &Codebook<T>, beta: f64) -> QuantizationResult<T> {
        let mut q = quantize_with_codes(h, codebook, &self.codes, beta);
        let mut ste = h.clone();
        ste.add_assign(&self.offset);
        q.ste_latent = ste;
        q
    }
}

/// `weight * sum_v pbar_v log pbar_v`, where `pbar` is the position-averaged
/// softmax of negative squared distances to every code. Returns the value and
/// its gradient with respect to `h`. Weight 0 returns exactly zero without
/// touching the codebook.
pub fn entropy_regularizer<T: Float>(h: &Mat<T>, codebook: &Codebook<T>, weight: f64) -> Result<(T, Mat<T>)> {
    if weight < 0.0 {
        return Err(LqaeError::InvalidArgument(format!("entropy weight must be >= 0, got {weight}")));
    }
    if weight == 0.0 || h.rows == 0 {
        return Ok((T::zero(), Mat::zeros(h.rows, h.cols)));
    }
    let v = codebook.len();
    let m = h.rows;
    let c = codebook.embeddings();
    // -||h_i - c_v||^2 = 2 h.c - |h|^2 - |c|^2
    let mut probs = h.matmul_t(c);
    let c_sq: Vec<T> = (0..v).map(|j| c.row(j).iter().map(|&x| x * x).sum()).collect();
    let two = T::lit(2.0);
    for i in 0..m {
        let h_sq: T = h.row(i).iter().map(|&x| x * x).sum();
        for (j, p) in probs.row_mut(i).iter_mut().enumerate() {
            *p = two * *p - h_sq - c_sq[j];
        }
    }
    lqae_nn::attention::softmax_rows(&mut probs.data, v);
    let inv_m = T::lit(1.0 / m as f64);
    let mut pbar = vec![T::zero(); v];
    for i in 0..m {
        for (acc, &p) in pbar.iter_mut().zip(probs.row(i)) {
            *acc += p * inv_m;
        }
    }
    let w = T::lit(weight);
    let neg_entropy: T = pbar.iter().filter(|&&p| p > T::zero()).map(|&p| p * p.ln()).sum();
    // dL/dp_iv = w (log pbar_v + 1) / M
    let g: Vec<T> =
        pbar.iter().map(|&p| if p > T::zero() { w * (p.ln() + T::one()) * inv_m } else { T::zero() }).collect();
    // Through the softmax: dL/ds_iv = p_iv (g_v - sum_u p_iu g_u), with
    // s_iv = -||h_i - c_v||^2 so ds_iv/dh_i = -2 (h_i - c_v).
    let mut ds = Mat::zeros(m, v);
    let mut row_sum = vec![T::zero(); m];
    for (i, rs) in row_sum.iter_mut().enumerate() {
        let pr = probs.row(i);
        let gbar: T = pr.iter().zip(&g).map(|(&p, &gv)| p * gv).sum();
        for ((d, &p), &gv) in ds.row_mut(i).iter_mut().zip(pr).zip(&g) {
            *d = p * (gv - gbar);
            *rs += *d;
        }
    }
    // dh_i = -2 sum_v ds_iv (h_i - c_v) = -2 (rowsum_i h_i - ds_i C)
    let mut dh = ds.matmul(c);
    for (i, &rs) in row_sum.iter().enumerate() {
        for (o, &hv) in dh.row_mut(i).iter_mut().zip(h.row(i)) {
            *o = two * (*o - rs * hv);
        }
    }
    Ok((w * neg_entropy, dh))
}

/// Codebook usage over a batch of codes.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeUsage {
    pub histogram: Vec<u64>,
    /// `exp` of the entropy of the empirical code distribution, in `[1, V]`.
    pub perplexity: f64,
}

pub fn code_usage_stats(codes: &[usize], vocab_size: usize) -> Result<CodeUsage> {
    if codes.is_empty() {
        return Err(LqaeError::InvalidArgument("code usage of an empty batch".into()));
    }
    let mut histogram = vec![0u64; vocab_size];
    for &c in codes {
        if c >= vocab_size {
            return Err(LqaeError::Range(format!("code {c} outside vocabulary of {vocab_size}")));
        }
        histogram[c] += 1;
    }
    let n = codes.len() as f64;
    let entropy: f64 = histogram
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(CodeUsage { histogram, perplexity: entropy.exp() })
}
