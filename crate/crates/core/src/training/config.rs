//! Run configuration: presets, flat `key = value` files and overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autoencoder::AutoencoderConfig;
use crate::denoiser::{BertLossSign, DenoiserConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("{0}")]
    Constraint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Micro,
    Full,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Micro => "micro",
            Preset::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Preset::Desk),
            "micro" => Some(Preset::Micro),
            "full" => Some(Preset::Full),
            _ => None,
        }
    }
}

/// How the denoiser sees unmasked positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiserInput {
    /// Straight-through latent rows; gradient reaches the encoder.
    Continuous,
    /// Codebook rows re-embedded from the discrete ids; no gradient.
    Discrete,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqaeConfig {
    pub preset: Preset,

    pub alpha: f64,
    pub beta: f64,
    pub mask_ratio: f64,
    pub l2_normalize: bool,
    pub entropy_weight: f64,
    pub decoder_requantize: bool,
    pub bert_loss_sign: BertLossSign,
    pub denoiser_input: DenoiserInput,

    pub peak_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,

    pub image_side: usize,
    pub patch: usize,
    pub channels: usize,
    pub code_dim: usize,
    pub vocab_size: usize,
    pub enc_width: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub den_depth: usize,
    pub den_heads: usize,
    pub den_mlp_ratio: usize,
    pub denoiser_pretrained: bool,
    pub denoiser_weights: Option<PathBuf>,
    pub codebook: Option<PathBuf>,

    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,

    /// `synthetic` or a directory of per-class image folders.
    pub dataset: String,
    pub n_classes: usize,
    pub n_per_class: usize,
}

impl Default for LqaeConfig {
    fn default() -> Self {
        LqaeConfig::desk()
    }
}

impl LqaeConfig {
    pub fn desk() -> Self {
        LqaeConfig {
            preset: Preset::Desk,
            alpha: 0.001,
            beta: 0.005,
            mask_ratio: 0.5,
            l2_normalize: true,
            entropy_weight: 0.0,
            decoder_requantize: false,
            bert_loss_sign: BertLossSign::NegativeLogLikelihood,
            denoiser_input: DenoiserInput::Continuous,
            peak_lr: 1e-3,
            weight_decay: 0.0005,
            epochs: 100,
            warmup_epochs: 5,
            batch_size: 32,
            grad_clip: 1.0,
            image_side: 32,
            patch: 4,
            channels: 3,
            code_dim: 64,
            vocab_size: 512,
            enc_width: 128,
            enc_depth: 4,
            enc_heads: 4,
            dec_width: 128,
            dec_depth: 4,
            dec_heads: 4,
            mlp_ratio: 4,
            den_depth: 2,
            den_heads: 4,
            den_mlp_ratio: 4,
            denoiser_pretrained: true,
            denoiser_weights: None,
            codebook: None,
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
            dataset: "synthetic".into(),
            n_classes: 2,
            n_per_class: 32,
        }
    }

    /// Four-token model for gradient checks: 8x8 images, patch 4, D=8, V=16.
    pub fn micro() -> Self {
        LqaeConfig {
            preset: Preset::Micro,
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 2,
            image_side: 8,
            patch: 4,
            code_dim: 8,
            vocab_size: 16,
            enc_width: 16,
            enc_depth: 1,
            enc_heads: 2,
            dec_width: 16,
            dec_depth: 1,
            dec_heads: 2,
            mlp_ratio: 2,
            den_depth: 1,
            den_heads: 2,
            den_mlp_ratio: 2,
            n_per_class: 2,
            ..LqaeConfig::desk()
        }
    }

    pub fn full() -> Self {
        LqaeConfig {
            preset: Preset::Full,
            peak_lr: 1.5e-4,
            batch_size: 512,
            image_side: 256,
            patch: 16,
            code_dim: 768,
            vocab_size: 50265,
            enc_width: 768,
            enc_depth: 12,
            enc_heads: 12,
            dec_width: 768,
            dec_depth: 12,
            dec_heads: 12,
            den_depth: 12,
            den_heads: 12,
            n_per_class: 1300,
            ..LqaeConfig::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => LqaeConfig::desk(),
            Preset::Micro => LqaeConfig::micro(),
            Preset::Full => LqaeConfig::full(),
        }
    }

    pub fn autoencoder(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            image_side: self.image_side,
            patch: self.patch,
            channels: self.channels,
            code_dim: self.code_dim,
            enc_width: self.enc_width,
            enc_depth: self.enc_depth,
            enc_heads: self.enc_heads,
            dec_width: self.dec_width,
            dec_depth: self.dec_depth,
            dec_heads: self.dec_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            width: self.code_dim,
            depth: self.den_depth,
            heads: self.den_heads,
            mlp_ratio: self.den_mlp_ratio,
            seq: self.seq_len(),
            vocab: self.vocab_size,
        }
    }

    pub fn seq_len(&self) -> usize {
        let g = self.image_side / self.patch.max(1);
        g * g
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "preset" => {
                let p = Preset::parse(v).ok_or_else(|| invalid(k, v, "expected desk, micro or full"))?;
                *self = LqaeConfig::preset(p);
            }
            "alpha" => self.alpha = real(k, v)?,
            "beta" => self.beta = real(k, v)?,
            "mask_ratio" => self.mask_ratio = real(k, v)?,
            "l2_normalize" => self.l2_normalize = boolean(k, v)?,
            "entropy_weight" => self.entropy_weight = real(k, v)?,
            "decoder_requantize" => self.decoder_requantize = boolean(k, v)?,
            "bert_loss_sign" => {
                self.bert_loss_sign = match v {
                    "nll" => BertLossSign::NegativeLogLikelihood,
                    "literal" => BertLossSign::LogLikelihood,
                    _ => return Err(invalid(k, v, "expected nll or literal")),
                }
            }
            "denoiser_input" => {
                self.denoiser_input = match v {
                    "continuous" => DenoiserInput::Continuous,
                    "discrete" => DenoiserInput::Discrete,
                    _ => return Err(invalid(k, v, "expected continuous or discrete")),
                }
            }
            "peak_lr" => self.peak_lr = real(k, v)?,
            "weight_decay" => self.weight_decay = real(k, v)?,
            "epochs" => self.epochs = int(k, v)?,
            "warmup_epochs" => self.warmup_epochs = int(k, v)?,
            "batch_size" => self.batch_size = int(k, v)?,
            "grad_clip" => self.grad_clip = real(k, v)?,
            "image_side" => self.image_side = int(k, v)?,
            "patch" => self.patch = int(k, v)?,
            "channels" => self.channels = int(k, v)?,
            "code_dim" => self.code_dim = int(k, v)?,
            "vocab_size" => self.vocab_size = int(k, v)?,
            "enc_width" => self.enc_width = int(k, v)?,
            "enc_depth" => self.enc_depth = int(k, v)?,
            "enc_heads" => self.enc_heads = int(k, v)?,
            "dec_width" => self.dec_width = int(k, v)?,
            "dec_depth" => self.dec_depth = int(k, v)?,
            "dec_heads" => self.dec_heads = int(k, v)?,
            "mlp_ratio" => self.mlp_ratio = int(k, v)?,
            "den_depth" => self.den_depth = int(k, v)?,
            "den_heads" => self.den_heads = int(k, v)?,
            "den_mlp_ratio" => self.den_mlp_ratio = int(k, v)?,
            "denoiser_pretrained" => self.denoiser_pretrained = boolean(k, v)?,
            "denoiser_weights" => self.denoiser_weights = path(v),
            "codebook" => self.codebook = path(v),
            "seed" => self.seed = v.parse().map_err(|_| invalid(k, v, "expected an unsigned integer"))?,
            "log_every" => self.log_every = int(k, v)?,
            "checkpoint_every" => self.checkpoint_every = int(k, v)?,
            "dataset" => self.dataset = v.to_string(),
            "n_classes" => self.n_classes = int(k, v)?,
            "n_per_class" => self.n_per_class = int(k, v)?,
            _ => return Err(ConfigError::UnknownKey(k.to_string())),
        }
        Ok(())
    }

    /// Every key and its current value, in a fixed order. `preset` comes
    /// first so that replaying the list reproduces the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("preset", self.preset.name().into()),
            ("alpha", fmt_real(self.alpha)),
            ("beta", fmt_real(self.beta)),
            ("mask_ratio", fmt_real(self.mask_ratio)),
            ("l2_normalize", self.l2_normalize.to_string()),
            ("entropy_weight", fmt_real(self.entropy_weight)),
            ("decoder_requantize", self.decoder_requantize.to_string()),
            (
                "bert_loss_sign",
                match self.bert_loss_sign {
                    BertLossSign::NegativeLogLikelihood => "nll".into(),
                    BertLossSign::LogLikelihood => "literal".into(),
                },
            ),
            (
                "denoiser_input",
                match self.denoiser_input {
                    DenoiserInput::Continuous => "continuous".into(),
                    DenoiserInput::Discrete => "discrete".into(),
                },
            ),
            ("peak_lr", fmt_real(self.peak_lr)),
            ("weight_decay", fmt_real(self.weight_decay)),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("grad_clip", fmt_real(self.grad_clip)),
            ("image_side", self.image_side.to_string()),
            ("patch", self.patch.to_string()),
            ("channels", self.channels.to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("enc_width", self.enc_width.to_string()),
            ("enc_depth", self.enc_depth.to_string()),
            ("enc_heads", self.enc_heads.to_string()),
            ("dec_width", self.dec_width.to_string()),
            ("dec_depth", self.dec_depth.to_string()),
            ("dec_heads", self.dec_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("den_depth", self.den_depth.to_string()),
            ("den_heads", self.den_heads.to_string()),
            ("den_mlp_ratio", self.den_mlp_ratio.to_string()),
            ("denoiser_pretrained", self.denoiser_pretrained.to_string()),
            ("denoiser_weights", opt(&self.denoiser_weights)),
            ("codebook", opt(&self.codebook)),
            ("seed", self.seed.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("dataset", self.dataset.clone()),
            ("n_classes", self.n_classes.to_string()),
            ("n_per_class", self.n_per_class.to_string()),
        ]
    }

    /// Parses a config file body. A `preset` line is applied before all other
    /// keys wherever it appears.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: line.to_string() })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = LqaeConfig::desk();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::LqaeError::io(path, e))?;
        Ok(LqaeConfig::parse(&text)?)
    }

    /// Applies `KEY=VALUE` overrides in order, then validates.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self, ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: o.to_string() })?;
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = |ok: bool, msg: String| if ok { Ok(()) } else { Err(ConfigError::Constraint(msg)) };
        c(self.alpha >= 0.0 && self.alpha.is_finite(), format!("alpha must be >= 0, got {}", self.alpha))?;
        c(self.beta >= 0.0 && self.beta.is_finite(), format!("beta must be >= 0, got {}", self.beta))?;
        c(
            self.entropy_weight >= 0.0 && self.entropy_weight.is_finite(),
            format!("entropy_weight must be >= 0, got {}", self.entropy_weight),
        )?;
        c((0.0..=1.0).contains(&self.mask_ratio), format!("mask_ratio must lie in [0, 1], got {}", self.mask_ratio))?;
        c(self.peak_lr >= 0.0 && self.peak_lr.is_finite(), format!("peak_lr must be >= 0, got {}", self.peak_lr))?;
        c(self.weight_decay >= 0.0, format!("weight_decay must be >= 0, got {}", self.weight_decay))?;
        c(self.grad_clip > 0.0, format!("grad_clip must be > 0, got {}", self.grad_clip))?;
        c(
            self.warmup_epochs <= self.epochs,
            format!("warmup_epochs ({}) exceeds epochs ({})", self.warmup_epochs, self.epochs),
        )?;
        c(self.batch_size >= 1, "batch_size must be >= 1".into())?;
        c(
            self.patch >= 1 && self.image_side.is_multiple_of(self.patch),
            format!("image_side {} is not divisible by patch {}", self.image_side, self.patch),
        )?;
        c(
            self.channels >= 1 && self.code_dim >= 1 && self.vocab_size >= 1,
            "channels, code_dim and vocab_size must be >= 1".into(),
        )?;
        for (name, w, h) in [
            ("enc", self.enc_width, self.enc_heads),
            ("dec", self.dec_width, self.dec_heads),
            ("den", self.code_dim, self.den_heads),
        ] {
            c(h >= 1 && w % h == 0, format!("{name} width {w} is not divisible by {h} heads"))?;
        }
        c(self.n_classes >= 2, format!("n_classes must be >= 2, got {}", self.n_classes))?;
        c(self.n_per_class >= 1, "n_per_class must be >= 1".into())?;
        c(self.log_every >= 1, "log_every must be >= 1".into())?;
        Ok(())
    }
}

impl fmt::Display for LqaeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn invalid(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn real(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| invalid(key, v, "expected a finite number"))
}

fn int(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| invalid(key, v, "expected a non-negative integer"))
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, v, "expected true or false")),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_real(x: f64) -> String {
    format!("{x:?}")
}
