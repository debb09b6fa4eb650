//! Probe and few-shot evaluation shared by `probe`, `fewshot` and `ablate`.

use std::path::Path;

use lqae::fewshot::{
    evaluate_grid, ClientConfig, CodeSource, CompletionBackend, CompletionClient, GridResults, ModelCoder,
    NearestCodesBackend, PromptOptions, RandomLabelBackend, Renderer, Setting, TableCoder,
};
use lqae::probing::{
    baseline_replicated_features, binomial_band, default_layers, extract_probe_features, probe_param_count,
    shuffled_label_control, train_linear_probe, ProbeConfig,
};
use lqae::rng::derive_seed;
use lqae::training::{load_image_folder, synthetic_dataset, Dataset, LqaeConfig, LqaeModel};
use serde::{Deserialize, Serialize};

use crate::args::Backend;
use crate::error::{CliError, CliResult};

/// Labeled images for a purpose named by `stream`. Synthetic data is drawn
/// from a seed derived from the config seed and `stream`, so training,
/// probing and few-shot sets never share images.
pub fn dataset(cfg: &LqaeConfig, stream: &str, n_classes: usize, per_class: usize) -> CliResult<Dataset> {
    if cfg.dataset == "synthetic" {
        return Ok(synthetic_dataset(n_classes, per_class, cfg.image_side, derive_seed(cfg.seed, stream, 0))?);
    }
    let dir = Path::new(&cfg.dataset);
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("dataset directory {} not found", dir.display())));
    }
    Ok(load_image_folder(dir, cfg.image_side)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layers: Vec<usize>,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub lqae: ProbeScore,
    /// Encoder output tiled to the same width.
    pub baseline: ProbeScore,
    /// LQAE features with permuted labels.
    pub shuffled: ProbeScore,
    /// Central 95% binomial interval of accuracy under guessing.
    pub chance_band: [f64; 2],
    pub shuffled_within_band: bool,
}

pub struct ProbeRequest<'a> {
    pub layers: Option<&'a [usize]>,
    pub per_class: usize,
    pub test_fraction: f64,
    pub save_features: Option<&'a Path>,
}

pub fn probe_model(model: &LqaeModel<f32>, cfg: &LqaeConfig, req: &ProbeRequest<'_>) -> CliResult<ProbeReport> {
    if !(req.test_fraction > 0.0 && req.test_fraction < 1.0) {
        return Err(CliError::Usage(format!("test fraction must lie in (0, 1), got {}", req.test_fraction)));
    }
    let layers = req.layers.map_or_else(|| default_layers(model.denoiser.cfg.depth), <[usize]>::to_vec);
    let data = dataset(cfg, "probe-data", cfg.n_classes, req.per_class)?;
    let (train, test) = data.split(req.test_fraction, derive_seed(cfg.seed, "probe-split", 0));
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Usage(format!("{} probe images are too few to split", data.len())));
    }
    let pcfg = ProbeConfig { seed: cfg.seed, ..ProbeConfig::default() };

    let ftr = extract_probe_features(model, &data, &train, &layers, cfg.l2_normalize)?;
    let fte = extract_probe_features(model, &data, &test, &layers, cfg.l2_normalize)?;
    let btr = baseline_replicated_features(model, &data, &train, layers.len())?;
    let bte = baseline_replicated_features(model, &data, &test, layers.len())?;
    if let Some(dir) = req.save_features {
        ftr.save(&dir.join("features_train.mat"))?;
        fte.save(&dir.join("features_test.mat"))?;
        btr.save(&dir.join("baseline_train.mat"))?;
        bte.save(&dir.join("baseline_test.mat"))?;
    }
    let k = data.n_classes();
    let score = |r: lqae::probing::ProbeResult, f: usize| ProbeScore {
        train_accuracy: r.train_accuracy,
        test_accuracy: r.test_accuracy,
        param_count: probe_param_count(f, k),
    };
    let lqae = score(train_linear_probe(&ftr, &fte, &pcfg)?, ftr.features.cols);
    let baseline = score(train_linear_probe(&btr, &bte, &pcfg)?, btr.features.cols);
    let shuffled = score(shuffled_label_control(&ftr, &fte, &pcfg)?, ftr.features.cols);
    let (lo, hi) = binomial_band(test.len(), 1.0 / k as f64, 0.95);
    Ok(ProbeReport {
        layers,
        n_classes: k,
        n_train: train.len(),
        n_test: test.len(),
        shuffled_within_band: (lo..=hi).contains(&shuffled.test_accuracy),
        lqae,
        baseline,
        shuffled,
        chance_band: [lo, hi],
    })
}

pub fn client(backend: Backend, seed: u64, token_budget: usize) -> CompletionClient {
    let b: Box<dyn CompletionBackend + Send> = match backend {
        Backend::Nearest => Box::new(NearestCodesBackend),
        Backend::Random => Box::new(RandomLabelBackend::new(derive_seed(seed, "backend", 0))),
    };
    CompletionClient::new(ClientConfig { token_budget, ..ClientConfig::default() }, b)
}

/// Codes of every dataset item, computed once so episodes only look them up.
pub fn code_table(model: &LqaeModel<f32>, l2_normalize: bool, data: &Dataset) -> CliResult<TableCoder> {
    let items: Vec<usize> = (0..data.len()).collect();
    let coder = ModelCoder { model, l2_normalize };
    let mut table = Vec::with_capacity(items.len());
    for chunk in items.chunks(32) {
        let codes = coder.codes(data, chunk)?;
        table.extend((0..codes.batch).map(|b| codes.row(b).to_vec()));
    }
    Ok(TableCoder { codebook: model.codebook.clone(), table })
}

/// Mock-backed few-shot accuracy of a model's codes on freshly drawn episode data.
pub fn mock_fewshot(
    model: &LqaeModel<f32>,
    cfg: &LqaeConfig,
    settings: &[Setting],
    episodes: usize,
    per_class: usize,
) -> CliResult<GridResults> {
    let ways = settings.iter().map(|s| s.ways).max().unwrap_or(2);
    let data = dataset(cfg, "fewshot-data", cfg.n_classes.max(ways), per_class)?;
    let coder = code_table(model, cfg.l2_normalize, &data)?;
    let mut client = client(Backend::Nearest, cfg.seed, ClientConfig::default().token_budget);
    Ok(evaluate_grid(
        &data,
        &Renderer::Codes(&coder),
        &mut client,
        settings,
        episodes,
        &PromptOptions::default(),
        cfg.seed,
    )?)
}
