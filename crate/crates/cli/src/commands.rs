use std::fs;
use std::path::{Path, PathBuf};

use lqae::autoencoder::ImageBatch;
use lqae::denoiser::render_text;
use lqae::fewshot::{evaluate_grid, full_product, table_columns, CodeSource, MappedCoder, PromptOptions, Renderer};
use lqae::quantizer::Codebook;
use lqae::tensor_io::write_atomic;
use lqae::training::trainer::CHECKPOINT_DIR;
use lqae::training::{
    fit, load_image_file, load_model, save_image_png, FitOptions, LossSettings, LqaeConfig, LqaeModel, MetricsRecord,
};

use crate::args::{Common, EncodeArgs, FewshotArgs, Grid, ProbeArgs, ReconstructArgs, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::eval::{self, ProbeRequest};
use crate::manifest::{now, RunManifest, MANIFEST_FILE};

/// Name of the resolved config written next to every run's outputs.
pub const RESOLVED_CONFIG: &str = "config";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Applies the config file (or desk defaults), then `KEY=VALUE` overrides,
/// then `--seed`, and validates.
pub fn resolve_config(common: &Common, overrides: &[String]) -> CliResult<LqaeConfig> {
    resolve_config_from(LqaeConfig::desk(), common, overrides)
}

fn resolve_config_from(base: LqaeConfig, common: &Common, overrides: &[String]) -> CliResult<LqaeConfig> {
    let mut cfg = match &common.config {
        None => base,
        Some(p) if !p.is_file() => return Err(CliError::Usage(format!("config file {} not found", p.display()))),
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            LqaeConfig::parse(&RunManifest::read(p)?.config_text())?
        }
        Some(p) => LqaeConfig::load(p)?,
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{o}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| Path::new("runs").join(command))
}

/// Manifest of a finished earlier run that should be left alone.
fn finished_run(out: &Path, force: bool) -> Option<PathBuf> {
    let m = out.join(MANIFEST_FILE);
    (m.is_file() && !force).then_some(m)
}

/// Creates `out` and drops any manifest, so outputs count as incomplete until
/// the new one is written.
fn begin(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let m = out.join(MANIFEST_FILE);
    if m.exists() {
        fs::remove_file(&m).map_err(io_err(&m))?;
    }
    Ok(())
}

fn skip_notice(manifest: &Path) {
    eprintln!("{} exists; outputs are up to date (pass --force to recompute)", manifest.display());
}

/// Accepts a checkpoint directory or a training output directory holding one.
pub fn resolve_checkpoint(path: &Path) -> CliResult<PathBuf> {
    if path.join("config").is_file() && path.join("weights").is_dir() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join(CHECKPOINT_DIR);
    if nested.join("config").is_file() {
        return Ok(nested);
    }
    Err(CliError::Usage(format!("no checkpoint at {}", path.display())))
}

fn load_images(paths: &[PathBuf], side: usize) -> CliResult<Vec<lqae::autoencoder::Image>> {
    paths
        .iter()
        .map(|p| {
            if !p.is_file() {
                return Err(CliError::Usage(format!("image {} not found", p.display())));
            }
            Ok(load_image_file(p, side)?)
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

#[derive(Debug)]
pub struct TrainReport {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Absent when `--max-steps` stopped the run early.
    pub manifest: PathBuf,
    /// Records logged by this invocation; empty when the run was already complete.
    pub records: Vec<MetricsRecord>,
    pub skipped: bool,
}

pub fn cmd_train(common: &Common, args: &TrainArgs) -> CliResult<TrainReport> {
    let cfg = resolve_config(common, &args.overrides)?;
    let out = out_dir(common, "train");
    let checkpoint = out.join(CHECKPOINT_DIR);
    let metrics = out.join(lqae::training::trainer::METRICS_FILE);
    if !args.resume {
        if let Some(manifest) = finished_run(&out, common.force) {
            skip_notice(&manifest);
            return Ok(TrainReport { out, checkpoint, metrics, manifest, records: Vec::new(), skipped: true });
        }
    } else {
        let saved = resolve_checkpoint(&checkpoint)
            .map_err(|_| CliError::Usage(format!("nothing to resume in {}", out.display())))?;
        let saved_cfg = LqaeConfig::load(&saved.join("config"))?;
        if saved_cfg.to_string() != cfg.to_string() {
            return Err(CliError::Usage("resolved config differs from the checkpoint being resumed".into()));
        }
    }
    begin(&out)?;
    let started = now();
    let data = eval::dataset(&cfg, "train-data", cfg.n_classes, cfg.n_per_class)?;
    let opts = FitOptions { resume: args.resume.then(|| checkpoint.clone()), max_steps: args.max_steps };
    let result = fit(&data, &cfg, &out, &opts)?;
    let resolved = out.join(RESOLVED_CONFIG);
    write_text(&resolved, &cfg.to_string())?;

    let total_steps = cfg.epochs * lqae::training::schedule::steps_per_epoch(data.len(), cfg.batch_size);
    if let Some(last) = result.records.last() {
        println!(
            "trained to step {} of {total_steps}: recon {:.5} total {:.5} perplexity {:.1}",
            result.state.step, last.recon, last.total, last.perplexity
        );
    }
    println!("checkpoint {}", result.checkpoint.display());
    // A run cut short by --max-steps stays incomplete so that --resume can finish it.
    let manifest = if result.state.step < total_steps {
        eprintln!("stopped before the end of the schedule; rerun with --resume to continue");
        out.join(MANIFEST_FILE)
    } else {
        let mut manifest = RunManifest::new("train", &cfg, started);
        manifest.outputs = vec![resolved, result.metrics.clone(), result.checkpoint.clone()];
        manifest.write(&out)?
    };
    Ok(TrainReport {
        out,
        checkpoint: result.checkpoint,
        metrics: result.metrics,
        manifest,
        records: result.records,
        skipped: false,
    })
}

fn load_checkpoint_model(path: &Path) -> CliResult<(LqaeConfig, LqaeModel<f32>)> {
    Ok(load_model(&resolve_checkpoint(path)?)?)
}

/// One line per image: space-separated tokens, or ids with `--ids`.
pub fn cmd_encode(common: &Common, args: &EncodeArgs) -> CliResult<Vec<String>> {
    let file = if args.ids { "ids.txt" } else { "codes.txt" };
    if let Some(out) = &common.out {
        if let Some(manifest) = finished_run(out, common.force) {
            skip_notice(&manifest);
            let text = fs::read_to_string(out.join(file)).map_err(io_err(out))?;
            let lines: Vec<String> = text.lines().map(String::from).collect();
            lines.iter().for_each(|l| println!("{l}"));
            return Ok(lines);
        }
    }
    let (cfg, model) = load_checkpoint_model(&args.checkpoint)?;
    let images = load_images(&args.images, cfg.image_side)?;
    let started = now();
    let mut lines = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let refs: Vec<_> = chunk.iter().collect();
        let codes = model.encode_codes(&ImageBatch::from_images(&refs, None)?, cfg.l2_normalize)?;
        for b in 0..codes.batch {
            let row = codes.row(b);
            lines.push(if args.ids {
                row.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
            } else {
                render_text(row, &model.codebook)
            });
        }
    }
    lines.iter().for_each(|l| println!("{l}"));
    if let Some(out) = &common.out {
        begin(out)?;
        let path = out.join(file);
        write_text(&path, &lines.iter().map(|l| format!("{l}\n")).collect::<String>())?;
        let mut manifest = RunManifest::new("encode", &cfg, started);
        manifest.outputs = vec![path];
        manifest.write(out)?;
    }
    Ok(lines)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct Reconstruction {
    pub input: PathBuf,
    pub output: PathBuf,
    pub mse: f64,
}

pub fn cmd_reconstruct(common: &Common, args: &ReconstructArgs) -> CliResult<Vec<Reconstruction>> {
    let out = out_dir(common, "reconstruct");
    if let Some(manifest) = finished_run(&out, common.force) {
        skip_notice(&manifest);
        return Ok(Vec::new());
    }
    let (cfg, model) = load_checkpoint_model(&args.checkpoint)?;
    let images = load_images(&args.images, cfg.image_side)?;
    let started = now();
    begin(&out)?;
    let settings = LossSettings::from(&cfg);
    let mut rows = Vec::with_capacity(images.len());
    for (c, chunk) in images.chunks(32).enumerate() {
        let refs: Vec<_> = chunk.iter().collect();
        let recon = model.reconstruct(&ImageBatch::from_images(&refs, None)?, &settings)?;
        for (j, original) in chunk.iter().enumerate() {
            let i = c * 32 + j;
            let img = recon.image(j);
            let stem = args.images[i].file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let output = out.join(format!("{i:03}-{stem}.png"));
            save_image_png(&img, &output)?;
            let mse = img.data.iter().zip(&original.data).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>()
                / img.data.len() as f64;
            println!("{} -> {} mse {mse:.5}", args.images[i].display(), output.display());
            rows.push(Reconstruction { input: args.images[i].clone(), output, mse });
        }
    }
    let table = out.join("reconstructions.jsonl");
    write_text(&table, &rows.iter().map(|r| serde_json::to_string(r).expect("plain row") + "\n").collect::<String>())?;
    let mut manifest = RunManifest::new("reconstruct", &cfg, started);
    manifest.outputs = rows.iter().map(|r| r.output.clone()).chain([table]).collect();
    manifest.write(&out)?;
    Ok(rows)
}

/// Evaluation config: the checkpoint's (or `--config`), overrides, `--seed`.
/// Image size always follows the checkpoint.
fn eval_config(ckpt_cfg: &LqaeConfig, common: &Common, overrides: &[String]) -> CliResult<LqaeConfig> {
    let mut cfg = resolve_config_from(ckpt_cfg.clone(), common, overrides)?;
    cfg.image_side = ckpt_cfg.image_side;
    cfg.l2_normalize = ckpt_cfg.l2_normalize;
    Ok(cfg)
}

pub fn cmd_probe(common: &Common, args: &ProbeArgs) -> CliResult<Option<eval::ProbeReport>> {
    let out = out_dir(common, "probe");
    if let Some(manifest) = finished_run(&out, common.force) {
        skip_notice(&manifest);
        return Ok(None);
    }
    let (ckpt_cfg, model) = load_checkpoint_model(&args.checkpoint)?;
    let cfg = eval_config(&ckpt_cfg, common, &args.overrides)?;
    let started = now();
    begin(&out)?;
    let req = ProbeRequest {
        layers: args.layers.as_deref(),
        per_class: args.per_class,
        test_fraction: args.test_fraction,
        save_features: args.save_features.then_some(out.as_path()),
    };
    let report = eval::probe_model(&model, &cfg, &req)?;
    println!(
        "layers {:?}: probe {:.3} ({} params), tiled encoder {:.3} ({} params), shuffled labels {:.3} (chance band {:.3}..{:.3})",
        report.layers,
        report.lqae.test_accuracy,
        report.lqae.param_count,
        report.baseline.test_accuracy,
        report.baseline.param_count,
        report.shuffled.test_accuracy,
        report.chance_band[0],
        report.chance_band[1]
    );
    let path = out.join("probe.json");
    write_text(&path, &serde_json::to_string_pretty(&report).expect("plain report"))?;
    let mut manifest = RunManifest::new("probe", &cfg, started);
    manifest.outputs = vec![path];
    if args.save_features {
        manifest.outputs.extend(
            ["features_train.mat", "features_test.mat", "baseline_train.mat", "baseline_test.mat"].map(|f| out.join(f)),
        );
    }
    manifest.write(&out)?;
    Ok(Some(report))
}

pub fn cmd_fewshot(common: &Common, args: &FewshotArgs) -> CliResult<Option<lqae::fewshot::GridResults>> {
    let out = out_dir(common, "fewshot");
    if let Some(manifest) = finished_run(&out, common.force) {
        skip_notice(&manifest);
        return Ok(None);
    }
    if args.ways < 2 {
        return Err(CliError::Usage(format!("--ways must be at least 2, got {}", args.ways)));
    }
    let loaded = match (&args.checkpoint, args.ascii) {
        (Some(p), _) => Some(load_checkpoint_model(p)?),
        (None, true) => None,
        (None, false) => {
            return Err(CliError::Usage("pass --checkpoint, or --ascii for the ASCII-art baseline".into()))
        }
    };
    let cfg = match &loaded {
        Some((ckpt_cfg, _)) => eval_config(ckpt_cfg, common, &args.overrides)?,
        None => resolve_config(common, &args.overrides)?,
    };
    let started = now();
    let data = eval::dataset(&cfg, "fewshot-data", cfg.n_classes.max(args.ways), args.per_class)?;
    let settings = match args.grid {
        Grid::Columns => table_columns(args.ways, args.keep_pct),
        Grid::Full => full_product(args.ways, args.keep_pct),
    };
    let opts = PromptOptions {
        induction_text: args.induction_text.clone(),
        label_template: args.label_template.clone(),
        answer_stem: args.answer_stem.clone(),
    };
    let mut client = eval::client(args.backend, cfg.seed, args.token_budget);

    let model_coder = match &loaded {
        Some((_, m)) => Some(eval::code_table(m, cfg.l2_normalize, &data)?),
        None => None,
    };
    let mapped = match (&model_coder, &args.code_mapping, &args.target_codebook) {
        (Some(inner), Some(map), Some(target)) => {
            let text = fs::read_to_string(map).map_err(|e| CliError::Usage(format!("{}: {e}", map.display())))?;
            Some(MappedCoder {
                inner,
                mapping: MappedCoder::parse_mapping(&text)?,
                target: Codebook::load(target).map_err(|e| CliError::Usage(e.to_string()))?,
            })
        }
        _ => None,
    };
    let coder: Option<&dyn CodeSource> = match (&mapped, &model_coder) {
        (Some(m), _) => Some(m),
        (None, Some(c)) => Some(c),
        _ => None,
    };
    let renderer = match coder {
        Some(c) if !args.ascii => Renderer::Codes(c),
        _ => Renderer::Ascii,
    };
    begin(&out)?;
    let results = evaluate_grid(&data, &renderer, &mut client, &settings, args.episodes, &opts, cfg.seed)?;
    for r in &results.records {
        let failed = if r.failed > 0 { format!(", {} failed", r.failed) } else { String::new() };
        println!("{:<24} {:.3} ({}/{}{failed})", r.setting_id, r.accuracy, r.correct, r.episodes);
    }
    println!("{:<24} {:.3}", "average", results.average);
    let path = out.join("fewshot.jsonl");
    write_text(&path, &results.to_jsonl())?;
    let mut manifest = RunManifest::new("fewshot", &cfg, started);
    manifest.outputs = vec![path];
    manifest.write(&out)?;
    Ok(Some(results))
}
