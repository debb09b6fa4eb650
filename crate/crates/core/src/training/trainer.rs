//! Optimization loop, metrics log and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lqae_nn::{AdamW, AdamWConfig, GradStore, Parameters};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::LqaeConfig;
use super::data::Dataset;
use super::pipeline::{sample_batch_mask, LossBreakdown, LossSettings, LqaeModel};
use super::schedule::{steps_per_epoch, LrSchedule};
use crate::autoencoder::ImageBatch;
use crate::error::{LqaeError, Result};
use crate::quantizer::{code_usage_stats, Codebook};
use crate::rng::derive_rng;
use crate::tensor_io::{read_tensor_dir, write_atomic, write_tensor_dir, RawTensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub recon: f64,
    pub commit: f64,
    pub bert: f64,
    pub entropy: f64,
    pub total: f64,
    pub perplexity: f64,
}

impl MetricsRecord {
    pub fn loss(&self) -> LossBreakdown {
        LossBreakdown {
            recon: self.recon,
            commit: self.commit,
            bert: self.bert,
            entropy: self.entropy,
            total: self.total,
        }
    }
}

/// Model, optimizer moments and step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: LqaeConfig,
    pub model: LqaeModel<f32>,
    pub optimizer: AdamW<f32>,
    pub step: usize,
    pub schedule: LrSchedule,
}

impl TrainState {
    pub fn new(cfg: &LqaeConfig, steps_per_epoch: usize) -> Result<Self> {
        let model = LqaeModel::build(cfg)?;
        let optimizer = AdamW::new(adam_config(cfg), &model);
        Ok(TrainState { cfg: cfg.clone(), model, optimizer, step: 0, schedule: LrSchedule::new(cfg, steps_per_epoch) })
    }
}

fn adam_config(cfg: &LqaeConfig) -> AdamWConfig {
    AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }
}

/// Forward, backward, clip and AdamW update at `lr`. The returned record
/// describes the loss at the parameters before the update.
pub fn train_step_with_lr(batch: &ImageBatch, state: &mut TrainState, mask: &[bool], lr: f64) -> Result<MetricsRecord> {
    let settings = LossSettings::from(&state.cfg);
    let pass = state.model.forward(batch, mask, &settings, None)?;
    let mut grads = GradStore::for_params(&state.model);
    state.model.backward(&pass, &mut grads, &settings);
    let mut bad = None;
    state.model.visit(&mut |p| {
        if bad.is_none() && grads.get(p).iter().any(|g| !g.is_finite()) {
            bad = Some(p.name.clone());
        }
    });
    if let Some(name) = bad {
        return Err(LqaeError::NumericFailure(format!("gradient of {name} at step {}", state.step)));
    }
    grads.clip_global_norm(state.cfg.grad_clip);
    state.optimizer.update(&mut state.model, &grads, lr);
    let usage = code_usage_stats(&pass.quant.codes, state.model.codebook.len())?;
    let l = pass.loss;
    let record = MetricsRecord {
        step: state.step,
        lr,
        recon: l.recon,
        commit: l.commit,
        bert: l.bert,
        entropy: l.entropy,
        total: l.total,
        perplexity: usage.perplexity,
    };
    state.step += 1;
    Ok(record)
}

/// One scheduled step. The mask stream is derived from the run seed and the
/// step index, so a resumed run draws the same masks.
pub fn train_step(batch: &ImageBatch, state: &mut TrainState) -> Result<MetricsRecord> {
    let mut rng = derive_rng(state.cfg.seed, "mask", state.step as u64);
    let mask = sample_batch_mask(batch.batch, state.model.seq_len(), state.cfg.mask_ratio, &mut rng)?;
    let lr = state.schedule.at(state.step + 1);
    train_step_with_lr(batch, state, &mask, lr)
}

/// Item order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "shuffle", epoch as u64));
    order
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Continue from this checkpoint directory.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many steps have been taken in total.
    pub max_steps: Option<usize>,
}

#[derive(Debug)]
pub struct FitResult {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Records written by this invocation.
    pub records: Vec<MetricsRecord>,
    pub state: TrainState,
}

/// Trains over shuffled batches for `cfg.epochs` epochs, writing
/// `out/metrics.jsonl` and `out/checkpoint`. A checkpoint is written before
/// the first step, every `checkpoint_every` epochs, and at the end.
pub fn fit(dataset: &Dataset, cfg: &LqaeConfig, out: &Path, opts: &FitOptions) -> Result<FitResult> {
    if dataset.is_empty() {
        return Err(LqaeError::InvalidArgument("cannot fit on an empty dataset".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| LqaeError::io(out, e))?;
    let spe = steps_per_epoch(dataset.len(), cfg.batch_size);
    let total = cfg.epochs * spe;
    let metrics = out.join(METRICS_FILE);
    let checkpoint = out.join(CHECKPOINT_DIR);

    let mut state = match &opts.resume {
        Some(dir) => {
            let s = load_checkpoint(dir, spe)?;
            truncate_metrics(&metrics, s.step)?;
            s
        }
        None => {
            let s = TrainState::new(cfg, spe)?;
            fs::write(&metrics, b"").map_err(|e| LqaeError::io(&metrics, e))?;
            save_checkpoint(&s, &checkpoint)?;
            s
        }
    };
    let stop = opts.max_steps.map_or(total, |m| m.min(total));
    let mut log = fs::OpenOptions::new().append(true).open(&metrics).map_err(|e| LqaeError::io(&metrics, e))?;
    let mut records = Vec::new();
    while state.step < stop {
        let epoch = state.step / spe;
        let order = epoch_order(dataset.len(), cfg.seed, epoch);
        let b = state.step % spe;
        let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
        let batch = dataset.batch(idx)?;
        let rec = train_step(&batch, &mut state)?;
        if rec.step % cfg.log_every == 0 {
            let mut line = serde_json::to_string(&rec).expect("plain record serializes");
            line.push('\n');
            log.write_all(line.as_bytes()).map_err(|e| LqaeError::io(&metrics, e))?;
            records.push(rec);
        }
        log::debug!("step {} recon {:.5} total {:.5}", rec.step, rec.recon, rec.total);
        let epoch_done = state.step % spe == 0;
        if epoch_done
            && cfg.checkpoint_every > 0
            && (state.step / spe).is_multiple_of(cfg.checkpoint_every)
            && state.step < stop
        {
            save_checkpoint(&state, &checkpoint)?;
        }
    }
    log.flush().map_err(|e| LqaeError::io(&metrics, e))?;
    if state.step > 0 || opts.resume.is_some() {
        save_checkpoint(&state, &checkpoint)?;
    }
    Ok(FitResult { checkpoint, metrics, records, state })
}

/// Drops metrics lines whose step is at or after `step`.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::new();
    for line in text.lines() {
        let rec: MetricsRecord =
            serde_json::from_str(line).map_err(|e| LqaeError::format(path, format!("bad metrics line: {e}")))?;
        if rec.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| LqaeError::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| LqaeError::format(path, format!("bad metrics line: {e}"))))
        .collect()
}

/// Writes the checkpoint next to `dir` and swaps it into place, so a failed
/// write leaves the previous checkpoint intact.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    let prev = dir.with_extension("prev");
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| LqaeError::io(p, e)
    };
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io(&tmp))?;
    let written = (|| {
        fs::write(tmp.join("config"), state.cfg.to_string()).map_err(io(&tmp))?;
        write_tensor_dir(&tmp.join("weights"), &state.model.tensors())?;
        state.model.codebook.save(&tmp.join("codebook"))?;
        let mut opt = std::collections::BTreeMap::new();
        state.model.visit(&mut |p| {
            opt.insert(format!("m.{}", p.name), RawTensor::from_values(&p.shape, &state.optimizer.first[&p.name]));
            opt.insert(format!("v.{}", p.name), RawTensor::from_values(&p.shape, &state.optimizer.second[&p.name]));
        });
        write_tensor_dir(&tmp.join("state"), &opt)?;
        fs::write(tmp.join("state").join("step"), format!("{}\n{}\n", state.step, state.optimizer.step))
            .map_err(io(&tmp))
    })();
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if prev.exists() {
        fs::remove_dir_all(&prev).map_err(io(&prev))?;
    }
    if dir.exists() {
        fs::rename(dir, &prev).map_err(io(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io(dir))?;
    if prev.exists() {
        fs::remove_dir_all(&prev).map_err(io(&prev))?;
    }
    Ok(())
}

/// Model and config only, for inference commands.
pub fn load_model(dir: &Path) -> Result<(LqaeConfig, LqaeModel<f32>)> {
    if !dir.join("config").is_file() {
        return Err(LqaeError::format(dir, "not a checkpoint directory (no config file)"));
    }
    let cfg = LqaeConfig::load(&dir.join("config"))?;
    let skeleton = LqaeConfig { codebook: None, denoiser_weights: None, ..cfg.clone() };
    let mut model = LqaeModel::build(&skeleton)?;
    model.codebook = Codebook::load(&dir.join("codebook"))?;
    model.load_tensors(&read_tensor_dir(&dir.join("weights"))?)?;
    Ok((cfg, model))
}

pub fn load_checkpoint(dir: &Path, steps_per_epoch: usize) -> Result<TrainState> {
    let (cfg, model) = load_model(dir)?;
    let mut optimizer = AdamW::new(adam_config(&cfg), &model);
    let opt = read_tensor_dir(&dir.join("state"))?;
    let mut result = Ok(());
    model.visit(&mut |p| {
        if result.is_err() {
            return;
        }
        for (prefix, store) in [("m", &mut optimizer.first), ("v", &mut optimizer.second)] {
            let key = format!("{prefix}.{}", p.name);
            match opt.get(&key).map(|t| t.values::<f32>(&key)) {
                Some(Ok(v)) if v.len() == p.numel() => {
                    store.insert(p.name.clone(), v);
                }
                Some(Err(e)) => result = Err(e),
                _ => {
                    result = Err(LqaeError::format(dir, format!("optimizer state for {} missing or misshapen", p.name)))
                }
            }
        }
    });
    result?;
    let step_path = dir.join("state").join("step");
    let text = fs::read_to_string(&step_path).map_err(|e| LqaeError::io(&step_path, e))?;
    let nums: Vec<u64> = text.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    let [step, adam_step] = nums[..] else {
        return Err(LqaeError::format(step_path, "expected two step counters"));
    };
    optimizer.step = adam_step;
    let schedule = LrSchedule::new(&cfg, steps_per_epoch);
    Ok(TrainState { cfg, model, optimizer, step: step as usize, schedule })
}
