//! One-switch-at-a-time variant sweeps over a base config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lqae::fewshot::table_columns;
use lqae::training::trainer::{read_metrics, CHECKPOINT_DIR, METRICS_FILE};
use lqae::training::{fit, load_model, FitOptions, LqaeConfig, LqaeModel};
use serde::{Deserialize, Serialize};

use crate::args::{AblateArgs, Common};
use crate::commands::{out_dir, resolve_config, RESOLVED_CONFIG};
use crate::error::{CliError, CliResult};
use crate::eval::{self, ProbeRequest};
use crate::manifest::{now, RunManifest, MANIFEST_FILE};

/// Switches a sweep may vary.
pub const SWITCHES: [&str; 7] =
    ["l2_normalize", "denoiser_pretrained", "entropy_weight", "alpha", "decoder_requantize", "keep_pct", "mask_ratio"];

/// Images per class of the few-shot episode data.
const FEWSHOT_PER_CLASS: usize = 10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepSpec {
    pub entries: Vec<(String, Vec<String>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    /// `base`, or `switch=value`.
    pub id: String,
    pub change: Option<(String, String)>,
}

impl SweepSpec {
    pub fn push(&mut self, switch: &str, values: Vec<String>) -> CliResult<()> {
        let switch = switch.trim();
        if !SWITCHES.contains(&switch) {
            return Err(CliError::Usage(format!(
                "unknown ablation switch `{switch}` (known: {})",
                SWITCHES.join(", ")
            )));
        }
        if values.is_empty() {
            return Err(CliError::Usage(format!("switch `{switch}` has no values")));
        }
        match self.entries.iter_mut().find(|(s, _)| s == switch) {
            Some((_, v)) => v.extend(values),
            None => self.entries.push((switch.to_string(), values)),
        }
        Ok(())
    }

    /// `switch=v1,v2,...`
    pub fn push_arg(&mut self, arg: &str) -> CliResult<()> {
        let (k, v) =
            arg.split_once('=').ok_or_else(|| CliError::Usage(format!("expected SWITCH=V1,V2,..., got `{arg}`")))?;
        self.push(k, split_values(v))
    }

    /// Lines of `switch = v1, v2, ...`; `#` starts a comment.
    pub fn push_file(&mut self, text: &str) -> CliResult<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("sweep file line {}: expected `switch = values`", i + 1)))?;
            self.push(k, split_values(v))?;
        }
        Ok(())
    }

    /// The standard variant table: L2 lookup off, untrained denoiser,
    /// entropy term on, BERT weight 0 and 1, decoder requantization, and
    /// keeping 25/50/75/100% of the codes in prompts.
    pub fn table() -> Self {
        let mut s = SweepSpec::default();
        for (k, v) in [
            ("l2_normalize", "false"),
            ("denoiser_pretrained", "false"),
            ("entropy_weight", "0.5"),
            ("alpha", "0,1"),
            ("decoder_requantize", "true"),
            ("keep_pct", "25,50,75,100"),
        ] {
            s.push(k, split_values(v)).expect("known switches");
        }
        s
    }

    /// One variant per listed value; the base alone for an empty sweep.
    pub fn variants(&self) -> Vec<Variant> {
        if self.entries.is_empty() {
            return vec![Variant { id: "base".into(), change: None }];
        }
        self.entries
            .iter()
            .flat_map(|(k, vs)| {
                vs.iter().map(move |v| Variant { id: format!("{k}={v}"), change: Some((k.clone(), v.clone())) })
            })
            .collect()
    }
}

fn split_values(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse_keep(v: &str) -> CliResult<f64> {
    match v.parse::<f64>() {
        Ok(k) if k > 0.0 && k <= 100.0 => Ok(k),
        _ => Err(CliError::Usage(format!("keep_pct must be a number in (0, 100], got `{v}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub variant: String,
    pub switch: Option<String>,
    pub value: Option<String>,
    pub keep_pct: f64,
    /// Training run the variant was evaluated on; shared by variants that differ only in `keep_pct`.
    pub run: PathBuf,
    pub steps: usize,
    pub final_recon: f64,
    pub probe_accuracy: f64,
    /// Mean over the few-shot columns.
    pub fewshot_accuracy: f64,
    pub fewshot_columns: Vec<f64>,
}

struct Trained {
    dir: PathBuf,
    model: LqaeModel<f32>,
    steps: usize,
    final_recon: f64,
    probe_accuracy: f64,
}

fn slug(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' }).collect()
}

/// Trains (or reuses a finished run in `dir`) and probes one config.
fn train_variant(cfg: &LqaeConfig, dir: &Path, args: &AblateArgs, force: bool) -> CliResult<Trained> {
    let manifest = dir.join(MANIFEST_FILE);
    let io = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", dir.display()));
    if force || !manifest.is_file() {
        fs::create_dir_all(dir).map_err(io)?;
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(io)?;
        }
        let started = now();
        let data = eval::dataset(cfg, "train-data", cfg.n_classes, cfg.n_per_class)?;
        let result = fit(&data, cfg, dir, &FitOptions { resume: None, max_steps: args.max_steps })?;
        let resolved = dir.join(RESOLVED_CONFIG);
        lqae::tensor_io::write_atomic(&resolved, cfg.to_string().as_bytes())?;
        let mut m = RunManifest::new("train", cfg, started);
        m.outputs = vec![resolved, result.metrics, result.checkpoint];
        m.write(dir)?;
    } else {
        log::info!("reusing finished run {}", dir.display());
    }
    let (_, model) = load_model(&dir.join(CHECKPOINT_DIR))?;
    let records = read_metrics(&dir.join(METRICS_FILE))?;
    let req = ProbeRequest { layers: None, per_class: args.probe_per_class, test_fraction: 0.5, save_features: None };
    let probe = eval::probe_model(&model, cfg, &req)?;
    Ok(Trained {
        dir: dir.to_path_buf(),
        model,
        steps: records.last().map_or(0, |r| r.step + 1),
        final_recon: records.last().map_or(f64::NAN, |r| r.recon),
        probe_accuracy: probe.lqae.test_accuracy,
    })
}

pub fn cmd_ablate(common: &Common, args: &AblateArgs) -> CliResult<Vec<AblationRecord>> {
    let base = resolve_config(common, &args.overrides)?;
    let mut spec = SweepSpec::default();
    if args.table {
        spec = SweepSpec::table();
    }
    if let Some(path) = &args.sweep_file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        spec.push_file(&text)?;
    }
    for s in &args.sweeps {
        spec.push_arg(s)?;
    }
    let out = out_dir(common, "ablate");
    let table = out.join("ablation.jsonl");
    let manifest = out.join(MANIFEST_FILE);
    if manifest.is_file() && !common.force {
        eprintln!("{} exists; outputs are up to date (pass --force to recompute)", manifest.display());
        let text = fs::read_to_string(&table).map_err(|e| CliError::Runtime(format!("{}: {e}", table.display())))?;
        return text
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| CliError::Runtime(format!("{}: {e}", table.display()))))
            .collect();
    }

    // Resolve every variant before training anything, so a bad value fails fast.
    let mut plan = Vec::new();
    for v in spec.variants() {
        let mut cfg = base.clone();
        let mut keep = 100.0;
        if let Some((k, val)) = &v.change {
            if k == "keep_pct" {
                keep = parse_keep(val)?;
            } else {
                cfg.set(k, val).map_err(|e| CliError::Usage(format!("variant {}: {e}", v.id)))?;
                cfg.validate().map_err(|e| CliError::Usage(format!("variant {}: {e}", v.id)))?;
            }
        }
        plan.push((v, cfg, keep));
    }

    let started = now();
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    if manifest.exists() {
        fs::remove_file(&manifest).map_err(|e| CliError::Runtime(format!("{}: {e}", manifest.display())))?;
    }
    let mut runs: BTreeMap<String, Trained> = BTreeMap::new();
    let mut records = Vec::with_capacity(plan.len());
    for (v, cfg, keep) in &plan {
        let key = cfg.to_string();
        if !runs.contains_key(&key) {
            let name = if key == base.to_string() { "base".to_string() } else { slug(&v.id) };
            log::info!("training variant {name}");
            let trained = train_variant(cfg, &out.join("variants").join(&name), args, common.force)?;
            runs.insert(key.clone(), trained);
        }
        let t = &runs[&key];
        let grid = eval::mock_fewshot(&t.model, cfg, &table_columns(2, *keep), args.episodes, FEWSHOT_PER_CLASS)?;
        let rec = AblationRecord {
            variant: v.id.clone(),
            switch: v.change.as_ref().map(|c| c.0.clone()),
            value: v.change.as_ref().map(|c| c.1.clone()),
            keep_pct: *keep,
            run: t.dir.clone(),
            steps: t.steps,
            final_recon: t.final_recon,
            probe_accuracy: t.probe_accuracy,
            fewshot_accuracy: grid.average,
            fewshot_columns: grid.records.iter().map(|r| r.accuracy).collect(),
        };
        println!(
            "{:<28} steps {:>4}  recon {:.5}  probe {:.3}  few-shot {:.3}",
            rec.variant, rec.steps, rec.final_recon, rec.probe_accuracy, rec.fewshot_accuracy
        );
        records.push(rec);
    }
    let body: String = records.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect();
    lqae::tensor_io::write_atomic(&table, body.as_bytes())?;
    let mut m = RunManifest::new("ablate", &base, started);
    m.outputs = std::iter::once(table).chain(runs.values().map(|t| t.dir.clone())).collect();
    m.write(&out)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_follow_the_sweep() {
        assert_eq!(SweepSpec::default().variants().len(), 1);
        let mut s = SweepSpec::default();
        s.push_arg("alpha=0, 0.001,1.0").unwrap();
        let ids: Vec<_> = s.variants().into_iter().map(|v| v.id).collect();
        assert_eq!(ids, ["alpha=0", "alpha=0.001", "alpha=1.0"]);
        s.push_file("# masking\nmask_ratio = 0.15, 0.5, 0.9\n").unwrap();
        assert_eq!(s.variants().len(), 6);
    }

    #[test]
    fn unknown_switch_is_a_usage_error() {
        let mut s = SweepSpec::default();
        match s.push_arg("beta=0.1") {
            Err(CliError::Usage(m)) => assert!(m.contains("`beta`")),
            other => panic!("{other:?}"),
        }
        assert!(s.push_file("alpha 0.1").is_err());
        assert!(s.push_arg("alpha=").is_err());
    }

    #[test]
    fn table_covers_every_switch_family() {
        let t = SweepSpec::table();
        let switches: Vec<_> = t.entries.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(
            switches,
            ["l2_normalize", "denoiser_pretrained", "entropy_weight", "alpha", "decoder_requantize", "keep_pct"]
        );
        assert_eq!(t.variants().len(), 10);
    }
}
