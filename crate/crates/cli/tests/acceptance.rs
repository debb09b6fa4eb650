//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lqae::denoiser::{masked_count, sample_mask};
use lqae::fewshot::{
    ascii_baseline_prompt, build_prompt, evaluate_grid, full_product, sample_episode, support_len, table_columns,
    ClientConfig, CompletionBackend, CompletionClient, NearestCodesBackend, PromptOptions, RandomLabelBackend,
    Renderer, Segment, Setting, TableCoder,
};
use lqae::quantizer::{nearest_code, Codebook};
use lqae::rng::derive_rng;
use lqae::training::gradcheck::check_encoder_gradients;
use lqae::training::pipeline::{sample_batch_mask, total_loss, LossSettings, LqaeModel};
use lqae::training::trainer::read_metrics;
use lqae::training::{load_model, synthetic_dataset, Dataset, LqaeConfig, MetricsRecord};
use lqae_cli::args::{AblateArgs, Common, TrainArgs};
use lqae_cli::eval::{probe_model, ProbeRequest};
use lqae_cli::{cmd_ablate, cmd_train};
use lqae_nn::{GradStore, Mat, Param, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// The 200-step desk training run shared by the frozen-contract, progress
/// and probe criteria.
struct DeskRun {
    cfg: LqaeConfig,
    dir: PathBuf,
    elapsed: Duration,
    records: Vec<MetricsRecord>,
    model: LqaeModel<f32>,
}

fn desk_run(root: &Path) -> Result<DeskRun, String> {
    let common = Common { out: Some(root.join("desk")), ..Common::default() };
    let t = Instant::now();
    let report = ok(cmd_train(&common, &TrainArgs::default()))?;
    let elapsed = t.elapsed();
    let (cfg, model) = ok(load_model(&report.checkpoint))?;
    Ok(DeskRun { cfg, dir: report.out, elapsed, records: report.records, model })
}

fn quantizer_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for i in 0..1000 {
        let v = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=16);
        let l2 = i % 2 == 0;
        let table = Mat::from_fn(v, d, |_, _| rng.gen_range(-1.0f32..1.0));
        let vocab = (0..v).map(|k| format!("t{k}")).collect();
        let cb = ok(Codebook::new(table.clone(), vocab))?;
        let h: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let unit = |x: &[f32]| -> Vec<f64> {
            let n = x.iter().map(|&a| f64::from(a) * f64::from(a)).sum::<f64>().sqrt();
            x.iter().map(|&a| if l2 { f64::from(a) / n } else { f64::from(a) }).collect()
        };
        let q = unit(&h);
        let mut best = (f64::INFINITY, 0);
        for k in 0..v {
            let c = unit(table.row(k));
            let dist: f64 = q.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, k);
            }
        }
        if ok(nearest_code(&h, &cb, l2))? != best.1 {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    ensure!(mismatches == 0, "{mismatches} of 1000 lookups disagree with the exhaustive scan");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}, limit 10 s");
    Ok(format!("1000 instances, 0 mismatches, {elapsed:.2?}"))
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let cfg = LqaeConfig { alpha: 0.5, entropy_weight: 0.05, ..LqaeConfig::micro() };
    ensure!(
        cfg.seq_len() == 4
            && cfg.code_dim == 8
            && cfg.vocab_size == 16
            && cfg.enc_depth == 1
            && cfg.dec_depth == 1
            && cfg.den_depth == 1,
        "micro preset is not N=4, D=8, V=16 with single layers"
    );
    let mut model = ok(LqaeModel::<f64>::build(&cfg))?;
    let batch = ok(ok(synthetic_dataset(2, 1, cfg.image_side, 11))?.all())?;
    let mask = ok(sample_batch_mask(2, model.seq_len(), cfg.mask_ratio, &mut ChaCha8Rng::seed_from_u64(2)))?;
    let samples = ok(check_encoder_gradients(&mut model, &batch, &mask, &LossSettings::from(&cfg), 20, 1e-5, 5))?;
    let worst = samples.iter().map(|s| s.relative_error(1e-6)).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    ensure!(samples.len() == 20, "{} samples", samples.len());
    ensure!(worst < 1e-3, "worst relative error {worst:.2e}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}, limit 60 s");
    Ok(format!("20 encoder weights, worst relative error {worst:.1e}, {elapsed:.2?}"))
}

/// Encoder/decoder parameters plus the denoiser's, so one gradient store
/// shows whether anything reached the frozen modules.
struct Everything<'a>(&'a LqaeModel<f32>);

impl Parameters<f32> for Everything<'_> {
    fn visit(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.0.visit(f);
        self.0.denoiser.visit(f);
    }

    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param<f32>)) {
        unreachable!("read-only view")
    }
}

fn frozen_contract(run: &DeskRun) -> Outcome {
    let before = ok(LqaeModel::<f32>::build(&run.cfg))?;
    let (cb0, den0) = before.frozen_checksums();
    let (cb1, den1) = run.model.frozen_checksums();
    ensure!(cb0 == cb1, "codebook checksum changed: {cb0} -> {cb1}");
    ensure!(den0 == den1, "denoiser checksum changed: {den0} -> {den1}");
    ensure!(before.trainable_checksum() != run.model.trainable_checksum(), "encoder/decoder did not change either");

    let cfg = LqaeConfig { alpha: 0.0, ..run.cfg.clone() };
    let data = ok(synthetic_dataset(2, 8, cfg.image_side, 3))?;
    let batch = ok(data.all())?;
    let s = LossSettings::from(&cfg);
    let mask =
        ok(sample_batch_mask(batch.batch, run.model.seq_len(), cfg.mask_ratio, &mut ChaCha8Rng::seed_from_u64(4)))?;
    let pass = ok(run.model.forward(&batch, &mask, &s, None))?;
    let mut grads = GradStore::for_params(&Everything(&run.model));
    run.model.backward(&pass, &mut grads, &s);
    let mut nonzero = Vec::new();
    run.model.denoiser.visit(&mut |p| {
        if grads.get(p).iter().any(|&g| g != 0.0) {
            nonzero.push(p.name.clone());
        }
    });
    ensure!(nonzero.is_empty(), "gradients reached denoiser parameters {nonzero:?}");
    let mut enc = 0.0f64;
    run.model.encoder.visit(&mut |p| enc += grads.get(p).iter().map(|&g| f64::from(g).powi(2)).sum::<f64>());
    ensure!(enc > 0.0, "reconstruction and commitment gradients never reached the encoder");
    Ok(format!(
        "checksums unchanged after {} steps; denoiser gradients exactly 0, encoder gradient norm {:.2e}",
        run.records.len(),
        enc.sqrt()
    ))
}

fn loss_composition(run: &DeskRun) -> Outcome {
    ensure!(!run.records.is_empty(), "no logged steps");
    for r in &run.records {
        let sum = r.recon + r.commit + r.bert + r.entropy;
        ensure!(
            (r.total - sum).abs() <= 1e-6 * r.total.abs().max(f64::MIN_POSITIVE),
            "step {}: total {} vs sum {sum}",
            r.step,
            r.total
        );
    }
    let base = LqaeConfig { alpha: 0.5, beta: 0.5, entropy_weight: 0.1, ..LqaeConfig::micro() };
    let batch = ok(ok(synthetic_dataset(2, 2, base.image_side, 9))?.all())?;
    let loss = |cfg: &LqaeConfig| {
        let model = LqaeModel::<f64>::build(cfg).map_err(|e| e.to_string())?;
        total_loss(&batch, &model, cfg, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())
    };
    let on = loss(&base)?;
    ensure!(on.bert > 0.0 && on.commit > 0.0 && on.entropy != 0.0, "all-on terms should be non-zero: {on:?}");
    let no_bert = loss(&LqaeConfig { alpha: 0.0, ..base.clone() })?;
    let no_commit = loss(&LqaeConfig { beta: 0.0, ..base.clone() })?;
    let no_entropy = loss(&LqaeConfig { entropy_weight: 0.0, ..base.clone() })?;
    ensure!(no_bert.bert == 0.0, "alpha=0 leaves bert {}", no_bert.bert);
    ensure!(no_commit.commit == 0.0, "beta=0 leaves commit {}", no_commit.commit);
    ensure!(no_entropy.entropy == 0.0, "entropy_weight=0 leaves entropy {}", no_entropy.entropy);
    Ok(format!(
        "{} logged steps sum to total within 1e-6; alpha/beta/entropy_weight = 0 zero their terms",
        run.records.len()
    ))
}

fn training_progress(run: &DeskRun) -> Outcome {
    let n = run.records.len();
    ensure!(n == 200, "{n} steps logged, expected 200");
    let data = ok(lqae_cli::eval::dataset(&run.cfg, "train-data", run.cfg.n_classes, run.cfg.n_per_class))?;
    ensure!(data.len() == 64, "training set has {} images", data.len());
    let tenth = n / 10;
    let first = median(run.records[..tenth].iter().map(|r| r.recon).collect());
    let last = median(run.records[n - tenth..].iter().map(|r| r.recon).collect());
    ensure!(run.elapsed < Duration::from_secs(300), "200 steps took {:?}, limit 5 min", run.elapsed);
    ensure!(last < first, "median recon rose from {first:.5} to {last:.5}");
    Ok(format!("200 steps in {:.1?}; median recon {first:.5} (first 10%) -> {last:.5} (last 10%)", run.elapsed))
}

fn mask_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    for n in [1usize, 2, 3, 4, 7, 10, 16, 33, 64, 100, 256] {
        for ratio in [0.0, 0.1, 0.15, 0.25, 0.3, 0.5, 0.75, 0.9, 1.0] {
            let want = (ratio * n as f64).round() as usize;
            ensure!(masked_count(n, ratio) == want, "masked_count({n}, {ratio})");
            for _ in 0..5 {
                let m = ok(sample_mask(n, ratio, &mut rng))?;
                ensure!(
                    m.len() == n && m.iter().filter(|&&b| b).count() == want,
                    "N={n} ratio={ratio}: wrong popcount"
                );
            }
            cases += 1;
        }
    }
    let draws = 10_000;
    let mut hits = [0usize; 64];
    for _ in 0..draws {
        for (h, m) in hits.iter_mut().zip(ok(sample_mask(64, 0.5, &mut rng))?) {
            *h += usize::from(m);
        }
    }
    let worst = hits.iter().map(|&h| (h as f64 / draws as f64 - 0.5).abs()).fold(0.0, f64::max);
    ensure!(worst <= 0.02, "a position's masking frequency deviates by {worst:.4}");
    Ok(format!("{cases} (N, ratio) pairs exact; worst per-position deviation {worst:.4} over {draws} draws"))
}

fn probe_pipeline(run: &DeskRun) -> Outcome {
    let req = ProbeRequest { layers: None, per_class: 100, test_fraction: 0.5, save_features: None };
    let report = ok(probe_model(&run.model, &run.cfg, &req))?;
    let [lo, hi] = report.chance_band;
    ensure!(report.lqae.test_accuracy >= 0.65, "held-out accuracy {:.3}", report.lqae.test_accuracy);
    ensure!(
        report.shuffled_within_band,
        "shuffled-label accuracy {:.3} outside [{lo:.3}, {hi:.3}]",
        report.shuffled.test_accuracy
    );
    ensure!(report.lqae.param_count == report.baseline.param_count, "probe sizes differ");
    Ok(format!(
        "held-out accuracy {:.3} on {} images (tiled-encoder baseline {:.3}); shuffled labels {:.3} within [{lo:.3}, {hi:.3}]",
        report.lqae.test_accuracy, report.n_test, report.baseline.test_accuracy, report.shuffled.test_accuracy
    ))
}

/// Same fixture as the prompt golden tests of the core crate.
fn golden_fixture() -> (Dataset, TableCoder) {
    let data = synthetic_dataset(3, 4, 8, 5).expect("fixture data");
    let codebook = Codebook::<f32>::synthetic(32, 4, 11).expect("fixture codebook");
    let table = (0..data.len()).map(|i| (0..8).map(|j| (i * 7 + j * 3 + i * j) % 32).collect()).collect();
    (data, TableCoder { codebook, table })
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

fn random_table(data: &Dataset, len: usize, vocab: usize, seed: u64) -> TableCoder {
    let mut rng = derive_rng(seed, "codes", 0);
    TableCoder {
        codebook: Codebook::synthetic(vocab, 4, seed).expect("codebook"),
        table: (0..data.len()).map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect()).collect(),
    }
}

fn grid_accuracy(
    data: &Dataset,
    coder: &TableCoder,
    backend: Box<dyn CompletionBackend + Send>,
    settings: &[Setting],
    episodes: usize,
) -> Result<Vec<f64>, String> {
    let mut client = CompletionClient::new(ClientConfig::default(), backend);
    let res = ok(evaluate_grid(
        data,
        &Renderer::Codes(coder),
        &mut client,
        settings,
        episodes,
        &PromptOptions::default(),
        3,
    ))?;
    ensure!(res.records.iter().all(|r| r.failed == 0), "some completions failed");
    Ok(res.records.iter().map(|r| r.accuracy).collect())
}

fn fewshot_protocol() -> Outcome {
    let data = ok(synthetic_dataset(5, 7, 8, 1))?;
    let coder = random_table(&data, 16, 64, 2);
    let opts = PromptOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for ways in [2, 5] {
        for s in full_product(ways, 100.0) {
            let want = ways * s.inner_shots * (s.repeats + 1);
            ensure!(support_len(ways, s.inner_shots, s.repeats) == want, "{}: formula", s.id());
            for e in 0..3 {
                let ep = ok(sample_episode(&data, ways, s.inner_shots, s.repeats, s.induction, e, &mut rng))?;
                ensure!(
                    ep.support.len() == want,
                    "{}: support has {} items, expected {want}",
                    s.id(),
                    ep.support.len()
                );
                let doc = ok(build_prompt(&ep, &data, &coder, 100.0, &opts))?;
                let labels = doc.layout.iter().filter(|s| matches!(s, Segment::Label { .. })).count();
                ensure!(labels == want, "{}: prompt has {labels} labels", s.id());
                ensure!(
                    ok(opts.parse(&doc.text, s.induction))? == doc.layout,
                    "{}: prompt does not parse back",
                    s.id()
                );
                checked += 1;
            }
        }
    }

    let (gdata, gcoder) = golden_fixture();
    let prompts = [
        ("w2-s1-r0-ind-k100.txt", 2, 1, 0, true, 0, 100.0),
        ("w2-s1-r1-noind-k50.txt", 2, 1, 1, false, 1, 50.0),
        ("w3-s2-r0-ind-k75.txt", 3, 2, 0, true, 2, 75.0),
    ];
    for (file, ways, shots, repeats, induction, e, keep) in prompts {
        let ep =
            ok(sample_episode(&gdata, ways, shots, repeats, induction, e, &mut derive_rng(17, "golden", e as u64)))?;
        let text = ok(build_prompt(&ep, &gdata, &gcoder, keep, &opts))?.text;
        let want = ok(std::fs::read_to_string(golden_dir().join(file)))?;
        ensure!(text == want, "{file} differs from the generated prompt");
    }
    let ep = ok(sample_episode(&gdata, 2, 1, 0, true, 0, &mut derive_rng(17, "golden", 0)))?;
    let want = ok(std::fs::read_to_string(golden_dir().join("ascii-w2-s1-r0-ind.txt")))?;
    ensure!(ascii_baseline_prompt(&ep, &gdata, &opts).text == want, "ASCII golden differs");

    let one = |ways| [Setting { ways, inner_shots: 1, repeats: 0, induction: true, keep_pct: 100.0 }];
    let random2 = grid_accuracy(&data, &coder, Box::new(RandomLabelBackend::new(4)), &one(2), 500)?[0];
    let random5 = grid_accuracy(&data, &coder, Box::new(RandomLabelBackend::new(5)), &one(5), 500)?[0];
    let nearest2 = grid_accuracy(&data, &coder, Box::new(NearestCodesBackend), &one(2), 500)?[0];
    ensure!((random2 - 0.5).abs() <= 0.06, "2-way random-label accuracy {random2:.3}");
    ensure!((random5 - 0.2).abs() <= 0.06, "5-way random-label accuracy {random5:.3}");
    ensure!((nearest2 - 0.5).abs() <= 0.06, "2-way nearest-codes accuracy on unstructured codes {nearest2:.3}");
    Ok(format!(
        "support length holds in {checked} sampled episodes over both grids; 4 golden prompts match; chance 2-way {random2:.3}, 5-way {random5:.3}, unstructured nearest-codes 2-way {nearest2:.3}"
    ))
}

fn separability() -> Outcome {
    let data = ok(synthetic_dataset(5, 7, 8, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let class_codes: Vec<Vec<usize>> =
        (0..5).map(|c| std::iter::once(c).chain((1..16).map(|_| rng.gen_range(0..64))).collect()).collect();
    let coder = TableCoder {
        codebook: ok(Codebook::synthetic(64, 4, 7))?,
        table: data.labels.iter().map(|&l| class_codes[l].clone()).collect(),
    };
    let mut columns = 0;
    for ways in [2, 5] {
        let mut settings = full_product(ways, 100.0);
        for keep in [25.0, 50.0, 75.0] {
            settings.extend(table_columns(ways, keep));
        }
        let acc = grid_accuracy(&data, &coder, Box::new(NearestCodesBackend), &settings, 20)?;
        for (s, a) in settings.iter().zip(&acc) {
            ensure!(*a == 1.0, "{} scored {a}", s.id());
        }
        columns += settings.len();
    }
    Ok(format!("{columns} columns (2- and 5-way, keep 25-100%) all at accuracy 1.0"))
}

fn determinism(root: &Path) -> Outcome {
    let overrides: Vec<String> = ["preset=micro", "epochs=6"].map(String::from).to_vec();
    let train = |name: &str, max_steps, resume| {
        let common = Common { out: Some(root.join(name)), seed: Some(7), ..Common::default() };
        cmd_train(&common, &TrainArgs { resume, max_steps, overrides: overrides.clone() }).map_err(|e| e.to_string())
    };
    let a = train("replay-a", None, false)?;
    let b = train("replay-b", None, false)?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
    let (ma, mb) = (read(&a.metrics)?, read(&b.metrics)?);
    ensure!(!ma.is_empty() && ma == mb, "metrics logs of identical runs differ");
    let weights = |dir: &Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let mut files: Vec<_> =
            ok(std::fs::read_dir(dir.join("weights")))?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        files.sort();
        files.into_iter().map(|p| Ok((p.file_name().unwrap().to_string_lossy().into_owned(), read(&p)?))).collect()
    };

    train("replay-c", Some(5), false)?;
    let c = train("replay-c", None, true)?;
    ensure!(read(&c.metrics)? == ma, "resumed metrics log differs from the uninterrupted run");
    ensure!(weights(&c.checkpoint)? == weights(&a.checkpoint)?, "resumed weights differ from the uninterrupted run");
    let steps = read_metrics(&a.metrics).map_err(|e| e.to_string())?.len();
    Ok(format!("two runs of {steps} steps byte-identical; stop at step 5 + resume reproduces log and weights"))
}

fn ablation(root: &Path) -> Outcome {
    let common = Common { out: Some(root.join("ablate")), ..Common::default() };
    let args =
        AblateArgs { table: true, max_steps: Some(2), probe_per_class: 20, episodes: 10, ..AblateArgs::default() };
    let t = Instant::now();
    let records = ok(cmd_ablate(&common, &args))?;
    let has = |switch: &str, value: &str| {
        records.iter().any(|r| r.switch.as_deref() == Some(switch) && r.value.as_deref() == Some(value))
    };
    let families = [
        ("l2_normalize", &["false"][..]),
        ("denoiser_pretrained", &["false"]),
        ("entropy_weight", &["0.5"]),
        ("alpha", &["0", "1"]),
        ("decoder_requantize", &["true"]),
        ("keep_pct", &["25", "50", "75", "100"]),
    ];
    for (switch, values) in families {
        for v in values {
            ensure!(has(switch, v), "no record for {switch}={v}");
        }
    }
    ensure!(records.len() == 10, "{} records for 10 variants", records.len());
    for r in &records {
        ensure!(
            (0.0..=1.0).contains(&r.probe_accuracy) && (0.0..=1.0).contains(&r.fewshot_accuracy),
            "{}: accuracy out of range",
            r.variant
        );
        ensure!(
            r.steps == 2 && r.fewshot_columns.len() == 7,
            "{}: {} steps, {} columns",
            r.variant,
            r.steps,
            r.fewshot_columns.len()
        );
        if let (Some(k), Some(v)) = (&r.switch, &r.value) {
            if k != "keep_pct" {
                let cfg = ok(LqaeConfig::load(&r.run.join("config")))?;
                let applied = cfg.entries().into_iter().find(|(key, _)| key == k).map(|(_, val)| val);
                let mut probe = cfg.clone();
                ok(probe.set(k, v))?;
                ensure!(probe.to_string() == cfg.to_string(), "{}: run config has {k} = {applied:?}", r.variant);
            }
        }
    }
    let desk = LqaeConfig::desk();
    let trained = ok(LqaeConfig::load(&records[0].run.join("config")))?;
    ensure!(
        trained.enc_width == desk.enc_width && trained.vocab_size == desk.vocab_size,
        "variants are not desk scale"
    );
    Ok(format!("{} records covering every switch family, keep_pct 25/50/75/100, in {:.1?}", records.len(), t.elapsed()))
}

fn main() {
    // `cargo test <filter>` forwards the filter; skip unless it selects this suite.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut failed = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let (status, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {status} {name}: {detail} [{:.1?}]", t.elapsed());
    };

    report(1, "quantizer matches exhaustive scan", &mut quantizer_oracle);
    report(2, "straight-through gradients match finite differences", &mut gradient_check);
    let desk = desk_run(root);
    let with_desk = |f: fn(&DeskRun) -> Outcome| {
        let desk = &desk;
        move || match desk {
            Ok(run) => f(run),
            Err(e) => Err(format!("desk training run failed: {e}")),
        }
    };
    report(3, "codebook and denoiser stay frozen", &mut with_desk(frozen_contract));
    report(4, "loss total is the sum of its terms", &mut with_desk(loss_composition));
    report(5, "desk training reduces reconstruction error", &mut with_desk(training_progress));
    report(6, "masks are exact and uniform", &mut mask_checks);
    report(7, "linear probe beats chance, shuffled control does not", &mut with_desk(probe_pipeline));
    report(8, "few-shot protocol fidelity", &mut fewshot_protocol);
    report(9, "separable codes score 1.0 on every column", &mut separability);
    report(10, "training replays and resumes deterministically", &mut || determinism(root));
    report(11, "ablation covers every switch family", &mut || ablation(root));
    if let Ok(run) = &desk {
        println!("desk run artifacts were in {}", run.dir.display());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 11 acceptance criteria passed");
}
