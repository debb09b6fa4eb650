//! Scoring and the settings grid of the few-shot tables.

use serde::{Deserialize, Serialize};

use super::client::CompletionClient;
use super::codes::CodeSource;
use super::episode::sample_episode;
use super::prompt::{ascii_baseline_prompt, build_prompt, PromptOptions};
use crate::error::Result;
use crate::rng::derive_rng;
use crate::training::data::Dataset;

fn normalize(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Correct iff the first line of the completion, lowercased, without the
/// answer stem and with whitespace collapsed, starts with the class name.
pub fn score_episode(completion: &str, true_label: &str) -> bool {
    score_with_stem(completion, true_label, "this is a")
}

pub fn score_with_stem(completion: &str, true_label: &str, stem: &str) -> bool {
    let first = completion.trim_start().split('\n').next().unwrap_or("");
    let mut answer = normalize(first);
    let stem = normalize(stem);
    if !stem.is_empty() {
        if let Some(rest) = answer.strip_prefix(&stem) {
            answer = rest.trim_start().to_string();
        }
    }
    let label = normalize(true_label);
    !label.is_empty() && answer.starts_with(&label)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub ways: usize,
    pub inner_shots: usize,
    pub repeats: usize,
    pub induction: bool,
    pub keep_pct: f64,
}

impl Setting {
    pub fn id(&self) -> String {
        format!(
            "w{}-s{}-r{}-{}-k{}",
            self.ways,
            self.inner_shots,
            self.repeats,
            if self.induction { "ind" } else { "noind" },
            self.keep_pct
        )
    }
}

/// The seven columns of the few-shot tables: no induction at one shot, then
/// induction with shots 1, 3, 5 and repeats 1, 3, 5.
pub fn table_columns(ways: usize, keep_pct: f64) -> Vec<Setting> {
    [(false, 1, 0), (true, 1, 0), (true, 3, 0), (true, 5, 0), (true, 1, 1), (true, 1, 3), (true, 1, 5)]
        .into_iter()
        .map(|(induction, inner_shots, repeats)| Setting { ways, inner_shots, repeats, induction, keep_pct })
        .collect()
}

/// Every combination of induction, inner shots {1, 3, 5} and repeats {0, 1, 3, 5}.
pub fn full_product(ways: usize, keep_pct: f64) -> Vec<Setting> {
    let mut out = Vec::new();
    for induction in [false, true] {
        for inner_shots in [1, 3, 5] {
            for repeats in [0, 1, 3, 5] {
                out.push(Setting { ways, inner_shots, repeats, induction, keep_pct });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub setting_id: String,
    pub ways: usize,
    pub inner_shots: usize,
    pub repeats: usize,
    pub induction: bool,
    pub keep_pct: f64,
    pub episodes: usize,
    pub correct: usize,
    /// Episodes whose completion request failed; scored as incorrect.
    #[serde(default)]
    pub failed: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResults {
    pub records: Vec<GridRecord>,
    /// Mean accuracy over columns.
    pub average: f64,
}

impl GridResults {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
    }
}

/// How images are written into the prompt.
pub enum Renderer<'a> {
    Codes(&'a dyn CodeSource),
    Ascii,
}

/// Runs `episodes` episodes per setting. Episode `e` of a setting draws from
/// a stream derived from `seed`, the setting id and `e`. A failed completion
/// (over budget, retries exhausted, refused) counts as a wrong answer.
pub fn evaluate_grid(
    dataset: &Dataset,
    renderer: &Renderer<'_>,
    client: &mut CompletionClient,
    settings: &[Setting],
    episodes: usize,
    opts: &PromptOptions,
    seed: u64,
) -> Result<GridResults> {
    let mut records = Vec::with_capacity(settings.len());
    for s in settings {
        let id = s.id();
        let mut correct = 0;
        let mut failed = 0;
        let mut first_error = String::new();
        for e in 0..episodes {
            let mut rng = derive_rng(seed, &format!("episode/{id}"), e as u64);
            let ep = sample_episode(dataset, s.ways, s.inner_shots, s.repeats, s.induction, e, &mut rng)?;
            let doc = match renderer {
                Renderer::Codes(coder) => build_prompt(&ep, dataset, *coder, s.keep_pct, opts)?,
                Renderer::Ascii => ascii_baseline_prompt(&ep, dataset, opts),
            };
            match client.complete(&doc) {
                Ok(out) => correct += usize::from(score_with_stem(&out.text, &ep.true_label, &opts.answer_stem)),
                Err(err) => {
                    if failed == 0 {
                        first_error = err.to_string();
                    }
                    failed += 1;
                }
            }
        }
        if failed > 0 {
            log::warn!("{id}: {failed} of {episodes} completions failed, scored as wrong (first: {first_error})");
        }
        records.push(GridRecord {
            setting_id: id,
            ways: s.ways,
            inner_shots: s.inner_shots,
            repeats: s.repeats,
            induction: s.induction,
            keep_pct: s.keep_pct,
            episodes,
            correct,
            failed,
            accuracy: if episodes == 0 { 0.0 } else { correct as f64 / episodes as f64 },
        });
    }
    let average =
        if records.is_empty() { 0.0 } else { records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64 };
    Ok(GridResults { records, average })
}
