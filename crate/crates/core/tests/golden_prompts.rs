//! Prompt text is compared byte for byte against checked-in files.
//! Set `LQAE_BLESS=1` to rewrite them after an intended format change.

use std::path::PathBuf;

use lqae::fewshot::{ascii_baseline_prompt, build_prompt, sample_episode, PromptOptions, TableCoder};
use lqae::quantizer::Codebook;
use lqae::rng::derive_rng;
use lqae::training::{synthetic_dataset, Dataset};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

fn check(name: &str, text: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("LQAE_BLESS").is_some() {
        std::fs::write(&path, text).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, want, "{name} differs from the checked-in prompt");
}

fn fixture() -> (Dataset, TableCoder) {
    let data = synthetic_dataset(3, 4, 8, 5).unwrap();
    let codebook = Codebook::<f32>::synthetic(32, 4, 11).unwrap();
    let table = (0..data.len()).map(|i| (0..8).map(|j| (i * 7 + j * 3 + i * j) % 32).collect()).collect();
    (data, TableCoder { codebook, table })
}

#[test]
fn two_way_one_shot_with_induction() {
    let (data, coder) = fixture();
    let ep = sample_episode(&data, 2, 1, 0, true, 0, &mut derive_rng(17, "golden", 0)).unwrap();
    let doc = build_prompt(&ep, &data, &coder, 100.0, &PromptOptions::default()).unwrap();
    check("w2-s1-r0-ind-k100.txt", &doc.text);
}

#[test]
fn two_way_repeated_and_truncated() {
    let (data, coder) = fixture();
    let ep = sample_episode(&data, 2, 1, 1, false, 1, &mut derive_rng(17, "golden", 1)).unwrap();
    let doc = build_prompt(&ep, &data, &coder, 50.0, &PromptOptions::default()).unwrap();
    check("w2-s1-r1-noind-k50.txt", &doc.text);
}

#[test]
fn three_way_two_shot() {
    let (data, coder) = fixture();
    let ep = sample_episode(&data, 3, 2, 0, true, 2, &mut derive_rng(17, "golden", 2)).unwrap();
    let doc = build_prompt(&ep, &data, &coder, 75.0, &PromptOptions::default()).unwrap();
    check("w3-s2-r0-ind-k75.txt", &doc.text);
}

#[test]
fn ascii_baseline() {
    let (data, _) = fixture();
    let ep = sample_episode(&data, 2, 1, 0, true, 0, &mut derive_rng(17, "golden", 0)).unwrap();
    check("ascii-w2-s1-r0-ind.txt", &ascii_baseline_prompt(&ep, &data, &PromptOptions::default()).text);
}
