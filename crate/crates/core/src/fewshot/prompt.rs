//! Prompt assembly: interleaved image text and class labels.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};

use super::codes::CodeSource;
use super::episode::Episode;
use crate::autoencoder::Image;
use crate::denoiser::{render_text, TokenSequence};
use crate::error::{LqaeError, Result};
use crate::training::data::Dataset;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Induction(String),
    /// Rendered image: code tokens or ASCII art.
    ImageCodes(String),
    Label {
        class: String,
        text: String,
    },
    AnswerStem(String),
}

impl Segment {
    pub fn text(&self) -> &str {
        match self {
            Segment::Induction(t) | Segment::ImageCodes(t) | Segment::AnswerStem(t) => t,
            Segment::Label { text, .. } => text,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptDoc {
    pub text: String,
    /// `ceil(bytes / 4)`, a tokenizer-free size estimate.
    pub token_budget_used: usize,
    pub layout: Vec<Segment>,
}

impl PromptDoc {
    /// Joins segments with single newlines.
    pub fn from_segments(layout: Vec<Segment>) -> Self {
        let text = layout.iter().map(Segment::text).collect::<Vec<_>>().join("\n");
        PromptDoc { token_budget_used: budget_units(&text), text, layout }
    }
}

pub fn budget_units(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptOptions {
    pub induction_text: String,
    /// `{class}` is replaced by the class name.
    pub label_template: String,
    pub answer_stem: String,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            induction_text: "Please answer the question".into(),
            label_template: "this is a {class}".into(),
            answer_stem: "this is a".into(),
        }
    }
}

impl PromptOptions {
    pub fn label(&self, class: &str) -> String {
        self.label_template.replace("{class}", class)
    }

    fn label_prefix(&self) -> &str {
        self.label_template.split("{class}").next().unwrap_or("")
    }

    /// Recovers the segment sequence from prompt text. Label lines are those
    /// starting with the label template's prefix; consecutive other lines form
    /// one image segment.
    pub fn parse(&self, text: &str, induction: bool) -> Result<Vec<Segment>> {
        let mut lines: Vec<&str> = text.split('\n').collect();
        let bad = |m: &str| LqaeError::InvalidArgument(format!("prompt does not parse: {m}"));
        if lines.pop() != Some(self.answer_stem.as_str()) {
            return Err(bad("missing answer stem"));
        }
        let mut out = Vec::new();
        let mut rest = &lines[..];
        if induction {
            match rest.split_first() {
                Some((first, tail)) if *first == self.induction_text => {
                    out.push(Segment::Induction(first.to_string()));
                    rest = tail;
                }
                _ => return Err(bad("missing induction sentence")),
            }
        }
        let prefix = self.label_prefix();
        let suffix = self.label_template.split("{class}").nth(1).unwrap_or("");
        let mut image: Vec<&str> = Vec::new();
        for line in rest {
            if !prefix.is_empty() && line.starts_with(prefix) && line.ends_with(suffix) && !image.is_empty() {
                out.push(Segment::ImageCodes(image.join("\n")));
                image.clear();
                let class = &line[prefix.len()..line.len() - suffix.len()];
                out.push(Segment::Label { class: class.to_string(), text: line.to_string() });
            } else {
                image.push(line);
            }
        }
        if image.is_empty() {
            return Err(bad("missing query image"));
        }
        out.push(Segment::ImageCodes(image.join("\n")));
        out.push(Segment::AnswerStem(self.answer_stem.clone()));
        Ok(out)
    }
}

/// Keeps the first `floor(N * keep_pct / 100)` codes of every sequence.
pub fn truncate_codes(tokens: &TokenSequence, keep_pct: f64) -> Result<TokenSequence> {
    if !(keep_pct > 0.0 && keep_pct <= 100.0) {
        return Err(LqaeError::InvalidArgument(format!("keep_pct must lie in (0, 100], got {keep_pct}")));
    }
    let keep = (tokens.seq as f64 * keep_pct / 100.0).floor() as usize;
    if keep == 0 {
        return Err(LqaeError::InvalidArgument(format!("keeping {keep_pct}% of {} codes leaves none", tokens.seq)));
    }
    let ids = (0..tokens.batch).flat_map(|b| tokens.row(b)[..keep].iter().copied()).collect();
    Ok(TokenSequence { ids, batch: tokens.batch, seq: keep })
}

fn assemble(episode: &Episode, rendered: &[String], query: String, opts: &PromptOptions) -> PromptDoc {
    let mut layout = Vec::with_capacity(2 * episode.support.len() + 3);
    if episode.induction {
        layout.push(Segment::Induction(opts.induction_text.clone()));
    }
    for (item, text) in episode.support.iter().zip(rendered) {
        layout.push(Segment::ImageCodes(text.clone()));
        layout.push(Segment::Label { class: item.class_name.clone(), text: opts.label(&item.class_name) });
    }
    layout.push(Segment::ImageCodes(query));
    layout.push(Segment::AnswerStem(opts.answer_stem.clone()));
    PromptDoc::from_segments(layout)
}

/// Prompt with every image rendered as (truncated) code text.
pub fn build_prompt(
    episode: &Episode,
    dataset: &Dataset,
    coder: &dyn CodeSource,
    keep_pct: f64,
    opts: &PromptOptions,
) -> Result<PromptDoc> {
    let mut items: Vec<usize> = episode.support.iter().map(|s| s.item).collect();
    items.push(episode.query);
    let codes = coder.codes(dataset, &items)?;
    let codes = truncate_codes(&codes, keep_pct)?;
    let rendered: Vec<String> = (0..codes.batch).map(|b| render_text(codes.row(b), coder.codebook())).collect();
    let (query, support) = rendered.split_last().expect("query is present");
    Ok(assemble(episode, support, query.clone(), opts))
}

/// Luminance ramp from black to white.
pub const ASCII_RAMP: &[u8; 10] = b"@%#*+=-:. ";
pub const ASCII_SIDE: usize = 64;

/// 64x64 grayscale rendering through [`ASCII_RAMP`], rows joined by newlines.
pub fn image_to_ascii(img: &Image) -> String {
    let lum: Vec<f32> = img
        .data
        .chunks(img.channels)
        .map(|p| match p {
            [r, g, b, ..] => 0.299 * r + 0.587 * g + 0.114 * b,
            [v, ..] => *v,
            [] => 0.0,
        })
        .collect();
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(img.side as u32, img.side as u32, lum).expect("square image");
    let small = if img.side == ASCII_SIDE {
        buf
    } else {
        imageops::resize(&buf, ASCII_SIDE as u32, ASCII_SIDE as u32, FilterType::Triangle)
    };
    let mut out = String::with_capacity(ASCII_SIDE * (ASCII_SIDE + 1));
    for (i, v) in small.into_raw().into_iter().enumerate() {
        if i > 0 && i % ASCII_SIDE == 0 {
            out.push('\n');
        }
        let k = ((v.clamp(0.0, 1.0) * ASCII_RAMP.len() as f32) as usize).min(ASCII_RAMP.len() - 1);
        out.push(ASCII_RAMP[k] as char);
    }
    out
}

/// Same layout as [`build_prompt`] with ASCII-art images.
pub fn ascii_baseline_prompt(episode: &Episode, dataset: &Dataset, opts: &PromptOptions) -> PromptDoc {
    let rendered: Vec<String> = episode.support.iter().map(|s| image_to_ascii(&dataset.images[s.item])).collect();
    assemble(episode, &rendered, image_to_ascii(&dataset.images[episode.query]), opts)
}
