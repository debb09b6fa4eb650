//! Episode sampling for n-way few-shot classification.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{LqaeError, Result};
use crate::training::data::Dataset;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportItem {
    /// Index into the dataset.
    pub item: usize,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub ways: usize,
    pub inner_shots: usize,
    pub repeats: usize,
    pub induction: bool,
    /// Sampled class ids in interleaving order.
    pub classes: Vec<usize>,
    pub support: Vec<SupportItem>,
    pub query: usize,
    pub true_label: String,
}

pub fn support_len(ways: usize, inner_shots: usize, repeats: usize) -> usize {
    ways * inner_shots * (repeats + 1)
}

/// Samples `ways` classes and `inner_shots` distinct images of each. Support
/// items are interleaved by shot round (`[c1_1, c2_1, c1_2, c2_2, ...]`), each
/// followed by its `repeats` copies. The query is one further image of the
/// query class. Which sampled class takes the query role rotates with
/// `episode_index`, so labels are balanced over consecutive episodes.
pub fn sample_episode<R: Rng>(
    dataset: &Dataset,
    ways: usize,
    inner_shots: usize,
    repeats: usize,
    induction: bool,
    episode_index: usize,
    rng: &mut R,
) -> Result<Episode> {
    if ways == 0 || inner_shots == 0 {
        return Err(LqaeError::Sampling("ways and inner_shots must be at least 1".into()));
    }
    let per_class: Vec<Vec<usize>> = (0..dataset.n_classes()).map(|c| dataset.class_indices(c)).collect();
    let eligible: Vec<usize> = (0..per_class.len()).filter(|&c| per_class[c].len() > inner_shots).collect();
    if eligible.len() < ways {
        return Err(LqaeError::Sampling(format!(
            "{ways}-way {inner_shots}-shot episodes need {ways} classes with at least {} images; {} qualify",
            inner_shots + 1,
            eligible.len()
        )));
    }
    let classes: Vec<usize> = sample(rng, eligible.len(), ways).into_iter().map(|i| eligible[i]).collect();
    let query_role = episode_index % ways;
    let mut shots = Vec::with_capacity(ways);
    let mut query = 0;
    for (k, &c) in classes.iter().enumerate() {
        let extra = usize::from(k == query_role);
        let picked: Vec<usize> =
            sample(rng, per_class[c].len(), inner_shots + extra).into_iter().map(|i| per_class[c][i]).collect();
        if extra == 1 {
            query = picked[inner_shots];
        }
        shots.push(picked);
    }
    let mut support = Vec::with_capacity(support_len(ways, inner_shots, repeats));
    for shot in 0..inner_shots {
        for (picked, &c) in shots.iter().zip(&classes) {
            let item = SupportItem { item: picked[shot], class_name: dataset.class_names[c].clone() };
            for _ in 0..=repeats {
                support.push(item.clone());
            }
        }
    }
    Ok(Episode {
        ways,
        inner_shots,
        repeats,
        induction,
        true_label: dataset.class_names[classes[query_role]].clone(),
        classes,
        support,
        query,
    })
}
