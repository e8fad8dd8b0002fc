use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{DatasetContainer, Split};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub split: Split,
}

/// One N-way K-shot task. Support and query are class-major: the `k_shot`
/// (or `m_query`) images of episode class 0 come first. Episode-local labels
/// follow the order in which classes were drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub classes: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

/// Draw `n_way` classes of `spec.split` without replacement, then
/// `k_shot + m_query` distinct images per class; the first `k_shot` go to
/// the support set.
pub fn sample_episode(ds: &DatasetContainer, spec: &EpisodeSpec, seed: u64) -> Result<Episode> {
    if spec.n_way < 2 {
        return Err(Error::Sampling(format!(
            "n_way must be at least 2, got {}",
            spec.n_way
        )));
    }
    if spec.k_shot == 0 {
        return Err(Error::Sampling("k_shot must be at least 1".into()));
    }
    let classes = ds.classes(spec.split);
    if classes.len() < spec.n_way {
        return Err(Error::Sampling(format!(
            "{}-way episode needs {} {} classes, {} available",
            spec.n_way,
            spec.n_way,
            spec.split.name(),
            classes.len()
        )));
    }
    let per_class = spec.k_shot + spec.m_query;
    for &c in &classes {
        let have = ds.class_images(c).len();
        if have < per_class {
            return Err(Error::Sampling(format!(
                "class {c} ({}) has {have} images, episode needs {per_class} ({} shot + {} query)",
                ds.class_names()[c],
                spec.k_shot,
                spec.m_query
            )));
        }
    }
    let mut rng = seed::rng(seed);
    let drawn: Vec<usize> = sample(&mut rng, classes.len(), spec.n_way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut ep = Episode {
        support: Vec::with_capacity(spec.n_way * spec.k_shot),
        support_labels: Vec::with_capacity(spec.n_way * spec.k_shot),
        query: Vec::with_capacity(spec.n_way * spec.m_query),
        query_labels: Vec::with_capacity(spec.n_way * spec.m_query),
        classes: drawn.clone(),
    };
    for (local, &c) in drawn.iter().enumerate() {
        let pool = ds.class_images(c);
        let picks = sample(&mut rng, pool.len(), per_class).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            if j < spec.k_shot {
                ep.support.push(pool[p]);
                ep.support_labels.push(local);
            } else {
                ep.query.push(pool[p]);
                ep.query_labels.push(local);
            }
        }
    }
    Ok(ep)
}

/// Indices drawn for one training step. `labeled` indexes the labeled pool's
/// container, `unlabeled` the unlabeled pool's (which may be a different one).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemiSupBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Sample `b_l` labeled and `b_u` unlabeled items, each without replacement
/// within the batch.
pub fn compose_batch(
    labeled_pool: &[usize],
    unlabeled_pool: &[usize],
    b_l: usize,
    b_u: usize,
    seed: u64,
) -> Result<SemiSupBatch> {
    if b_l > labeled_pool.len() {
        return Err(Error::Sampling(format!(
            "labeled batch of {b_l} requested from a pool of {}",
            labeled_pool.len()
        )));
    }
    if b_u > unlabeled_pool.len() {
        return Err(Error::Sampling(format!(
            "unlabeled batch of {b_u} requested from a pool of {}",
            unlabeled_pool.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let labeled = sample(&mut rng, labeled_pool.len(), b_l)
        .into_iter()
        .map(|i| labeled_pool[i])
        .collect();
    let unlabeled = sample(&mut rng, unlabeled_pool.len(), b_u)
        .into_iter()
        .map(|i| unlabeled_pool[i])
        .collect();
    Ok(SemiSupBatch { labeled, unlabeled })
}

/// Partition of the base-class images into a labeled and an unlabeled view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Keep labels for `round(mu · count)` images of every base class (half
/// rounds up); the rest form the unlabeled pool. Both lists are ascending.
pub fn subsample_labels(ds: &DatasetContainer, mu: f64, seed: u64) -> Result<LabelSplit> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction mu must lie in (0, 1], got {mu}"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for c in ds.classes(Split::Base) {
        let pool = ds.class_images(c);
        let keep = (mu * pool.len() as f64 + 0.5).floor() as usize;
        let keep = keep.min(pool.len());
        if keep == 0 {
            return Err(Error::Sampling(format!(
                "mu = {mu} leaves class {c} ({} images) with no labeled image",
                pool.len()
            )));
        }
        let mut chosen = vec![false; pool.len()];
        for i in sample(&mut rng, pool.len(), keep) {
            chosen[i] = true;
        }
        for (i, &img) in pool.iter().enumerate() {
            if chosen[i] {
                labeled.push(img);
            } else {
                unlabeled.push(img);
            }
        }
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(LabelSplit { labeled, unlabeled })
}
