//! Second-stage episodic evaluation on frozen features.

use std::collections::BTreeSet;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, DatasetContainer, Episode, EpisodeSpec, Split};
use crate::error::{Error, Result};
use crate::models::{argmax_rows, compute_prototypes, cosine_scores, pn_scores, Model};
use crate::tensor::{Real, Similarity, Tensor};
use crate::training::Method;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes: usize,
    /// Episode `i` is sampled with seed `base_seed + i`.
    pub base_seed: u64,
    pub method: Method,
    /// Query-to-prototype similarity for PN.
    pub similarity: Similarity,
    pub split: Split,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_way: 5,
            k_shot: 1,
            m_query: 15,
            episodes: 2000,
            base_seed: 0,
            method: Method::Cc,
            similarity: Similarity::NegSqEuclidean,
            split: Split::Novel,
        }
    }
}

impl EvalProtocol {
    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            m_query: self.m_query,
            split: self.split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config(
                "evaluation needs at least one episode".into(),
            ));
        }
        if self.m_query == 0 {
            return Err(Error::Config(
                "evaluation episodes need at least one query per class".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub mean: f64,
    /// `1.96 s / sqrt(E)` with the Bessel-corrected deviation; 0 when E = 1.
    pub ci95: f64,
    pub ci95_defined: bool,
    pub episode_acc: Vec<f64>,
    pub checkpoint_sha256: String,
}

/// Mean and 95% half-width of per-episode accuracies.
pub fn mean_ci95(acc: &[f64]) -> (f64, Option<f64>) {
    let e = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / e;
    if acc.len() < 2 {
        return (mean, None);
    }
    let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (e - 1.0);
    (mean, Some(1.96 * var.sqrt() / e.sqrt()))
}

/// Eval-mode features of a set of images, looked up by dataset index.
pub struct FeatureBank<T> {
    rows: Vec<Option<usize>>,
    feats: Tensor<T>,
}

impl<T: Real> FeatureBank<T> {
    /// Embed `images` (dataset indices) with up to `workers` threads. The
    /// images are split into fixed chunks, so the result does not depend on
    /// the worker count.
    pub fn build(
        model: &Model<T>,
        ds: &DatasetContainer,
        images: &[usize],
        workers: usize,
    ) -> Result<Self> {
        const CHUNK: usize = 256;
        let chunks: Vec<&[usize]> = images.chunks(CHUNK).collect();
        let workers = workers.clamp(1, chunks.len().max(1));
        let mut parts: Vec<Option<Result<Tensor<T>>>> = (0..chunks.len()).map(|_| None).collect();
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|c| (c, model.embed(&ds.batch(chunks[c]))))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (c, r) in h.join().expect("embedding worker panicked") {
                    parts[c] = Some(r);
                }
            }
        });
        let parts: Vec<Tensor<T>> = parts
            .into_iter()
            .map(|p| p.expect("every chunk embedded"))
            .collect::<Result<_>>()?;
        let feats = if parts.is_empty() {
            Tensor::zeros(&[0, model.arch().feature_dim()])
        } else {
            Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())?
        };
        let mut rows = vec![None; ds.len()];
        for (r, &i) in images.iter().enumerate() {
            rows[i] = Some(r);
        }
        Ok(FeatureBank { rows, feats })
    }

    pub fn features(&self, images: &[usize]) -> Result<Tensor<T>> {
        let rows =
            images
                .iter()
                .map(|&i| {
                    self.rows.get(i).copied().flatten().ok_or_else(|| {
                        Error::Contract(format!("image {i} is not in the feature bank"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
        self.feats.select_rows(&rows)
    }
}

fn check_method<T: Real>(model: &Model<T>, method: Method) -> Result<()> {
    if method == Method::Cc && model.classifier().is_none() {
        return Err(Error::Compatibility(
            "cosine-classifier evaluation needs a checkpoint with a classifier (and its gamma)"
                .into(),
        ));
    }
    Ok(())
}

/// Query class scores of one episode given support and query features.
pub fn score_queries<T: Real>(
    model: &Model<T>,
    support: &Tensor<T>,
    support_labels: &[usize],
    query: &Tensor<T>,
    n_way: usize,
    method: Method,
    sim: Similarity,
) -> Result<Tensor<T>> {
    check_method(model, method)?;
    let protos = compute_prototypes(support, support_labels, n_way)?;
    match method {
        Method::Cc => {
            let gamma = model
                .classifier()
                .expect("checked above")
                .gamma(model.store());
            cosine_scores(query, &protos, gamma)
        }
        Method::Pn => pn_scores(query, &protos, sim),
    }
}

fn accuracy<T: Real>(scores: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = argmax_rows(scores)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

fn episode_accuracy<T: Real>(
    model: &Model<T>,
    bank: &FeatureBank<T>,
    ep: &Episode,
    method: Method,
    sim: Similarity,
) -> Result<f64> {
    let support = bank.features(&ep.support)?;
    let query = bank.features(&ep.query)?;
    let scores = score_queries(
        model,
        &support,
        &ep.support_labels,
        &query,
        ep.n_way(),
        method,
        sim,
    )?;
    Ok(accuracy(&scores, &ep.query_labels))
}

/// Accuracy of one episode with a frozen model: only upright support and
/// query images are embedded, with BatchNorm in eval mode.
pub fn eval_episode<T: Real>(
    model: &Model<T>,
    ds: &DatasetContainer,
    ep: &Episode,
    method: Method,
    sim: Similarity,
) -> Result<f64> {
    check_method(model, method)?;
    if ep.query.is_empty() {
        return Err(Error::Contract("episode has no query images".into()));
    }
    let support = model.embed(&ds.batch(&ep.support))?;
    let query = model.embed(&ds.batch(&ep.query))?;
    let scores = score_queries(
        model,
        &support,
        &ep.support_labels,
        &query,
        ep.n_way(),
        method,
        sim,
    )?;
    Ok(accuracy(&scores, &ep.query_labels))
}

/// Per-episode accuracies of pre-sampled episodes, in episode order.
pub fn evaluate_episodes<T: Real>(
    model: &Model<T>,
    ds: &DatasetContainer,
    episodes: &[Episode],
    method: Method,
    sim: Similarity,
    workers: usize,
) -> Result<Vec<f64>> {
    check_method(model, method)?;
    let images: Vec<usize> = episodes
        .iter()
        .flat_map(|e| e.support.iter().chain(&e.query).copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let bank = FeatureBank::build(model, ds, &images, workers)?;
    episodes
        .iter()
        .map(|ep| episode_accuracy(model, &bank, ep, method, sim))
        .collect()
}

/// Run a protocol on a model. `workers` only affects speed.
pub fn eval_protocol<T: Real>(
    model: &Model<T>,
    ds: &DatasetContainer,
    protocol: &EvalProtocol,
    checkpoint_sha256: &str,
    workers: usize,
) -> Result<EvalReport> {
    protocol.validate()?;
    check_method(model, protocol.method)?;
    let spec = protocol.episode_spec();
    let episodes = (0..protocol.episodes)
        .map(|i| sample_episode(ds, &spec, protocol.base_seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let episode_acc = evaluate_episodes(
        model,
        ds,
        &episodes,
        protocol.method,
        protocol.similarity,
        workers,
    )?;
    let (mean, ci) = mean_ci95(&episode_acc);
    Ok(EvalReport {
        protocol: *protocol,
        mean,
        ci95: ci.unwrap_or(0.0),
        ci95_defined: ci.is_some(),
        episode_acc,
        checkpoint_sha256: checkpoint_sha256.to_string(),
    })
}
