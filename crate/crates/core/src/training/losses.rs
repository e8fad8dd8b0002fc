//! Stage-one objectives. Every loss is a mean over images; the pretext
//! losses sum the negative log-likelihood over all transformations of an
//! image before averaging, so an untrained head scores `4 ln 4` (rotation)
//! and `8 ln 8` (relative location) per image.

use super::config::{Method, SslTask, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{argmax_rows, BnMode, Model, NUM_LOCATIONS, NUM_ROTATIONS};
use crate::seed;
use crate::ssl::{extract_patches, make_rotation_batch};
use crate::tensor::{Real, Similarity, Tape, Tensor, Var};

/// Labeled part of one training step.
#[derive(Clone, Debug)]
pub enum FewShotBatch<T> {
    /// `[B, C, S, S]` images with classifier (base-class) indices.
    Cc {
        images: Tensor<T>,
        labels: Vec<usize>,
    },
    /// Support images followed by query images of one training episode,
    /// with episode-local labels.
    Pn {
        images: Tensor<T>,
        support_labels: Vec<usize>,
        query_labels: Vec<usize>,
        n_way: usize,
    },
}

impl<T: Real> FewShotBatch<T> {
    pub fn images(&self) -> &Tensor<T> {
        match self {
            FewShotBatch::Cc { images, .. } | FewShotBatch::Pn { images, .. } => images,
        }
    }

    pub fn len(&self) -> usize {
        self.images().shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let labeled = match self {
            FewShotBatch::Cc { labels, .. } => labels.len(),
            FewShotBatch::Pn {
                support_labels,
                query_labels,
                ..
            } => support_labels.len() + query_labels.len(),
        };
        if labeled != n {
            return Err(Error::Contract(format!(
                "{n} labeled images but {labeled} labels"
            )));
        }
        Ok(())
    }
}

/// Graph nodes of one step's loss. `few`, `aux` and `selfsup` are the
/// unweighted components; `total` combines them in that order.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub few: Option<Var>,
    pub aux: Option<Var>,
    pub selfsup: Option<Var>,
    /// Correctly classified rows of the few-shot term, and rows scored.
    pub correct: usize,
    pub scored: usize,
}

fn correct_count<T: Real>(tape: &Tape<'_, T>, logits: Var, labels: &[usize]) -> usize {
    argmax_rows(tape.value(logits))
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

fn cc_term<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    flat: Var,
    labels: &[usize],
) -> Result<(Var, usize)> {
    let logits = model.classifier_logits(tape, flat)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok((loss, correct_count(tape, logits, labels)))
}

fn pn_term<T: Real>(
    tape: &mut Tape<'_, T>,
    flat: Var,
    support_labels: &[usize],
    query_labels: &[usize],
    n_way: usize,
    sim: Similarity,
) -> Result<(Var, usize)> {
    if query_labels.is_empty() {
        return Err(Error::Contract(
            "prototypical loss needs at least one query image".into(),
        ));
    }
    let ns = support_labels.len();
    let nq = query_labels.len();
    let support = tape.select_rows(flat, &(0..ns).collect::<Vec<_>>())?;
    let query = tape.select_rows(flat, &(ns..ns + nq).collect::<Vec<_>>())?;
    let protos = tape.group_mean(support, support_labels, n_way)?;
    let logits = tape.similarity(query, protos, sim)?;
    let loss = tape.softmax_cross_entropy(logits, query_labels)?;
    Ok((loss, correct_count(tape, logits, query_labels)))
}

/// Rotation NLL summed over the four rotations of each image.
fn rotation_term<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    maps: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = model.rotation_logits(tape, maps, BnMode::Train)?;
    let mean = tape.softmax_cross_entropy(logits, labels)?;
    Ok(tape.scale(mean, T::from_f64(NUM_ROTATIONS as f64)))
}

/// Relative-location NLL summed over the eight pairs of each image, from
/// `[9N, d]` patch features laid out image-major, centre first.
fn location_term<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    patch_feats: Var,
) -> Result<Var> {
    let n = tape.shape(patch_feats)[0] / 9;
    let mut centres = Vec::with_capacity(n * NUM_LOCATIONS);
    let mut neighbours = Vec::with_capacity(n * NUM_LOCATIONS);
    let mut labels = Vec::with_capacity(n * NUM_LOCATIONS);
    for i in 0..n {
        for p in 1..=NUM_LOCATIONS {
            centres.push(9 * i);
            neighbours.push(9 * i + p);
            labels.push(p - 1);
        }
    }
    let f0 = tape.select_rows(patch_feats, &centres)?;
    let fp = tape.select_rows(patch_feats, &neighbours)?;
    let logits = model.location_logits(tape, f0, fp, BnMode::Train)?;
    let mean = tape.softmax_cross_entropy(logits, &labels)?;
    Ok(tape.scale(mean, T::from_f64(NUM_LOCATIONS as f64)))
}

/// `[9N, C, 24, 24]` patches of every image; image `i` uses seed
/// `derive(seed, [i])`.
pub fn patch_batch<T: Real>(images: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "patch_batch",
            format!("expected [B, C, H, W], got {s:?}"),
        ));
    }
    let mut sets = Vec::with_capacity(s[0]);
    for i in 0..s[0] {
        let img = images.select_rows(&[i])?.reshape(&s[1..])?;
        sets.push(extract_patches(&img, seed::derive(seed, &[i as u64]))?.patches);
    }
    let refs: Vec<&Tensor<T>> = sets.iter().collect();
    Tensor::stack_rows(&refs)
}

fn repeat_each(labels: &[usize], times: usize) -> Vec<usize> {
    labels
        .iter()
        .flat_map(|&l| std::iter::repeat(l).take(times))
        .collect()
}

/// Cosine-classifier loss on a labeled batch; with `rotation_augmentation`
/// every image is classified in all four orientations under its own label.
pub fn loss_cc<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    images: &Tensor<T>,
    labels: &[usize],
    rotation_augmentation: bool,
) -> Result<Var> {
    let (x, labels) = if rotation_augmentation {
        (
            make_rotation_batch(images)?.0,
            repeat_each(labels, NUM_ROTATIONS),
        )
    } else {
        (images.clone(), labels.to_vec())
    };
    let x = tape.constant(x);
    let f = model.features(tape, x, BnMode::Train)?;
    Ok(cc_term(model, tape, f.flat, &labels)?.0)
}

/// Prototypical loss of one episode. Support and query go through the
/// extractor as one batch, so support images receive gradient through
/// the prototypes.
#[allow(clippy::too_many_arguments)]
pub fn loss_pn<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    support: &Tensor<T>,
    support_labels: &[usize],
    query: &Tensor<T>,
    query_labels: &[usize],
    n_way: usize,
    sim: Similarity,
) -> Result<Var> {
    if query_labels.is_empty() {
        return Err(Error::Contract(
            "prototypical loss needs at least one query image".into(),
        ));
    }
    let x = tape.constant(Tensor::stack_rows(&[support, query])?);
    let f = model.features(tape, x, BnMode::Train)?;
    Ok(pn_term(tape, f.flat, support_labels, query_labels, n_way, sim)?.0)
}

pub fn loss_rotation<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    images: &Tensor<T>,
) -> Result<Var> {
    let (rot, labels) = make_rotation_batch(images)?;
    let x = tape.constant(rot);
    let f = model.features(tape, x, BnMode::Train)?;
    rotation_term(model, tape, f.maps, &labels)
}

/// Relative-location loss. With `labels`, the patch-based auxiliary
/// classification loss of the first `labels.len()` images is added with
/// weight one.
pub fn loss_location<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    images: &Tensor<T>,
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<Var> {
    let x = tape.constant(patch_batch(images, seed)?);
    let pf = model.patch_features(tape, x, BnMode::TrainUntracked)?;
    let loc = location_term(model, tape, pf)?;
    match labels {
        None => Ok(loc),
        Some(labels) => {
            let aux = patch_aux_term(model, tape, pf, labels)?;
            tape.add(loc, aux)
        }
    }
}

fn patch_aux_term<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    pf: Var,
    labels: &[usize],
) -> Result<Var> {
    let rows: Vec<usize> = (0..9 * labels.len()).collect();
    let labeled = tape.select_rows(pf, &rows)?;
    let logits = model.patch_aux_logits(tape, labeled)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Loss of one step: `few + aux + alpha * self`, where the self-supervised
/// term covers the labeled and the unlabeled images and the others only the
/// labeled ones. With `selfsup_only` the total is `alpha * self`.
///
/// For the rotation task the labeled images are pushed through the
/// extractor once, as part of the rotation batch; classification then uses
/// the upright copies (or all four with rotation augmentation).
pub fn total_step_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    few: &FewShotBatch<T>,
    unlabeled: Option<&Tensor<T>>,
    config: &TrainConfig,
    patch_seed: u64,
) -> Result<StepLoss> {
    few.check()?;
    let unlabeled = unlabeled.filter(|u| u.shape()[0] > 0);
    if unlabeled.is_some() && !config.semi_supervised {
        return Err(Error::Config(
            "unlabeled images given but semi_supervised is off".into(),
        ));
    }
    if config.method == Method::Pn && matches!(few, FewShotBatch::Cc { .. }) && !config.selfsup_only
    {
        return Err(Error::Contract(
            "prototypical training needs an episode batch".into(),
        ));
    }
    let n_l = few.len();
    let pretext_images = || -> Result<Tensor<T>> {
        match unlabeled {
            Some(u) => Tensor::stack_rows(&[few.images(), u]),
            None => Ok(few.images().clone()),
        }
    };

    let mut few_loss = None;
    let mut aux_loss = None;
    let mut self_loss = None;
    let (mut correct, mut scored) = (0, 0);
    let mut score = |r: (Var, usize), rows: usize| {
        correct = r.1;
        scored = rows;
        r.0
    };

    match config.ssl_task {
        SslTask::Rotation => {
            let (rot, rot_labels) = make_rotation_batch(&pretext_images()?)?;
            let x = tape.constant(rot);
            let f = model.features(tape, x, BnMode::Train)?;
            if !config.selfsup_only {
                few_loss = Some(match few {
                    FewShotBatch::Cc { labels, .. } => {
                        let (rows, labels) = if config.rotation_augmentation {
                            (
                                (0..NUM_ROTATIONS * n_l).collect::<Vec<_>>(),
                                repeat_each(labels, NUM_ROTATIONS),
                            )
                        } else {
                            (
                                (0..n_l).map(|i| NUM_ROTATIONS * i).collect(),
                                labels.clone(),
                            )
                        };
                        let flat = tape.select_rows(f.flat, &rows)?;
                        score(cc_term(model, tape, flat, &labels)?, labels.len())
                    }
                    FewShotBatch::Pn {
                        support_labels,
                        query_labels,
                        n_way,
                        ..
                    } => {
                        let rows: Vec<usize> = (0..n_l).map(|i| NUM_ROTATIONS * i).collect();
                        let flat = tape.select_rows(f.flat, &rows)?;
                        let r = pn_term(
                            tape,
                            flat,
                            support_labels,
                            query_labels,
                            *n_way,
                            config.pn_similarity,
                        )?;
                        score(r, query_labels.len())
                    }
                });
            }
            self_loss = Some(rotation_term(model, tape, f.maps, &rot_labels)?);
        }
        SslTask::Location | SslTask::None => {
            if !config.selfsup_only {
                few_loss = Some(match few {
                    FewShotBatch::Cc { images, labels } => {
                        let (x, labels) = if config.rotation_augmentation {
                            (
                                make_rotation_batch(images)?.0,
                                repeat_each(labels, NUM_ROTATIONS),
                            )
                        } else {
                            (images.clone(), labels.clone())
                        };
                        let x = tape.constant(x);
                        let f = model.features(tape, x, BnMode::Train)?;
                        score(cc_term(model, tape, f.flat, &labels)?, labels.len())
                    }
                    FewShotBatch::Pn {
                        images,
                        support_labels,
                        query_labels,
                        n_way,
                    } => {
                        let x = tape.constant(images.clone());
                        let f = model.features(tape, x, BnMode::Train)?;
                        let r = pn_term(
                            tape,
                            f.flat,
                            support_labels,
                            query_labels,
                            *n_way,
                            config.pn_similarity,
                        )?;
                        score(r, query_labels.len())
                    }
                });
            }
            if config.ssl_task == SslTask::Location {
                let x = tape.constant(patch_batch(&pretext_images()?, patch_seed)?);
                let pf = model.patch_features(tape, x, BnMode::TrainUntracked)?;
                if config.patch_aux_loss && !config.selfsup_only {
                    let FewShotBatch::Cc { labels, .. } = few else {
                        return Err(Error::Config(
                            "patch_aux_loss is only supported with method = cc".into(),
                        ));
                    };
                    aux_loss = Some(patch_aux_term(model, tape, pf, labels)?);
                }
                self_loss = Some(location_term(model, tape, pf)?);
            }
        }
    }

    let mut total = few_loss;
    if let Some(aux) = aux_loss {
        total = Some(match total {
            Some(t) => tape.add(t, aux)?,
            None => aux,
        });
    }
    if let Some(s) = self_loss {
        let weighted = tape.scale(s, T::from_f64(config.alpha));
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.ok_or_else(|| Error::Config("configuration leaves no loss term".into()))?;
    Ok(StepLoss {
        total,
        few: few_loss,
        aux: aux_loss,
        selfsup: self_loss,
        correct,
        scored,
    })
}
