use serde::{Deserialize, Serialize};

use super::config::{Method, SslTask, TrainConfig};
use super::losses::{total_step_loss, FewShotBatch};
use crate::checkpoint::{config_digest, TrainSummary};
use crate::data::{
    compose_batch, sample_episode, subsample_labels, DatasetContainer, Episode, EpisodeSpec, Split,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_episodes, mean_ci95};
use crate::models::{Architecture, Model, ModelConfig};
use crate::seed;
use crate::tensor::optim::Sgd;
use crate::tensor::{ParamStore, Tape};

// Seed streams derived from the run seed.
const MODEL_STREAM: u64 = 1;
const LABEL_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;
const EPISODE_STREAM: u64 = 4;
const PATCH_STREAM: u64 = 5;
const VAL_STREAM: u64 = 6;

/// Losses above this are treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e4;

/// Images available to a run. Unlabeled images for the self-supervised
/// term come from the base split of `unlabeled` when given, otherwise
/// from the base images of `dataset` that lost their label (`mu < 1`).
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub dataset: &'a DatasetContainer,
    pub unlabeled: Option<&'a DatasetContainer>,
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_few: Option<f64>,
    pub loss_aux: Option<f64>,
    pub loss_self: Option<f64>,
    /// Training-mode accuracy of the few-shot term over the epoch.
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_ci95: Option<f64>,
    /// This epoch's weights are the current early-stopping choice.
    pub best: bool,
}

/// Callbacks from the training loop.
pub trait TrainObserver {
    fn epoch_end(&mut self, _log: &EpochLog) -> Result<()> {
        Ok(())
    }

    /// Called with the model as it was right before the diverging step.
    fn diverged(&mut self, _model: &Model<f32>, _error: &Error) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Best validation accuracy so far and the weights that produced it.
#[derive(Clone, Debug, Default)]
pub struct EarlyStopState {
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    snapshot: Option<ParamStore<f32>>,
}

impl EarlyStopState {
    /// Keep `store` if `metric` beats the best so far (ties keep the
    /// earlier epoch). Returns whether it was kept.
    pub fn offer(&mut self, epoch: usize, metric: f64, store: &ParamStore<f32>) -> bool {
        if self.best_metric.is_some_and(|b| metric <= b) {
            return false;
        }
        self.best_metric = Some(metric);
        self.best_epoch = Some(epoch);
        self.snapshot = Some(store.clone());
        true
    }

    pub fn snapshot(&self) -> Option<&ParamStore<f32>> {
        self.snapshot.as_ref()
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Epoch the returned weights come from.
    pub epoch: usize,
    pub early_stopped: bool,
    pub best_val_acc: Option<f64>,
    pub history: Vec<EpochLog>,
    pub summary: TrainSummary,
}

/// Full layout implied by the configuration and the dataset.
pub fn resolve_architecture(
    config: &TrainConfig,
    model: &ModelConfig,
    ds: &DatasetContainer,
) -> Result<Architecture> {
    let (c, h, w) = ds.image_shape();
    if h != w {
        return Err(Error::Config(format!(
            "images must be square, dataset has {h}x{w}"
        )));
    }
    let base = ds.classes(Split::Base).len();
    if base == 0 {
        return Err(Error::Sampling("dataset has no base classes".into()));
    }
    let mut arch = Architecture::extractor(model.widths, c, h);
    if config.method == Method::Cc {
        arch.classifier_classes = Some(base);
    }
    match config.ssl_task {
        SslTask::Rotation => {
            arch.rotation_head = Some(
                model
                    .rotation_head
                    .unwrap_or(Architecture::default_rotation_widths(model.widths)),
            );
        }
        SslTask::Location => {
            arch.location_hidden = Some(
                model
                    .location_hidden
                    .unwrap_or(Architecture::default_location_hidden(model.widths)),
            );
            if config.patch_aux_loss {
                arch.patch_aux_classes = Some(base);
            }
        }
        SslTask::None => {}
    }
    arch.validate()?;
    Ok(arch)
}

pub fn train_stage1(
    config: &TrainConfig,
    model: &ModelConfig,
    data: TrainData<'_>,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if config.selfsup_only {
        return Err(Error::Config(
            "selfsup_only runs go through train_selfsup_only".into(),
        ));
    }
    run(config, model, data, seed, observer)
}

/// Pretext-task training without the few-shot loss. The classifier (if
/// any) is frozen and the final epoch is returned.
pub fn train_selfsup_only(
    config: &TrainConfig,
    model: &ModelConfig,
    data: TrainData<'_>,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if config.ssl_task == SslTask::None {
        return Err(Error::Config(
            "self-supervised-only training needs ssl_task = rotation or location".into(),
        ));
    }
    let config = TrainConfig {
        selfsup_only: true,
        ..config.clone()
    };
    run(&config, model, data, seed, observer)
}

/// Dispatch on `config.selfsup_only`.
pub fn train(
    config: &TrainConfig,
    model: &ModelConfig,
    data: TrainData<'_>,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if config.selfsup_only {
        train_selfsup_only(config, model, data, seed, observer)
    } else {
        train_stage1(config, model, data, seed, observer)
    }
}

/// Running sums of one epoch.
#[derive(Default)]
struct EpochTotals {
    steps: usize,
    loss: f64,
    few: f64,
    aux: f64,
    selfsup: f64,
    correct: usize,
    scored: usize,
}

impl EpochTotals {
    fn mean(&self, v: f64, present: bool) -> Option<f64> {
        present.then(|| v / self.steps as f64)
    }
}

/// Draw a training episode from per-class pools of labeled images.
fn pool_episode(
    pools: &[Vec<usize>],
    n_way: usize,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<Episode> {
    use rand::seq::index::sample;
    let eligible: Vec<usize> = (0..pools.len())
        .filter(|&c| pools[c].len() >= k + m)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::Sampling(format!(
            "{n_way}-way training episodes need {} labeled images in {n_way} classes, only {} classes qualify",
            k + m,
            eligible.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let classes: Vec<usize> = sample(&mut rng, eligible.len(), n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut ep = Episode {
        support: Vec::new(),
        support_labels: Vec::new(),
        query: Vec::new(),
        query_labels: Vec::new(),
        classes: classes.clone(),
    };
    for (local, &c) in classes.iter().enumerate() {
        let picks = sample(&mut rng, pools[c].len(), k + m).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            if j < k {
                ep.support.push(pools[c][p]);
                ep.support_labels.push(local);
            } else {
                ep.query.push(pools[c][p]);
                ep.query_labels.push(local);
            }
        }
    }
    Ok(ep)
}

/// The model a run starts from.
pub fn initial_model(
    config: &TrainConfig,
    model: &ModelConfig,
    ds: &DatasetContainer,
    seed: u64,
) -> Result<Model<f32>> {
    let arch = resolve_architecture(config, model, ds)?;
    Model::new(arch, seed::derive(seed, &[MODEL_STREAM]))
}

/// The validation episodes a run scores after every epoch; fixed for the
/// whole run.
pub fn validation_episodes(
    config: &TrainConfig,
    ds: &DatasetContainer,
    seed: u64,
) -> Result<Vec<Episode>> {
    let spec = EpisodeSpec {
        n_way: config.val_n_way,
        k_shot: config.val_k_shot(),
        m_query: config.val_m_query,
        split: Split::Validation,
    };
    (0..config.val_episodes)
        .map(|i| sample_episode(ds, &spec, seed::derive(seed, &[VAL_STREAM, i as u64])))
        .collect()
}

fn run(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: TrainData<'_>,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = data.dataset;
    let mut model = initial_model(config, model_config, ds, seed)?;

    // Classifier index of every base class.
    let base = ds.classes(Split::Base);
    let mut class_index = vec![usize::MAX; ds.num_classes()];
    for (i, &c) in base.iter().enumerate() {
        class_index[c] = i;
    }

    let (labeled, remainder) = if config.mu < 1.0 {
        let s = subsample_labels(ds, config.mu, seed::derive(seed, &[LABEL_STREAM]))?;
        (s.labeled, s.unlabeled)
    } else {
        (ds.split_images(Split::Base), Vec::new())
    };
    if data.unlabeled.is_some() && !config.semi_supervised {
        return Err(Error::Config(
            "an unlabeled dataset was given but semi_supervised is off".into(),
        ));
    }
    let (unl_ds, unl_pool) = match data.unlabeled {
        Some(u) => {
            if u.image_shape() != ds.image_shape() {
                return Err(Error::Compatibility(format!(
                    "unlabeled images are {:?}, labeled images are {:?}",
                    u.image_shape(),
                    ds.image_shape()
                )));
            }
            (u, u.split_images(Split::Base))
        }
        None if config.semi_supervised => (ds, remainder),
        None => (ds, Vec::new()),
    };
    // An empty pool leaves the plain objective.
    let b_u = if unl_pool.is_empty() {
        0
    } else {
        config.batch_unlabeled
    };

    let class_pools: Vec<Vec<usize>> = if config.method == Method::Pn && !config.selfsup_only {
        let mut pools = vec![Vec::new(); base.len()];
        for &i in &labeled {
            pools[class_index[ds.label(i)]].push(i);
        }
        pools
    } else {
        Vec::new()
    };

    let mut opt = Sgd::new(model.store(), config.sgd());
    if config.selfsup_only {
        let frozen: Vec<_> = model
            .store()
            .param_ids()
            .filter(|&id| {
                let name = &model.store().param(id).name;
                name.starts_with("classifier.") || name.starts_with("patch_aux.")
            })
            .collect();
        for id in frozen {
            opt.freeze(id);
        }
    }

    let val_episodes = validation_episodes(config, ds, seed)?;
    let val_method = if config.selfsup_only && model.classifier().is_none() {
        Method::Pn
    } else {
        config.method
    };

    let mut early = EarlyStopState::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut val_history = Vec::new();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut totals = EpochTotals::default();
        let mut has = (false, false, false);
        for it in 0..config.iterations_per_epoch {
            let step = (epoch * config.iterations_per_epoch + it) as u64;
            let (few, unl_idx) = if config.method == Method::Pn && !config.selfsup_only {
                let e = config.episode;
                let ep = pool_episode(
                    &class_pools,
                    e.n_way,
                    e.k_shot,
                    e.m_query,
                    seed::derive(seed, &[EPISODE_STREAM, step]),
                )?;
                let unl = compose_batch(
                    &[],
                    &unl_pool,
                    0,
                    b_u,
                    seed::derive(seed, &[BATCH_STREAM, step]),
                )?
                .unlabeled;
                let images: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
                let few = FewShotBatch::Pn {
                    images: ds.batch(&images),
                    support_labels: ep.support_labels,
                    query_labels: ep.query_labels,
                    n_way: e.n_way,
                };
                (few, unl)
            } else {
                let b = compose_batch(
                    &labeled,
                    &unl_pool,
                    config.batch_labeled,
                    b_u,
                    seed::derive(seed, &[BATCH_STREAM, step]),
                )?;
                let labels = b
                    .labeled
                    .iter()
                    .map(|&i| class_index[ds.label(i)])
                    .collect();
                let few = FewShotBatch::Cc {
                    images: ds.batch(&b.labeled),
                    labels,
                };
                (few, b.unlabeled)
            };
            let unlabeled = (!unl_idx.is_empty()).then(|| unl_ds.batch(&unl_idx));

            let mut tape = Tape::with_params(model.store());
            let parts = total_step_loss(
                &model,
                &mut tape,
                &few,
                unlabeled.as_ref(),
                config,
                seed::derive(seed, &[PATCH_STREAM, step]),
            )?;
            let value = |v| tape.value(v).item() as f64;
            let loss = value(parts.total);
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                let err = Error::Divergence {
                    epoch,
                    iteration: it,
                    loss,
                };
                drop(tape);
                observer.diverged(&model, &err)?;
                return Err(err);
            }
            totals.steps += 1;
            totals.loss += loss;
            if let Some(v) = parts.few {
                totals.few += value(v);
                has.0 = true;
            }
            if let Some(v) = parts.aux {
                totals.aux += value(v);
                has.1 = true;
            }
            if let Some(v) = parts.selfsup {
                totals.selfsup += value(v);
                has.2 = true;
            }
            totals.correct += parts.correct;
            totals.scored += parts.scored;

            let grads = tape.backward(parts.total)?;
            let store = model.store_mut();
            store.zero_grad();
            store.absorb(&grads);
            opt.step(store, lr);
        }

        let (val_acc, val_ci95) = if val_episodes.is_empty() {
            (None, None)
        } else {
            let acc = evaluate_episodes(
                &model,
                ds,
                &val_episodes,
                val_method,
                config.pn_similarity,
                1,
            )?;
            let (m, ci) = mean_ci95(&acc);
            val_history.push(m);
            (Some(m), ci)
        };
        let best = match val_acc {
            Some(m) if !config.selfsup_only => early.offer(epoch, m, model.store()),
            _ => false,
        };
        let log = EpochLog {
            epoch,
            lr,
            loss: totals.loss / totals.steps as f64,
            loss_few: totals.mean(totals.few, has.0),
            loss_aux: totals.mean(totals.aux, has.1),
            loss_self: totals.mean(totals.selfsup, has.2),
            train_acc: (totals.scored > 0).then(|| totals.correct as f64 / totals.scored as f64),
            val_acc,
            val_ci95,
            best,
        };
        observer.epoch_end(&log)?;
        history.push(log);
    }

    let last = config.epochs - 1;
    let (epoch, early_stopped) = match (early.best_epoch, early.snapshot()) {
        (Some(e), Some(snapshot)) => {
            model = Model::from_store(model.arch().clone(), snapshot.clone())?;
            (e, true)
        }
        _ => (last, false),
    };
    let summary = TrainSummary {
        method: config.method,
        train_config_sha256: config_digest(config),
        epoch,
        early_stopped,
        best_val_acc: early.best_metric,
        val_history,
        gamma_weight_decay: false,
    };
    Ok(TrainOutcome {
        model,
        epoch,
        early_stopped,
        best_val_acc: early.best_metric,
        history,
        summary,
    })
}
