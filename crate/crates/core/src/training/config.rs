use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::optim::SgdConfig;
use crate::tensor::Similarity;

/// Few-shot objective of the first stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cosine classifier over all base classes.
    Cc,
    /// Prototypical network trained on episodes.
    Pn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslTask {
    None,
    Rotation,
    Location,
}

/// Composition of the episodes a prototypical network trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainEpisode {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
}

impl Default for TrainEpisode {
    fn default() -> Self {
        TrainEpisode {
            n_way: 5,
            k_shot: 1,
            m_query: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub ssl_task: SslTask,
    /// Weight of the self-supervised term.
    pub alpha: f64,
    /// CC only: classify all four rotated copies of every labeled image.
    pub rotation_augmentation: bool,
    /// Location task only: also classify the averaged patch features.
    pub patch_aux_loss: bool,
    /// Feed unlabeled images to the self-supervised term.
    pub semi_supervised: bool,
    /// Drop the few-shot loss entirely and train on the pretext task alone.
    pub selfsup_only: bool,
    /// Fraction of each base class that keeps its label.
    pub mu: f64,
    /// Labeled images per step (CC).
    pub batch_labeled: usize,
    /// Unlabeled images per step.
    pub batch_unlabeled: usize,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub lr: f64,
    /// The learning rate is divided by this every `decay_epochs` epochs.
    pub lr_decay_factor: f64,
    pub decay_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub episode: TrainEpisode,
    pub pn_similarity: Similarity,
    /// Validation episodes per epoch; 0 disables validation and early stopping.
    pub val_episodes: usize,
    pub val_n_way: usize,
    pub val_m_query: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Cc,
            ssl_task: SslTask::None,
            alpha: 1.0,
            rotation_augmentation: false,
            patch_aux_loss: false,
            semi_supervised: false,
            selfsup_only: false,
            mu: 1.0,
            batch_labeled: 128,
            batch_unlabeled: 0,
            epochs: 20,
            iterations_per_epoch: 200,
            lr: 0.1,
            lr_decay_factor: 10.0,
            decay_epochs: 8,
            momentum: 0.9,
            weight_decay: 5e-4,
            episode: TrainEpisode::default(),
            pn_similarity: Similarity::NegSqEuclidean,
            val_episodes: 200,
            val_n_way: 5,
            val_m_query: 15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!(
                "alpha must be a finite value >= 0, got {}",
                self.alpha
            ));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return fail(format!("mu must lie in (0, 1], got {}", self.mu));
        }
        if self.patch_aux_loss && self.ssl_task != SslTask::Location {
            return fail("patch_aux_loss requires ssl_task = location".into());
        }
        if self.patch_aux_loss && self.method != Method::Cc {
            return fail(
                "patch_aux_loss needs base-class labels and is only supported with method = cc"
                    .into(),
            );
        }
        if self.rotation_augmentation && self.method == Method::Pn {
            return fail("rotation_augmentation is not used for prototypical networks".into());
        }
        if self.semi_supervised && self.ssl_task == SslTask::None {
            return fail("semi_supervised needs a self-supervised task".into());
        }
        if self.batch_unlabeled > 0 && !self.semi_supervised {
            return fail("batch_unlabeled > 0 requires semi_supervised = true".into());
        }
        if self.selfsup_only && self.ssl_task == SslTask::None {
            return fail(
                "self-supervised-only training needs ssl_task = rotation or location".into(),
            );
        }
        if self.selfsup_only && self.patch_aux_loss {
            return fail(
                "patch_aux_loss is a labeled loss and cannot be used with selfsup_only".into(),
            );
        }
        if self.epochs == 0 || self.iterations_per_epoch == 0 {
            return fail("epochs and iterations_per_epoch must be positive".into());
        }
        if self.method == Method::Cc && self.batch_labeled == 0 {
            return fail("batch_labeled must be positive".into());
        }
        if self.method == Method::Pn {
            let e = self.episode;
            if e.n_way < 2 || e.k_shot == 0 || e.m_query == 0 {
                return fail(format!("invalid training episode {e:?}"));
            }
        }
        if self.decay_epochs == 0 || !(self.lr > 0.0) || !(self.lr_decay_factor >= 1.0) {
            return fail(
                "schedule needs lr > 0, lr_decay_factor >= 1 and decay_epochs >= 1".into(),
            );
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("momentum must lie in [0, 1) and weight_decay must be >= 0".into());
        }
        if self.val_episodes > 0 && (self.val_n_way < 2 || self.val_m_query == 0) {
            return fail("validation episodes need n_way >= 2 and m_query >= 1".into());
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr
            / self
                .lr_decay_factor
                .powi((epoch / self.decay_epochs) as i32)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Shots per class of the validation episodes: 1 for CC, the training
    /// shot count for PN.
    pub fn val_k_shot(&self) -> usize {
        match self.method {
            Method::Cc => 1,
            Method::Pn => self.episode.k_shot,
        }
    }
}
