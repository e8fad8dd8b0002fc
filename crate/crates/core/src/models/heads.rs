use rand::Rng;

use super::layers::{BatchNorm, BnMode, ConvBlock, Linear};
use super::scoring::cosine_logits;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const NUM_ROTATIONS: usize = 4;
pub const NUM_LOCATIONS: usize = 8;
/// Initial inverse temperature of cosine classifiers.
pub const GAMMA_INIT: f64 = 10.0;

/// Weight vectors plus a learnable inverse temperature kept as `log γ`
/// (excluded from weight decay).
#[derive(Clone, Debug)]
pub struct CosineClassifier {
    pub weight: ParamId,
    pub log_gamma: ParamId,
}

impl CosineClassifier {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        classes: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / dim as f64).sqrt();
        Ok(CosineClassifier {
            weight: store.add_uniform(&format!("{name}.weight"), &[classes, dim], bound, rng)?,
            log_gamma: store.add_param(
                &format!("{name}.log_gamma"),
                Tensor::scalar(T::from_f64(GAMMA_INIT.ln())),
                false,
            )?,
        })
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<'_, T>, f: Var) -> Result<Var> {
        let (w, g) = (tape.param(self.weight), tape.param(self.log_gamma));
        cosine_logits(tape, f, w, g)
    }

    /// Logits against externally supplied weight vectors (e.g. novel-class
    /// averages) using this classifier's temperature.
    pub fn logits_with<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        f: Var,
        weights: Var,
    ) -> Result<Var> {
        let g = tape.param(self.log_gamma);
        cosine_logits(tape, f, weights, g)
    }

    pub fn gamma<T: Real>(&self, store: &ParamStore<T>) -> T {
        store.param(self.log_gamma).value.item().exp()
    }
}

/// Two conv-BN-ReLU blocks on the final feature map, then a 4-way linear
/// layer over the flattened result.
#[derive(Clone, Debug)]
pub struct RotationHead {
    pub blocks: [ConvBlock; 2],
    pub fc: Linear,
    in_channels: usize,
}

impl RotationHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        widths: [usize; 2],
        spatial: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let b1 = ConvBlock::new(store, "rot_head.block1", in_channels, widths[0], rng)?;
        let b2 = ConvBlock::new(store, "rot_head.block2", widths[0], widths[1], rng)?;
        let fc = Linear::new(
            store,
            "rot_head.fc",
            widths[1] * spatial * spatial,
            NUM_ROTATIONS,
            true,
            rng,
        )?;
        Ok(RotationHead {
            blocks: [b1, b2],
            fc,
            in_channels,
        })
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<'_, T>, maps: Var, mode: BnMode) -> Result<Var> {
        let s = tape.shape(maps);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(
                "rotation_head",
                format!(
                    "expected [B, {}, h, w] feature maps, got {s:?}",
                    self.in_channels
                ),
            ));
        }
        let mut h = maps;
        for b in &self.blocks {
            h = b.forward(tape, h, mode)?;
        }
        let h = tape.flatten(h)?;
        self.fc.forward(tape, h)
    }
}

/// Hidden fully-connected layer with BN and ReLU over the concatenated
/// (centre, neighbour) features, then an 8-way linear layer.
#[derive(Clone, Debug)]
pub struct LocationHead {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
    feature_dim: usize,
}

impl LocationHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(LocationHead {
            fc1: Linear::new(store, "loc_head.fc1", 2 * feature_dim, hidden, false, rng)?,
            bn: BatchNorm::new(store, "loc_head.bn", hidden)?,
            fc2: Linear::new(store, "loc_head.fc2", hidden, NUM_LOCATIONS, true, rng)?,
            feature_dim,
        })
    }

    pub fn logits<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        f0: Var,
        fp: Var,
        mode: BnMode,
    ) -> Result<Var> {
        for v in [f0, fp] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != self.feature_dim {
                return Err(Error::shape(
                    "location_head",
                    format!(
                        "expected [B, {}] patch features, got {s:?}",
                        self.feature_dim
                    ),
                ));
            }
        }
        if tape.shape(f0) != tape.shape(fp) {
            return Err(Error::mismatch(
                "location_head",
                tape.shape(f0),
                tape.shape(fp),
            ));
        }
        let x = tape.concat(&[f0, fp], 1)?;
        let h = self.fc1.forward(tape, x)?;
        let h = self.bn.forward(tape, h, mode)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }
}
