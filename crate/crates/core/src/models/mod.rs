//! Conv-4 feature extractors and the classification and pretext heads.

mod heads;
mod layers;
mod scoring;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::ssl::CROP;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

pub use heads::{
    CosineClassifier, LocationHead, RotationHead, GAMMA_INIT, NUM_LOCATIONS, NUM_ROTATIONS,
};
pub use layers::{BatchNorm, BnMode, Conv2d, ConvBlock, Linear, BN_EPS, BN_MOMENTUM};
pub use scoring::{argmax_rows, compute_prototypes, cosine_logits, cosine_scores, pn_scores};

/// User-facing model options; the rest of the [`Architecture`] follows
/// from the dataset and the training configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: [usize; 4],
    /// Rotation-head conv widths; defaults depend on the extractor width.
    pub rotation_head: Option<[usize; 2]>,
    pub location_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [64; 4],
            rotation_head: None,
            location_hidden: None,
        }
    }
}

/// Fully resolved network layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub widths: [usize; 4],
    pub in_channels: usize,
    pub image_size: usize,
    /// Number of base classes of the cosine classifier, if any.
    pub classifier_classes: Option<usize>,
    /// Channel widths of the rotation head's two conv blocks, if present.
    pub rotation_head: Option<[usize; 2]>,
    /// Hidden width of the relative-location head, if present.
    pub location_hidden: Option<usize>,
    /// Number of classes of the patch-based auxiliary classifier, if any.
    pub patch_aux_classes: Option<usize>,
}

impl Architecture {
    pub fn extractor(widths: [usize; 4], in_channels: usize, image_size: usize) -> Self {
        Architecture {
            widths,
            in_channels,
            image_size,
            classifier_classes: None,
            rotation_head: None,
            location_hidden: None,
            patch_aux_classes: None,
        }
    }

    /// Rotation-head widths used when none are configured: 512/512 for
    /// extractors ending in 512 or more channels, 128/256 from 64, and
    /// `[2c, 4c]` for narrower extractors ending in `c` channels.
    pub fn default_rotation_widths(widths: [usize; 4]) -> [usize; 2] {
        match widths[3] {
            c if c >= 512 => [512, 512],
            c if c >= 64 => [128, 256],
            c => [2 * c, 4 * c],
        }
    }

    /// Location-head hidden width: 1024 from 512 channels, 256 from 64,
    /// `4c` below.
    pub fn default_location_hidden(widths: [usize; 4]) -> usize {
        match widths[3] {
            c if c >= 512 => 1024,
            c if c >= 64 => 256,
            c => 4 * c,
        }
    }

    /// Side of the final feature map of a full image.
    pub fn map_side(&self) -> usize {
        self.image_size / 16
    }

    /// Length of the flattened image feature.
    pub fn feature_dim(&self) -> usize {
        self.widths[3] * self.map_side() * self.map_side()
    }

    /// Length of a (globally pooled) patch feature.
    pub fn patch_feature_dim(&self) -> usize {
        self.widths[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) || self.in_channels == 0 {
            return Err(Error::Config(
                "widths and input channels must be positive".into(),
            ));
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Trainable scalar count, computed from the layout alone.
    pub fn num_parameters(&self) -> usize {
        let conv_block = |c: usize, o: usize| o * c * 9 + o + 2 * o;
        let mut n = 0;
        let mut c = self.in_channels;
        for &w in &self.widths {
            n += conv_block(c, w);
            c = w;
        }
        if let Some(k) = self.classifier_classes {
            n += k * self.feature_dim() + 1;
        }
        if let Some([r1, r2]) = self.rotation_head {
            let s = self.map_side();
            n += conv_block(self.widths[3], r1)
                + conv_block(r1, r2)
                + (r2 * s * s + 1) * NUM_ROTATIONS;
        }
        if let Some(h) = self.location_hidden {
            n += (2 * self.patch_feature_dim() + 1) * h + 2 * h + (h + 1) * NUM_LOCATIONS;
        }
        if let Some(k) = self.patch_aux_classes {
            n += k * self.patch_feature_dim() + 1;
        }
        n
    }
}

/// Outputs of the extractor on full images.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// `[B, d]` flattened features.
    pub flat: Var,
    /// `[B, C, h, w]` final feature maps.
    pub maps: Var,
}

/// Parameters of every component plus the layer handles into them.
///
/// Names are namespaced `extractor.*`, `classifier.*`, `rot_head.*`,
/// `loc_head.*` and `patch_aux.*`.
#[derive(Clone, Debug)]
pub struct Model<T> {
    arch: Architecture,
    store: ParamStore<T>,
    blocks: Vec<ConvBlock>,
    classifier: Option<CosineClassifier>,
    rotation: Option<RotationHead>,
    location: Option<LocationHead>,
    patch_aux: Option<CosineClassifier>,
}

/// Seed stream for parameter initialization.
const INIT_STREAM: u64 = 0x1a17;

impl<T: Real> Model<T> {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::child_rng(seed, &[INIT_STREAM]);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(4);
        let mut c = arch.in_channels;
        for (i, &w) in arch.widths.iter().enumerate() {
            blocks.push(ConvBlock::new(
                &mut store,
                &format!("extractor.block{}", i + 1),
                c,
                w,
                &mut rng,
            )?);
            c = w;
        }
        let classifier = match arch.classifier_classes {
            Some(k) => Some(CosineClassifier::new(
                &mut store,
                "classifier",
                k,
                arch.feature_dim(),
                &mut rng,
            )?),
            None => None,
        };
        let rotation = match arch.rotation_head {
            Some(w) => Some(RotationHead::new(
                &mut store,
                arch.widths[3],
                w,
                arch.map_side(),
                &mut rng,
            )?),
            None => None,
        };
        let location = match arch.location_hidden {
            Some(h) => Some(LocationHead::new(
                &mut store,
                arch.patch_feature_dim(),
                h,
                &mut rng,
            )?),
            None => None,
        };
        let patch_aux = match arch.patch_aux_classes {
            Some(k) => Some(CosineClassifier::new(
                &mut store,
                "patch_aux",
                k,
                arch.patch_feature_dim(),
                &mut rng,
            )?),
            None => None,
        };
        Ok(Model {
            arch,
            store,
            blocks,
            classifier,
            rotation,
            location,
            patch_aux,
        })
    }

    /// Rebuild a model from stored tensors. Every parameter and buffer of
    /// the layout must be present with the right shape.
    pub fn from_store(arch: Architecture, store: ParamStore<T>) -> Result<Self> {
        let mut model = Model::new(arch, 0)?;
        let expected = model.store.params().len() + model.store.buffers().len();
        let found = store.params().len() + store.buffers().len();
        if expected != found {
            return Err(Error::Compatibility(format!(
                "layout has {expected} tensors, checkpoint has {found}"
            )));
        }
        for id in model.store.param_ids().collect::<Vec<_>>() {
            let name = model.store.param(id).name.clone();
            let src = store
                .find_param(&name)
                .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))?;
            let value = &store.param(src).value;
            if value.shape() != model.store.param(id).value.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter {name} has shape {:?}, layout needs {:?}",
                    value.shape(),
                    model.store.param(id).value.shape()
                )));
            }
            model.store.param_mut(id).value = value.clone();
        }
        for b in 0..model.store.buffers().len() {
            let name = model.store.buffers()[b].name.clone();
            let src = store
                .find_buffer(&name)
                .ok_or_else(|| Error::Compatibility(format!("missing buffer {name}")))?;
            let dst = model
                .store
                .find_buffer(&name)
                .expect("buffer exists in layout");
            if store.buffer(src).value.shape() != model.store.buffer(dst).value.shape() {
                return Err(Error::Compatibility(format!(
                    "buffer {name} has the wrong shape"
                )));
            }
            model.store.buffer_mut(dst).value = store.buffer(src).value.clone();
        }
        Ok(model)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn classifier(&self) -> Option<&CosineClassifier> {
        self.classifier.as_ref()
    }

    pub fn patch_aux(&self) -> Option<&CosineClassifier> {
        self.patch_aux.as_ref()
    }

    pub fn has_rotation_head(&self) -> bool {
        self.rotation.is_some()
    }

    pub fn has_location_head(&self) -> bool {
        self.location.is_some()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            store: self.store.cast(),
            blocks: self.blocks.clone(),
            classifier: self.classifier.clone(),
            rotation: self.rotation.clone(),
            location: self.location.clone(),
            patch_aux: self.patch_aux.clone(),
        }
    }

    /// Run the four blocks on `[B, C, S, S]` images, `S` the configured size.
    pub fn features(&self, tape: &mut Tape<'_, T>, x: Var, mode: BnMode) -> Result<Features> {
        let s = tape.shape(x);
        let want = [
            self.arch.in_channels,
            self.arch.image_size,
            self.arch.image_size,
        ];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape(
                "feature_extract",
                format!(
                    "expected [B, {}, {}, {}] images, got {s:?}",
                    want[0], want[1], want[2]
                ),
            ));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, mode)?;
            h = tape.max_pool2x2(h, false)?;
        }
        Ok(Features {
            flat: tape.flatten(h)?,
            maps: h,
        })
    }

    /// Extractor applied to `[B, C, 24, 24]` patches: pooling drops odd
    /// trailing rows/columns and the last map is globally averaged.
    pub fn patch_features(&self, tape: &mut Tape<'_, T>, x: Var, mode: BnMode) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.arch.in_channels || s[2] < 16 || s[3] < 16 {
            return Err(Error::shape(
                "patch_features",
                format!(
                    "expected [B, {}, >=16, >=16] patches, got {s:?}",
                    self.arch.in_channels
                ),
            ));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, mode)?;
            h = tape.max_pool2x2(h, true)?;
        }
        let h = tape.global_avg_pool(h)?;
        tape.flatten(h)
    }

    fn missing(what: &str) -> Error {
        Error::Compatibility(format!("model has no {what}"))
    }

    pub fn classifier_logits(&self, tape: &mut Tape<'_, T>, flat: Var) -> Result<Var> {
        self.classifier
            .as_ref()
            .ok_or_else(|| Self::missing("cosine classifier"))?
            .logits(tape, flat)
    }

    pub fn rotation_logits(&self, tape: &mut Tape<'_, T>, maps: Var, mode: BnMode) -> Result<Var> {
        self.rotation
            .as_ref()
            .ok_or_else(|| Self::missing("rotation head"))?
            .logits(tape, maps, mode)
    }

    pub fn location_logits(
        &self,
        tape: &mut Tape<'_, T>,
        f0: Var,
        fp: Var,
        mode: BnMode,
    ) -> Result<Var> {
        self.location
            .as_ref()
            .ok_or_else(|| Self::missing("location head"))?
            .logits(tape, f0, fp, mode)
    }

    /// Average the 9 patch features of each image (`[9B, d]`, image-major)
    /// and score the result with the auxiliary cosine classifier.
    pub fn patch_aux_logits(&self, tape: &mut Tape<'_, T>, patch_feats: Var) -> Result<Var> {
        let head = self
            .patch_aux
            .as_ref()
            .ok_or_else(|| Self::missing("patch auxiliary classifier"))?;
        let merged = merge_patch_features(tape, patch_feats)?;
        head.logits(tape, merged)
    }

    /// Flat eval-mode features of `[B, C, S, S]` images, computed in chunks.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        const CHUNK: usize = 128;
        let b = images.shape()[0];
        let mut rows = Vec::with_capacity(b * self.arch.feature_dim());
        for start in (0..b).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(b)).collect();
            let mut tape = Tape::with_params(&self.store);
            let x = tape.constant(images.select_rows(&idx)?);
            let f = self.features(&mut tape, x, BnMode::Eval)?;
            rows.extend_from_slice(tape.value(f.flat).data());
        }
        Tensor::new(&[b, self.arch.feature_dim()], rows)
    }

    /// Novel-class weight vectors: per-class mean of the eval-mode features
    /// of the support images.
    pub fn novel_weights_from_shots(
        &self,
        support: &Tensor<T>,
        labels: &[usize],
        n_way: usize,
    ) -> Result<Tensor<T>> {
        compute_prototypes(&self.embed(support)?, labels, n_way)
    }
}

/// Mean over consecutive groups of 9 rows.
pub fn merge_patch_features<T: Real>(tape: &mut Tape<'_, T>, feats: Var) -> Result<Var> {
    let n = tape.shape(feats)[0];
    if n == 0 || n % 9 != 0 {
        return Err(Error::Contract(format!(
            "patch features come in groups of 9, got {n} rows"
        )));
    }
    let groups: Vec<usize> = (0..n).map(|i| i / 9).collect();
    tape.group_mean(feats, &groups, n / 9)
}

/// Patch side used by the relative-location pipeline.
pub const PATCH_SIZE: usize = CROP;

/// A random `[B, C, S, S]` image batch for smoke tests and initialization checks.
pub fn random_images<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-2.0..2.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv4(widths: [usize; 4]) -> Architecture {
        Architecture::extractor(widths, 3, 32)
    }

    #[test]
    fn default_head_widths() {
        assert_eq!(Architecture::default_rotation_widths([64; 4]), [128, 256]);
        assert_eq!(
            Architecture::default_rotation_widths([96, 128, 256, 512]),
            [512, 512]
        );
        assert_eq!(Architecture::default_rotation_widths([16; 4]), [32, 64]);
        assert_eq!(Architecture::default_location_hidden([64; 4]), 256);
        assert_eq!(
            Architecture::default_location_hidden([96, 128, 256, 512]),
            1024
        );
        assert_eq!(Architecture::default_location_hidden([32; 4]), 128);
    }

    #[test]
    fn feature_dimensions() {
        assert_eq!(conv4([64; 4]).feature_dim(), 256);
        assert_eq!(conv4([96, 128, 256, 512]).feature_dim(), 2048);
        let m = Model::<f32>::new(conv4([8; 4]), 0).unwrap();
        let mut tape = Tape::with_params(m.store());
        let x = tape.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let f = m.features(&mut tape, x, BnMode::Train).unwrap();
        assert_eq!(tape.shape(f.flat), &[2, 32]);
        assert_eq!(tape.shape(f.maps), &[2, 8, 2, 2]);
        let bad = tape.constant(Tensor::zeros(&[2, 3, 24, 24]));
        assert!(m.features(&mut tape, bad, BnMode::Train).is_err());
        let p = m.patch_features(&mut tape, bad, BnMode::Train).unwrap();
        assert_eq!(tape.shape(p), &[2, 8]);
    }

    #[test]
    fn parameter_count_matches_store() {
        let mut arch = conv4([8, 8, 16, 16]);
        arch.classifier_classes = Some(5);
        arch.rotation_head = Some([4, 6]);
        arch.location_hidden = Some(10);
        arch.patch_aux_classes = Some(5);
        let m = Model::<f32>::new(arch.clone(), 1).unwrap();
        assert_eq!(m.store().num_scalars(), arch.num_parameters());
        let names: Vec<&str> = m.store().params().iter().map(|p| p.name.as_str()).collect();
        for prefix in [
            "extractor.",
            "classifier.",
            "rot_head.",
            "loc_head.",
            "patch_aux.",
        ] {
            assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
        }
        assert!(names.iter().all(|n| [
            "extractor.",
            "classifier.",
            "rot_head.",
            "loc_head.",
            "patch_aux."
        ]
        .iter()
        .any(|p| n.starts_with(p))));
    }

    #[test]
    fn from_store_round_trip_and_mismatch() {
        let mut arch = conv4([4; 4]);
        arch.classifier_classes = Some(3);
        let m = Model::<f32>::new(arch.clone(), 5).unwrap();
        let back = Model::from_store(arch.clone(), m.store().clone()).unwrap();
        assert_eq!(back.store().params()[0].value, m.store().params()[0].value);
        let mut other = arch;
        other.classifier_classes = Some(4);
        assert!(matches!(
            Model::from_store(other, m.store().clone()),
            Err(Error::Compatibility(_))
        ));
    }
}
