//! Image containers, class splits, episodic sampling and the synthetic
//! glyph dataset.

mod fsds;
mod sampling;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use fsds::{load_dataset, save_dataset, MAGIC};
pub use sampling::{
    compose_batch, sample_episode, subsample_labels, Episode, EpisodeSpec, LabelSplit, SemiSupBatch,
};
pub use synth::{make_synthetic, SynthSpec, SYNTH_CAPACITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Validation,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Base, Split::Validation, Split::Novel];

    pub fn name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Validation => "validation",
            Split::Novel => "novel",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "validation" | "val" => Ok(Split::Validation),
            "novel" | "test" => Ok(Split::Novel),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// uint8 CHW images with per-image class labels and a class-level split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContainer {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<u32>,
    class_names: Vec<String>,
    class_split: Vec<Split>,
    by_class: Vec<Vec<usize>>,
}

impl DatasetContainer {
    /// Validate and assemble a container. Every class must belong to exactly
    /// one split.
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<u32>,
        class_names: Vec<String>,
        class_split: Vec<Split>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 {
            return Err(Error::Contract("images must have non-zero size".into()));
        }
        if pixels.len() != labels.len() * per {
            return Err(Error::Contract(format!(
                "{} pixel bytes for {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if class_split.len() != class_names.len() {
            return Err(Error::Contract(
                "every class needs exactly one split".into(),
            ));
        }
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= class_names.len() {
                return Err(Error::Label(format!(
                    "image {i} has label {l} but only {} classes exist",
                    class_names.len()
                )));
            }
            by_class[l].push(i);
        }
        Ok(DatasetContainer {
            channels,
            height,
            width,
            pixels,
            labels,
            class_names,
            class_split,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split_of(&self, class: usize) -> Split {
        self.class_split[class]
    }

    /// Class ids of a split, ascending.
    pub fn classes(&self, split: Split) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&c| self.class_split[c] == split)
            .collect()
    }

    pub fn split_map(&self) -> BTreeMap<Split, Vec<usize>> {
        Split::ALL.iter().map(|&s| (s, self.classes(s))).collect()
    }

    /// Image indices of a class, ascending.
    pub fn class_images(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    /// All image indices whose class lies in `split`, ascending.
    pub fn split_images(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.class_split[self.label(i)] == split)
            .collect()
    }

    /// Stack images into a `[B, C, H, W]` tensor with the fixed input scaling
    /// `(p / 255 - 0.5) / 0.25`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(
                self.image(i)
                    .iter()
                    .map(|&p| T::from_f64(normalize_pixel(p))),
            );
        }
        Tensor::new(
            &[indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("batch shape is consistent by construction")
    }
}

pub fn normalize_pixel(p: u8) -> f64 {
    (p as f64 / 255.0 - 0.5) / 0.25
}
