//! Samples, datasets and everything that produces them: the synthetic
//! phantom generator, the BUS-style directory loader, label-skewed client
//! partitioning, stratified splitting and augmentation.

mod augment;
mod bus;
mod partition;
mod phantom;

use std::fmt;
use std::str::FromStr;

pub use augment::{augment, AugmentationConfig, GeometricTransform, PhotometricTransform};
pub use bus::{export_dataset, load_bus_directory, LoadReport};
pub use partition::{
    build_partition, scaled_count, train_test_split, Partition, PartitionPlan, SampleSource,
};
pub use phantom::{generate_dataset, generate_phantom};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Benign,
    Malignant,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Normal, Label::Benign, Label::Malignant];

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn has_lesion(self) -> bool {
        self != Label::Normal
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::config("label", format!("unknown label {s:?} (normal | benign | malignant)")))
    }
}

/// One grayscale scan with its binary lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Unique within a partition build; used to check disjointness.
    pub id: u64,
    pub label: Label,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    /// Row-major, each entry 0 or 1.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn lesion_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    /// Checks the sample invariants: matching extents, image in `[0, 1]`,
    /// binary mask, and mask emptiness agreeing with the label.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        let fail = |reason: String| Err(Error::config(format!("sample {}", self.id), reason));
        if self.image.len() != n || self.mask.len() != n {
            return fail(format!(
                "image/mask lengths {}/{} do not match {}x{}",
                self.image.len(),
                self.mask.len(),
                self.height,
                self.width
            ));
        }
        if !self.image.iter().all(|v| (0.0..=1.0).contains(v)) {
            return fail("image values outside [0, 1]".into());
        }
        if !self.mask.iter().all(|&m| m <= 1) {
            return fail("mask is not binary".into());
        }
        match (self.label.has_lesion(), self.lesion_pixels()) {
            (false, k) if k > 0 => fail(format!("normal sample has {k} lesion pixels")),
            (true, 0) => fail(format!("{} sample has an empty mask", self.label)),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Per-label counts in [`Label::ALL`] order.
    pub fn label_counts(&self) -> [usize; 3] {
        Label::ALL.map(|l| self.count(l))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }
}

/// Stacks samples into `[N, 1, H, W]` image and mask tensors.
pub fn to_batch<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Tensor, Tensor)> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut n = 0;
    for s in samples {
        match dims {
            None => dims = Some((s.height, s.width)),
            Some(d) if d != (s.height, s.width) => {
                return Err(Error::shape(
                    "to_batch",
                    format!("sample {} is {}x{}, batch is {}x{}", s.id, s.height, s.width, d.0, d.1),
                ))
            }
            _ => {}
        }
        images.extend_from_slice(&s.image);
        masks.extend(s.mask.iter().map(|&m| f64::from(m)));
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::shape("to_batch", "empty batch"))?;
    Ok((Tensor::new(vec![n, 1, h, w], images)?, Tensor::new(vec![n, 1, h, w], masks)?))
}
