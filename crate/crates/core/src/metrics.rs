//! Pixel-level segmentation metrics and the soft Dice training loss.
//!
//! Evaluation pools confusion counts over a whole dataset (micro-average)
//! before taking ratios. A ratio whose numerator and denominator are both
//! zero is reported as 1: an empty mask predicted empty is a perfect
//! outcome.

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTHING: f64 = 1e-6;

/// Probability at or above which a pixel counts as predicted lesion.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// The six reported statistics for one evaluation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub dice_loss: f64,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 6] = [
        "dice_loss",
        "iou",
        "sensitivity",
        "specificity",
        "f1",
        "accuracy",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.dice_loss,
            self.iou,
            self.sensitivity,
            self.specificity,
            self.f1,
            self.accuracy,
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        MetricsRow {
            dice_loss: v[0],
            iou: v[1],
            sensitivity: v[2],
            specificity: v[3],
            f1: v[4],
            accuracy: v[5],
        }
    }

    /// Comma-separated values with six decimals, in [`Self::COLUMNS`] order.
    pub fn to_csv_fields(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn in_unit_range(&self) -> bool {
        self.values().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Thresholds `probabilities` (`p >= threshold` is positive) and counts
/// agreement with the binary `truth`.
pub fn confusion(probabilities: &[f64], truth: &[f64], threshold: f64) -> Result<ConfusionCounts> {
    if probabilities.len() != truth.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predictions vs {} truth pixels", probabilities.len(), truth.len()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in probabilities.iter().zip(truth) {
        match (p >= threshold, t >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// [`confusion`] on tensors, which must have equal shapes.
pub fn confusion_tensors(probabilities: &Tensor, truth: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    if probabilities.shape() != truth.shape() {
        return Err(Error::shape(
            "confusion",
            format!("{:?} vs {:?}", probabilities.shape(), truth.shape()),
        ));
    }
    confusion(probabilities.data(), truth.data(), threshold)
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Result<MetricsRow> {
    if c.total() == 0 {
        return Err(Error::Usage("metrics need at least one evaluated pixel".into()));
    }
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    Ok(MetricsRow {
        dice_loss: 1.0 - f1,
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f1,
        accuracy: ratio(c.tp + c.tn, c.total()),
    })
}

/// `1 − (2·Σ p·t + ε) / (Σ p + Σ t + ε)` over the whole batch, recorded on
/// `graph` so it can be differentiated with respect to `probabilities`.
pub fn soft_dice_loss(graph: &mut Graph, probabilities: Var, truth: Var) -> Result<Var> {
    if graph.shape(probabilities) != graph.shape(truth) {
        return Err(Error::shape(
            "soft_dice_loss",
            format!("{:?} vs {:?}", graph.shape(probabilities), graph.shape(truth)),
        ));
    }
    let overlap = graph.mul(probabilities, truth)?;
    let overlap = graph.sum(overlap);
    let numerator = graph.scale(overlap, 2.0);
    let numerator = graph.add_scalar(numerator, DICE_SMOOTHING);
    let pred_mass = graph.sum(probabilities);
    let truth_mass = graph.sum(truth);
    let denominator = graph.add(pred_mass, truth_mass)?;
    let denominator = graph.add_scalar(denominator, DICE_SMOOTHING);
    let dice = graph.div(numerator, denominator)?;
    let negated = graph.scale(dice, -1.0);
    Ok(graph.add_scalar(negated, 1.0))
}

/// Soft Dice loss value without recording gradients.
pub fn soft_dice_value(probabilities: &Tensor, truth: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probabilities.clone());
    let t = g.constant(truth.clone());
    let loss = soft_dice_loss(&mut g, p, t)?;
    Ok(g.value(loss).data()[0])
}
