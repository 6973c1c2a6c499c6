//! Finite-difference self-test: one check per differentiable primitive plus
//! an end-to-end check of Dice loss through a small attention U-Net.

use rand::SeedableRng;

use crate::error::Result;
use crate::metrics::soft_dice_loss;
use crate::model::{AttentionUNet, ModelConfig};
use crate::numerics::{GradCheck, Graph, OpKind, Tensor, UpsampleMode, Var};
use crate::rng::Rng;

pub const PRIMITIVE_THRESHOLD: f64 = 1e-5;
pub const END_TO_END_THRESHOLD: f64 = 1e-4;
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

/// Keeps probe values at least 0.1 away from zero, clear of relu kinks.
fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// `sum(y ⊙ r)` for a fixed random `r` of `y`'s shape.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::seed_from_u64(seed);
    let r = Tensor::uniform(g.shape(y).to_vec(), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn primitive_case(kind: OpKind, gc: &GradCheck, rng: &mut Rng) -> Result<f64> {
    let u = |shape: &[usize], lo: f64, hi: f64, rng: &mut Rng| Tensor::uniform(shape.to_vec(), lo, hi, rng);
    match kind {
        OpKind::Conv2d => {
            let inputs = [
                u(&[1, 2, 5, 5], -1.0, 1.0, rng),
                u(&[3, 2, 3, 3], -1.0, 1.0, rng),
                u(&[3], -1.0, 1.0, rng),
            ];
            gc.run(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                    weighted_sum(g, y, 1)
                },
                &inputs,
            )
        }
        OpKind::MaxPool2d => {
            // distinct values so no window sits on a tie
            let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
            rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
            let inputs = [Tensor::new(vec![1, 2, 4, 4], vals)?];
            gc.run(
                |g, v| {
                    let y = g.maxpool2d(v[0])?;
                    weighted_sum(g, y, 2)
                },
                &inputs,
            )
        }
        OpKind::UpsampleNearest | OpKind::UpsampleBilinear => {
            let mode = if kind == OpKind::UpsampleNearest {
                UpsampleMode::Nearest
            } else {
                UpsampleMode::Bilinear
            };
            let inputs = [u(&[1, 2, 3, 4], -1.0, 1.0, rng)];
            gc.run(
                |g, v| {
                    let y = g.upsample2d(v[0], mode)?;
                    weighted_sum(g, y, 3)
                },
                &inputs,
            )
        }
        OpKind::Relu => {
            let inputs = [away_from_zero(u(&[2, 3, 3, 3], -1.0, 1.0, rng))];
            gc.run(
                |g, v| {
                    let y = g.relu(v[0]);
                    weighted_sum(g, y, 4)
                },
                &inputs,
            )
        }
        OpKind::Sigmoid => {
            let inputs = [u(&[2, 3, 3, 3], -3.0, 3.0, rng)];
            gc.run(
                |g, v| {
                    let y = g.sigmoid(v[0]);
                    weighted_sum(g, y, 5)
                },
                &inputs,
            )
        }
        OpKind::Add => {
            let inputs = [u(&[2, 3, 4, 4], -1.0, 1.0, rng), u(&[3], -1.0, 1.0, rng)];
            gc.run(
                |g, v| {
                    let y = g.add(v[0], v[1])?;
                    let y = g.mul(y, y)?;
                    weighted_sum(g, y, 6)
                },
                &inputs,
            )
        }
        OpKind::Mul => {
            let inputs = [u(&[2, 3, 4, 4], -1.0, 1.0, rng), u(&[2, 3, 4, 4], -1.0, 1.0, rng)];
            gc.run(
                |g, v| {
                    let y = g.mul(v[0], v[1])?;
                    Ok(g.sum(y))
                },
                &inputs,
            )
        }
        OpKind::ConcatChannels => {
            let inputs = [u(&[2, 2, 3, 3], -1.0, 1.0, rng), u(&[2, 3, 3, 3], -1.0, 1.0, rng)];
            gc.run(
                |g, v| {
                    let y = g.concat_channels(&[v[0], v[1]])?;
                    weighted_sum(g, y, 7)
                },
                &inputs,
            )
        }
        OpKind::Sum => {
            let inputs = [u(&[2, 3, 4], -1.0, 1.0, rng)];
            gc.run(
                |g, v| {
                    let s = g.sum(v[0]);
                    g.mul(s, s)
                },
                &inputs,
            )
        }
        OpKind::Scale => {
            let inputs = [u(&[2, 3, 4], -1.0, 1.0, rng)];
            gc.run(
                |g, v| {
                    let y = g.scale(v[0], -2.5);
                    weighted_sum(g, y, 8)
                },
                &inputs,
            )
        }
        OpKind::AddScalar => {
            let inputs = [u(&[2, 3, 4], -1.0, 1.0, rng)];
            gc.run(
                |g, v| {
                    let y = g.add_scalar(v[0], 1.5);
                    let y = g.mul(y, y)?;
                    Ok(g.sum(y))
                },
                &inputs,
            )
        }
        OpKind::Div => {
            let inputs = [u(&[2, 3, 4], -1.0, 1.0, rng), u(&[2, 3, 4], 1.0, 2.0, rng)];
            gc.run(
                |g, v| {
                    let y = g.div(v[0], v[1])?;
                    weighted_sum(g, y, 9)
                },
                &inputs,
            )
        }
    }
}

/// Soft Dice loss of a depth-1 attention U-Net on an 8×8 input, checked
/// against every parameter.
pub fn end_to_end_error(fault: Option<OpKind>) -> Result<f64> {
    let model = AttentionUNet::build(ModelConfig {
        depth: 1,
        base_channels: 2,
        init_seed: 3,
        ..ModelConfig::default()
    })?;
    let mut rng = Rng::seed_from_u64(9);
    let x = Tensor::uniform(vec![1, 1, 8, 8], 0.0, 1.0, &mut rng);
    let t = Tensor::uniform(vec![1, 1, 8, 8], 0.0, 1.0, &mut rng).map(|v| f64::from(u8::from(v > 0.7)));
    let inputs: Vec<Tensor> = model.parameters().iter().map(|(_, t)| t.clone()).collect();
    GradCheck::new(EPS).with_fault(fault).run(
        |g, params| {
            let xv = g.constant(x.clone());
            let trace = model.forward_graph(g, params, xv)?;
            let tv = g.constant(t.clone());
            soft_dice_loss(g, trace.output, tv)
        },
        &inputs,
    )
}

/// Runs every check. `fault` corrupts one op's backward rule, for testing
/// that the suite notices.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let gc = GradCheck::new(EPS).with_fault(fault);
    let mut rng = Rng::seed_from_u64(0x6772_6164);
    let mut out = Vec::with_capacity(OpKind::ALL.len() + 1);
    for kind in OpKind::ALL {
        out.push(CheckResult {
            name: kind.name().to_string(),
            max_rel_error: primitive_case(kind, &gc, &mut rng)?,
            threshold: PRIMITIVE_THRESHOLD,
        });
    }
    out.push(CheckResult {
        name: "attention_unet_dice".to_string(),
        max_rel_error: end_to_end_error(fault)?,
        threshold: END_TO_END_THRESHOLD,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn suite_passes_and_covers_every_op_once() {
        let results = run_suite(None).unwrap();
        for r in &results {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
        let names: HashSet<&str> = results.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names.len(), results.len());
        for kind in OpKind::ALL {
            assert!(names.contains(kind.name()));
        }
    }

    #[test]
    fn every_injected_fault_is_caught() {
        for kind in OpKind::ALL {
            let results = run_suite(Some(kind)).unwrap();
            let own = results.iter().find(|r| r.name == kind.name()).unwrap();
            assert!(!own.passed(), "{kind} fault went unnoticed");
        }
    }
}
