//! Ultrasound-like phantoms: a speckled tissue field with depth
//! attenuation and, for lesion labels, a darker (hypoechoic) region whose
//! exact support is the mask.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::{Dataset, Label, Sample};
use crate::rng::{self, tag};

/// Lesion outline in normalized elliptical coordinates.
struct Lesion {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos_t: f64,
    sin_t: f64,
    /// (amplitude, frequency, phase) of the boundary modulation.
    harmonics: Vec<(f64, f64, f64)>,
    /// Width of the intensity transition, in normalized radius units.
    edge: f64,
    /// Lesion brightness relative to the surrounding tissue.
    darkening: f64,
}

impl Lesion {
    fn sample<R: Rng + ?Sized>(label: Label, size: f64, rng: &mut R) -> Self {
        let r_min = (0.08 * size).max(1.0);
        let r_max = (0.2 * size).max(r_min + 0.5);
        let theta: f64 = rng.random_range(0.0..PI);
        let mut lesion = Lesion {
            cx: rng.random_range(0.3..0.7) * size,
            cy: rng.random_range(0.3..0.7) * size,
            rx: rng.random_range(r_min..r_max),
            ry: rng.random_range(r_min..r_max),
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            harmonics: Vec::new(),
            edge: 0.25,
            darkening: rng.random_range(0.3..0.6),
        };
        if label == Label::Malignant {
            for k in 2..=7 {
                let k = k as f64;
                let amplitude = rng.random_range(0.0..0.22) / k.sqrt();
                lesion.harmonics.push((amplitude, k, rng.random_range(0.0..2.0 * PI)));
            }
            lesion.edge = 0.06;
        }
        lesion
    }

    /// Normalized radius: `<= 1` inside the lesion.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos_t + dy * self.sin_t) / self.rx;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.ry;
        let d = u.hypot(v);
        if self.harmonics.is_empty() {
            return d;
        }
        let phi = v.atan2(u);
        let boundary: f64 = 1.0
            + self
                .harmonics
                .iter()
                .map(|&(a, k, p)| a * (k * phi + p).cos())
                .sum::<f64>();
        d / boundary.max(0.2)
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Generates one `size × size` phantom. The same `rng` state always
/// yields the same sample.
pub fn generate_phantom<R: Rng + ?Sized>(label: Label, size: usize, rng: &mut R) -> Sample {
    let s = size as f64;
    let base: f64 = rng.random_range(0.55..0.75);
    let attenuation: f64 = rng.random_range(0.2..0.4);
    let texture: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(1.0..3.0) * 2.0 * PI / s,
                rng.random_range(1.0..3.0) * 2.0 * PI / s,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let lesion = label.has_lesion().then(|| Lesion::sample(label, s, rng));
    let speckle = Gamma::new(10.0, 0.1).expect("valid gamma parameters");

    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let mut tissue = base
                + texture
                    .iter()
                    .map(|&(a, fx, fy, p)| a * (fx * xf + fy * yf + p).sin())
                    .sum::<f64>();
            tissue *= 1.0 - attenuation * yf / s;
            let mut inside = false;
            if let Some(l) = &lesion {
                let r = l.radius(xf, yf);
                inside = r <= 1.0;
                let weight = smoothstep((1.0 + l.edge / 2.0 - r) / l.edge);
                tissue *= 1.0 - (1.0 - l.darkening) * weight;
            }
            let noise: f64 = speckle.sample(rng);
            image.push((tissue * noise).clamp(0.0, 1.0));
            mask.push(inside as u8);
        }
    }
    if let Some(l) = &lesion {
        if !mask.contains(&1) {
            // sub-pixel lesion on a tiny canvas: keep the nearest pixel
            let x = (l.cx.round() as usize).min(size - 1);
            let y = (l.cy.round() as usize).min(size - 1);
            mask[y * size + x] = 1;
        }
    }
    Sample {
        id: 0,
        label,
        height: size,
        width: size,
        image,
        mask,
    }
}

/// Phantoms for each `(label, count)` with ids numbered from 0. Each sample
/// has its own stream, so counts of one label never shift another's images.
pub fn generate_dataset(counts: &[(Label, usize)], size: usize, seed: u64) -> Dataset {
    let mut samples = Vec::new();
    for &(label, n) in counts {
        for k in 0..n {
            let mut r = rng::stream(seed, &[tag::PHANTOM, label.index() as u64, k as u64]);
            let mut s = generate_phantom(label, size, &mut r);
            s.id = samples.len() as u64;
            samples.push(s);
        }
    }
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn normal_has_empty_mask() {
        let s = generate_phantom(Label::Normal, 32, &mut rng::stream(1, &[]));
        assert_eq!(s.lesion_pixels(), 0);
        s.validate().unwrap();
    }

    #[test]
    fn same_seed_same_sample() {
        for label in Label::ALL {
            let a = generate_phantom(label, 32, &mut rng::stream(9, &[label as u64]));
            let b = generate_phantom(label, 32, &mut rng::stream(9, &[label as u64]));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn benign_lesion_fraction_in_range() {
        for seed in 0..1000 {
            let s = generate_phantom(Label::Benign, 64, &mut rng::stream(seed, &[7]));
            let f = s.lesion_pixels() as f64 / (64.0 * 64.0);
            assert!((0.01..=0.35).contains(&f), "seed {seed}: fraction {f}");
        }
    }

    #[test]
    fn lesions_are_darker_than_tissue() {
        let mut darker = 0;
        for seed in 0..50 {
            let s = generate_phantom(Label::Malignant, 64, &mut rng::stream(seed, &[8]));
            let mean = |want: u8| {
                let v: Vec<f64> = s.image.iter().zip(&s.mask).filter(|(_, &m)| m == want).map(|(&v, _)| v).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            if mean(1) < mean(0) {
                darker += 1;
            }
        }
        assert!(darker >= 48, "{darker}/50");
    }

    #[test]
    fn dataset_counts_and_independence() {
        let a = generate_dataset(&[(Label::Benign, 5), (Label::Normal, 2)], 16, 3);
        assert_eq!(a.label_counts(), [2, 5, 0]);
        assert_eq!(a.iter().map(|s| s.id).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
        let b = generate_dataset(&[(Label::Benign, 9), (Label::Normal, 2)], 16, 3);
        assert_eq!(a.samples[0].image, b.samples[0].image);
        assert_eq!(a.samples[5].image, b.samples[9].image);
    }

    #[test]
    fn tiny_canvas_still_has_lesion() {
        for seed in 0..200 {
            let s = generate_phantom(Label::Malignant, 4, &mut rng::stream(seed, &[]));
            s.validate().unwrap();
        }
    }
}
