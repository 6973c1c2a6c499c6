use rand::Rng;

use super::Sample;

/// Ranges for on-the-fly augmentation. Geometric transforms act on image
/// and mask together; photometric ones on the image only.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub flip_horizontal_prob: f64,
    pub flip_vertical_prob: f64,
    /// Rotation drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Translation drawn uniformly from `±translate_frac` of each extent.
    pub translate_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Brightness offset drawn uniformly from `±brightness_delta`.
    pub brightness_delta: f64,
    /// Mixed into every augmentation stream.
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enabled: true,
            flip_horizontal_prob: 0.5,
            flip_vertical_prob: 0.5,
            rotation_deg: 25.0,
            translate_frac: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
            contrast_min: 0.8,
            contrast_max: 1.2,
            brightness_delta: 0.1,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            enabled: false,
            ..Self::default()
        }
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Affine warp about the image centre: flip, then rotate and scale, then
/// translate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rotation_deg: f64,
    /// Translation in pixels, `(x, y)`.
    pub translate: (f64, f64),
    pub scale: f64,
}

impl GeometricTransform {
    pub fn identity() -> Self {
        GeometricTransform {
            flip_horizontal: false,
            flip_vertical: false,
            rotation_deg: 0.0,
            translate: (0.0, 0.0),
            scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, height: usize, width: usize, rng: &mut R) -> Self {
        GeometricTransform {
            flip_horizontal: rng.random_bool(cfg.flip_horizontal_prob.clamp(0.0, 1.0)),
            flip_vertical: rng.random_bool(cfg.flip_vertical_prob.clamp(0.0, 1.0)),
            rotation_deg: draw(rng, -cfg.rotation_deg, cfg.rotation_deg),
            translate: (
                draw(rng, -cfg.translate_frac, cfg.translate_frac) * width as f64,
                draw(rng, -cfg.translate_frac, cfg.translate_frac) * height as f64,
            ),
            scale: draw(rng, cfg.scale_min, cfg.scale_max),
        }
    }

    /// Warps image (bilinear) and mask (nearest, re-binarized at 0.5).
    /// Pixels mapped from outside the frame become 0.
    pub fn apply(&self, s: &Sample) -> Sample {
        if self.is_identity() {
            return s.clone();
        }
        let (h, w) = (s.height, s.width);
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let fx = if self.flip_horizontal { -1.0 } else { 1.0 };
        let fy = if self.flip_vertical { -1.0 } else { 1.0 };
        let pixel = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                0.0
            } else {
                s.image[y as usize * w + x as usize]
            }
        };
        let mut image = Vec::with_capacity(h * w);
        let mut mask = Vec::with_capacity(h * w);
        for oy in 0..h {
            for ox in 0..w {
                // inverse map: undo translation, scale, rotation, then flip
                let dx = (ox as f64 - cx - self.translate.0) / self.scale;
                let dy = (oy as f64 - cy - self.translate.1) / self.scale;
                let rx = cos * dx + sin * dy;
                let ry = -sin * dx + cos * dy;
                let (sx, sy) = (cx + fx * rx, cy + fy * ry);

                let (x0, y0) = (sx.floor(), sy.floor());
                let (ax, ay) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = if ax == 0.0 && ay == 0.0 {
                    pixel(x0, y0)
                } else {
                    (1.0 - ay) * ((1.0 - ax) * pixel(x0, y0) + ax * pixel(x0 + 1, y0))
                        + ay * ((1.0 - ax) * pixel(x0, y0 + 1) + ax * pixel(x0 + 1, y0 + 1))
                };
                image.push(v.clamp(0.0, 1.0));

                let (nx, ny) = (sx.round(), sy.round());
                let m = if nx < 0.0 || ny < 0.0 || nx >= w as f64 || ny >= h as f64 {
                    0.0
                } else {
                    f64::from(s.mask[ny as usize * w + nx as usize])
                };
                mask.push((m >= 0.5) as u8);
            }
        }
        Sample {
            image,
            mask,
            ..s.clone()
        }
    }
}

/// Contrast gain about the image mean, then a brightness offset; clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricTransform {
    pub contrast: f64,
    pub brightness: f64,
}

impl PhotometricTransform {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> Self {
        PhotometricTransform {
            contrast: draw(rng, cfg.contrast_min, cfg.contrast_max),
            brightness: draw(rng, -cfg.brightness_delta, cfg.brightness_delta),
        }
    }

    pub fn apply(&self, image: &mut [f64]) {
        if self.contrast == 1.0 && self.brightness == 0.0 {
            return;
        }
        let mean = image.iter().sum::<f64>() / image.len().max(1) as f64;
        for v in image {
            *v = ((*v - mean) * self.contrast + mean + self.brightness).clamp(0.0, 1.0);
        }
    }
}

/// Random augmentation of one sample. With `cfg.enabled == false` the
/// sample is returned unchanged and `rng` is not consumed. If a warp would
/// push a lesion entirely out of frame, the geometric step is skipped so the
/// mask keeps agreeing with the label.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentationConfig, rng: &mut R) -> Sample {
    if !cfg.enabled {
        return sample.clone();
    }
    let geometric = GeometricTransform::sample(cfg, sample.height, sample.width, rng);
    let photometric = PhotometricTransform::sample(cfg, rng);
    let mut out = geometric.apply(sample);
    if sample.label.has_lesion() && out.lesion_pixels() == 0 {
        out = sample.clone();
    }
    photometric.apply(&mut out.image);
    out
}
