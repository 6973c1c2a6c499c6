use fedseg::data::Sample;
use image::{GrayImage, Luma};

pub const PREDICTION_LEVEL: u8 = 255;
pub const TRUTH_LEVEL: u8 = 128;

/// Mask pixels with a 4-neighbour outside the mask or the frame.
pub fn boundary(mask: &[u8], height: usize, width: usize) -> Vec<bool> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && mask[y as usize * width + x as usize] != 0
    };
    let mut out = vec![false; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !inside(y + dy, x + dx)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// The input scan with the ground-truth outline in mid gray and the
/// predicted outline in white; the prediction wins where both overlap.
pub fn render(sample: &Sample, prediction: &[u8]) -> GrayImage {
    let (h, w) = (sample.height, sample.width);
    let truth = boundary(&sample.mask, h, w);
    let pred = boundary(prediction, h, w);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let v = if pred[i] {
            PREDICTION_LEVEL
        } else if truth[i] {
            TRUTH_LEVEL
        } else {
            (sample.image[i] * 255.0).round() as u8
        };
        Luma([v])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_of_a_square() {
        let mut mask = vec![0u8; 25];
        for y in 1..4 {
            for x in 1..4 {
                mask[y * 5 + x] = 1;
            }
        }
        let b = boundary(&mask, 5, 5);
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
        assert!(!b[2 * 5 + 2]);
    }

    #[test]
    fn full_mask_outline_is_the_frame() {
        let b = boundary(&[1; 9], 3, 3);
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
    }
}
