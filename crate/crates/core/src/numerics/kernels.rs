//! Slice-level forward and backward kernels for the spatial operators.
//!
//! Convolution is lowered to im2col + GEMM per batch sample. The column
//! buffer is rebuilt during backward rather than saved, which keeps peak
//! memory at one sample's columns.

use crate::error::{Error, Result};

/// `c = a · b + beta · c` for row-major `c` (m × n); `a` and `b` take
/// explicit (row, column) strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index dgemm will touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 4],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, in_channels, height, width] = input;
        let [out_channels, kernel_cin, kernel_h, kernel_w] = match *kernel {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {kernel:?}"))),
        };
        if kernel_cin != in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input channel axis (1) is {in_channels} but kernel axis 1 is {kernel_cin}"),
            ));
        }
        if bias != [out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{out_channels}] to match kernel axis 0, got {bias:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "padded input {}x{} (axes 2,3) smaller than kernel {kernel_h}x{kernel_w}",
                    height + 2 * padding,
                    width + 2 * padding
                ),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// A 1×1 stride-1 unpadded convolution reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output indices `o` along one axis with `o*stride + k - padding` in `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if extent + p > k {
            ((extent - 1 + p - k) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (h, w, s, p) = (self.height, self.width, self.stride, self.padding);
        let (oh, ow) = (self.out_h, self.out_w);
        let plane = self.out_plane();
        for ci in 0..self.in_channels {
            let xc = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.kernel_h {
                let (oy_lo, oy_hi) = self.valid_range(ky, h, oh);
                for kx in 0..self.kernel_w {
                    let (ox_lo, ox_hi) = self.valid_range(kx, w, ow);
                    let row = (ci * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    dst.fill(0.0);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let src = &xc[iy * w..(iy + 1) * w];
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            d[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                d[ox] = src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let (h, w, s, p) = (self.height, self.width, self.stride, self.padding);
        let (oh, ow) = (self.out_h, self.out_w);
        let plane = self.out_plane();
        for ci in 0..self.in_channels {
            let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.kernel_h {
                let (oy_lo, oy_hi) = self.valid_range(ky, h, oh);
                for kx in 0..self.kernel_w {
                    let (ox_lo, ox_hi) = self.valid_range(kx, w, ow);
                    let row = (ci * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let d = &mut dxc[iy * w..(iy + 1) * w];
                        let c = &src[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            d[ox * s + kx - p] += c[ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let out_sample = g.out_channels * plane;
    let mut out = vec![0.0; g.batch * out_sample];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch_len() * plane]
    };
    for n in 0..g.batch {
        let xs = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
        let cols: &[f64] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        let os = &mut out[n * out_sample..(n + 1) * out_sample];
        for (co, chunk) in os.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(
            g.out_channels,
            g.patch_len(),
            plane,
            kernel,
            (g.patch_len(), 1),
            cols,
            (plane, 1),
            1.0,
            os,
        );
    }
    out
}

/// Accumulates (`+=`) gradients into whichever of `dx`, `dk`, `db` are requested.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let out_sample = g.out_channels * plane;
    let patch = g.patch_len();
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcol = vec![0.0; if dx.is_some() { patch * plane } else { 0 }];
    for n in 0..g.batch {
        let xs = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
        let ds = &dout[n * out_sample..(n + 1) * out_sample];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in ds.chunks(plane).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dk) = dk.as_deref_mut() {
            let cols: &[f64] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut col);
                &col
            };
            // dK (cout × patch) += dOut (cout × plane) · colsᵀ (plane × patch)
            gemm(g.out_channels, plane, patch, ds, (plane, 1), cols, (1, plane), 1.0, dk);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()];
            if g.is_pointwise() {
                gemm(patch, g.out_channels, plane, kernel, (1, patch), ds, (plane, 1), 1.0, dxs);
            } else {
                // dcol (patch × plane) = Kᵀ (patch × cout) · dOut (cout × plane)
                gemm(patch, g.out_channels, plane, kernel, (1, patch), ds, (plane, 1), 0.0, &mut dcol);
                g.col2im(&dcol, dxs);
            }
        }
    }
}

/// 2×2/stride-2 max pooling. Returns the output and, per output element,
/// the flat input index of the first-occurrence maximum.
pub fn maxpool2d_forward(dims: [usize; 4], x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Per-axis bilinear sampling table for ×2 upsampling with
/// align-corners-false sample centres, clamped at the borders.
pub(crate) fn bilinear_taps(extent: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * extent)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_nearest_forward(dims: [usize; 4], x: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let ow = 2 * w;
    let mut out = vec![0.0; n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for oy in 0..2 * h {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dims: [usize; 4], dout: &[f64], dx: &mut [f64]) {
    let [n, c, h, w] = dims;
    let ow = 2 * w;
    for plane in 0..n * c {
        let src = &dout[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..2 * h {
            for ox in 0..ow {
                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
}

pub fn upsample_bilinear_forward(dims: [usize; 4], x: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let ow = 2 * w;
    let mut out = vec![0.0; n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(dims: [usize; 4], dout: &[f64], dx: &mut [f64]) {
    let [n, c, h, w] = dims;
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let ow = 2 * w;
    for plane in 0..n * c {
        let src = &dout[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                dst[y1 * w + x0] += g * ly * (1.0 - lx);
                dst[y1 * w + x1] += g * ly * lx;
            }
        }
    }
}
