//! 2-D cross-correlation with zero padding, stride 1.
//!
//! Both passes lower to an im2col matrix product in 64-bit precision, so the
//! 32-bit storage path still accumulates every reduction in `f64`. Work is
//! split per batch item and per-item results are summed in index order,
//! which keeps the output bit-identical for any thread count.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::error::{EmtError, Result};

/// Output pixels handled per matrix product; bounds the im2col buffer.
const BLOCK_PIXELS: usize = 4096;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias_len: usize, pad: usize) -> Result<Self> {
        let [_, cin, h, w] = input.shape();
        let [cout, wcin, kh, kw] = weights.shape();
        if cin != wcin {
            return Err(EmtError::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects C_in={wcin}"),
            ));
        }
        if bias_len != cout {
            return Err(EmtError::shape(
                "conv2d",
                format!("bias has {bias_len} entries but kernel has C_out={cout}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(EmtError::shape(
                "conv2d",
                format!("{kh}x{kw} kernel does not fit {h}x{w} input with padding {pad}"),
            ));
        }
        Ok(Geometry {
            cin,
            cout,
            kh,
            kw,
            h,
            w,
            ho: h + 2 * pad - kh + 1,
            wo: w + 2 * pad - kw + 1,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn rows_per_block(&self) -> usize {
        (BLOCK_PIXELS / self.wo).max(1)
    }

    /// Fill `cols` (K x rows*wo) for output rows `oy0..oy1` of one item.
    fn im2col<T: Real>(&self, item: &[T], oy0: usize, oy1: usize, cols: &mut [f64]) {
        let npx = (oy1 - oy0) * self.wo;
        let hw = self.h * self.w;
        for ci in 0..self.cin {
            let plane = &item[ci * hw..(ci + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * npx..(row + 1) * npx];
                    let (x_lo, x_hi) = self.valid_x(kx);
                    for oy in oy0..oy1 {
                        let d = &mut dst[(oy - oy0) * self.wo..(oy - oy0 + 1) * self.wo];
                        let iy = oy + ky;
                        if iy < self.pad || iy - self.pad >= self.h {
                            d.fill(0.0);
                            continue;
                        }
                        let src = &plane[(iy - self.pad) * self.w..(iy - self.pad + 1) * self.w];
                        d[..x_lo].fill(0.0);
                        d[x_hi..].fill(0.0);
                        for ox in x_lo..x_hi {
                            d[ox] = src[ox + kx - self.pad].to_f64();
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `cols` back onto one item's input gradient.
    fn col2im(&self, cols: &[f64], oy0: usize, oy1: usize, grad: &mut [f64]) {
        let npx = (oy1 - oy0) * self.wo;
        let hw = self.h * self.w;
        for ci in 0..self.cin {
            let plane = &mut grad[ci * hw..(ci + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * npx..(row + 1) * npx];
                    let (x_lo, x_hi) = self.valid_x(kx);
                    for oy in oy0..oy1 {
                        let iy = oy + ky;
                        if iy < self.pad || iy - self.pad >= self.h {
                            continue;
                        }
                        let s = &src[(oy - oy0) * self.wo..(oy - oy0 + 1) * self.wo];
                        let d = &mut plane[(iy - self.pad) * self.w..(iy - self.pad + 1) * self.w];
                        for ox in x_lo..x_hi {
                            d[ox + kx - self.pad] += s[ox];
                        }
                    }
                }
            }
        }
    }

    /// Output columns whose tap `kx` lands inside the input row.
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo).max(lo);
        (lo, hi)
    }
}

/// Row-major `c = a * b (+ c if accumulate)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides above address only elements inside `a`, `b` and
    // the first m*n elements of `c` (checked in debug builds).
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
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn weights_f64<T: Real>(weights: &Tensor<T>) -> Vec<f64> {
    weights.data().iter().map(|v| v.to_f64()).collect()
}

/// Forward convolution. Output is (N, C_out, H + 2p - kH + 1, W + 2p - kW + 1),
/// which is (N, C_out, H, W) for odd kernels with p = (k - 1) / 2.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weights, bias.len(), padding)?;
    let wd = weights_f64(weights);
    let bd: Vec<f64> = bias.iter().map(|b| b.to_f64()).collect();
    let n = input.n();
    let out_item = g.cout * g.ho * g.wo;

    let items: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let item = input.item(ni);
            let mut out = vec![T::default(); out_item];
            let k = g.k();
            let rpb = g.rows_per_block();
            let mut cols = vec![0.0f64; k * rpb * g.wo];
            let mut acc = vec![0.0f64; g.cout * rpb * g.wo];
            let mut oy0 = 0;
            while oy0 < g.ho {
                let oy1 = (oy0 + rpb).min(g.ho);
                let npx = (oy1 - oy0) * g.wo;
                g.im2col(item, oy0, oy1, &mut cols[..k * npx]);
                gemm(g.cout, k, npx, &wd, (k, 1), &cols[..k * npx], (npx, 1), &mut acc, false);
                for co in 0..g.cout {
                    let dst = &mut out[co * g.ho * g.wo + oy0 * g.wo..co * g.ho * g.wo + oy1 * g.wo];
                    for (d, &a) in dst.iter_mut().zip(&acc[co * npx..(co + 1) * npx]) {
                        *d = T::from_f64(a + bd[co]);
                    }
                }
                oy0 = oy1;
            }
            out
        })
        .collect();

    let mut data = Vec::with_capacity(n * out_item);
    for item in items {
        data.extend(item);
    }
    Tensor::from_vec([n, g.cout, g.ho, g.wo], data)
}

/// Gradients of [`conv2d_forward`].
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    /// `None` when the caller did not ask for it.
    pub input: Option<Tensor<T>>,
    /// Same layout as the kernel, (C_out, C_in, kH, kW).
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Exact gradients of `conv2d_forward(input, weights, _, padding)` given
/// the upstream gradient of its output.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    padding: usize,
    grad_output: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input, weights, weights.shape()[0], padding)?;
    let n = input.n();
    if grad_output.shape() != [n, g.cout, g.ho, g.wo] {
        return Err(EmtError::shape(
            "conv2d_backward",
            format!(
                "grad_output is {:?} but forward output is {:?}",
                grad_output.shape(),
                [n, g.cout, g.ho, g.wo]
            ),
        ));
    }
    let wd = weights_f64(weights);
    let k = g.k();

    struct ItemGrads {
        weights: Vec<f64>,
        bias: Vec<f64>,
        input: Option<Vec<f64>>,
    }

    let per_item: Vec<ItemGrads> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let item = input.item(ni);
            let go_item = grad_output.item(ni);
            let rpb = g.rows_per_block();
            let mut cols = vec![0.0f64; k * rpb * g.wo];
            let mut go = vec![0.0f64; g.cout * rpb * g.wo];
            let mut gcols = if need_input_grad {
                vec![0.0f64; k * rpb * g.wo]
            } else {
                Vec::new()
            };
            let mut gw = vec![0.0f64; g.cout * k];
            let mut gb = vec![0.0f64; g.cout];
            let mut gx = need_input_grad.then(|| vec![0.0f64; g.cin * g.h * g.w]);
            let mut oy0 = 0;
            let mut first = true;
            while oy0 < g.ho {
                let oy1 = (oy0 + rpb).min(g.ho);
                let npx = (oy1 - oy0) * g.wo;
                for co in 0..g.cout {
                    let src = &go_item[co * g.ho * g.wo + oy0 * g.wo..co * g.ho * g.wo + oy1 * g.wo];
                    let dst = &mut go[co * npx..(co + 1) * npx];
                    let mut s = 0.0f64;
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = v.to_f64();
                        s += *d;
                    }
                    gb[co] += s;
                }
                g.im2col(item, oy0, oy1, &mut cols[..k * npx]);
                // dW += dY * cols^T
                gemm(g.cout, npx, k, &go, (npx, 1), &cols[..k * npx], (1, npx), &mut gw, !first);
                if let Some(gx) = gx.as_mut() {
                    // dCols = W^T * dY
                    gemm(k, g.cout, npx, &wd, (1, k), &go, (npx, 1), &mut gcols[..k * npx], false);
                    g.col2im(&gcols[..k * npx], oy0, oy1, gx);
                }
                first = false;
                oy0 = oy1;
            }
            ItemGrads {
                weights: gw,
                bias: gb,
                input: gx,
            }
        })
        .collect();

    let mut gw = vec![0.0f64; g.cout * k];
    let mut gb = vec![0.0f64; g.cout];
    let mut gx = Vec::with_capacity(if need_input_grad { input.numel() } else { 0 });
    for item in per_item {
        for (a, b) in gw.iter_mut().zip(&item.weights) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(&item.bias) {
            *a += b;
        }
        if let Some(x) = item.input {
            gx.extend(x.into_iter().map(T::from_f64));
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad {
            Some(Tensor::from_vec(input.shape(), gx)?)
        } else {
            None
        },
        weights: gw.into_iter().map(T::from_f64).collect(),
        bias: gb.into_iter().map(T::from_f64).collect(),
    })
}
