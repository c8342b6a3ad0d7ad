//! Bicubic resampling with the Catmull-Rom kernel (a = -0.5), edge-clamped
//! taps and the pixel-center convention (align_corners = false). No
//! antialiasing prefilter is applied when downscaling.

use std::fmt;

use super::tensor::{Real, Tensor};
use crate::error::{EmtError, Result};

const A: f64 = -0.5;

/// Resize factor `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleFactor {
    pub num: u32,
    pub den: u32,
}

impl ScaleFactor {
    pub const fn new(num: u32, den: u32) -> Self {
        ScaleFactor { num, den }
    }

    pub const fn up(r: u32) -> Self {
        ScaleFactor { num: r, den: 1 }
    }

    pub const fn down(r: u32) -> Self {
        ScaleFactor { num: 1, den: r }
    }

    fn apply(self, len: usize) -> usize {
        len * self.num as usize / self.den as usize
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

pub(crate) fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four (source index, weight) taps for every output position on one axis.
fn taps(in_len: usize, out_len: usize, inv_scale: f64) -> Vec<[(usize, f64); 4]> {
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * inv_scale - 0.5;
            let i0 = src.floor();
            let t = src - i0;
            let i0 = i0 as isize;
            let weights = [cubic(1.0 + t), cubic(t), cubic(1.0 - t), cubic(2.0 - t)];
            let mut out = [(0usize, 0.0f64); 4];
            for (k, w) in weights.into_iter().enumerate() {
                let idx = (i0 - 1 + k as isize).clamp(0, last) as usize;
                out[k] = (idx, w);
            }
            out
        })
        .collect()
}

pub fn bicubic_resize<T: Real>(input: &Tensor<T>, scale: ScaleFactor) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if scale.num == 0 || scale.den == 0 {
        return Err(EmtError::invalid(format!("resize factor {scale} must be positive")));
    }
    let (ho, wo) = (scale.apply(h), scale.apply(w));
    if ho == 0 || wo == 0 {
        return Err(EmtError::shape(
            "bicubic_resize",
            format!("{h}x{w} scaled by {scale} is empty ({ho}x{wo})"),
        ));
    }
    let inv = scale.den as f64 / scale.num as f64;
    let xt = taps(w, wo, inv);
    let yt = taps(h, ho, inv);

    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut rows = vec![0.0f64; h * wo];
    for ni in 0..n {
        for ci in 0..c {
            let plane = input.plane(ni, ci);
            for y in 0..h {
                let src = &plane[y * w..(y + 1) * w];
                for (x, t) in xt.iter().enumerate() {
                    rows[y * wo + x] = t.iter().map(|&(i, wt)| wt * src[i].to_f64()).sum();
                }
            }
            for t in &yt {
                for x in 0..wo {
                    let v: f64 = t.iter().map(|&(i, wt)| wt * rows[i * wo + x]).sum();
                    out.push(T::from_f64(v));
                }
            }
        }
    }
    Tensor::from_vec([n, c, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_partition_of_unity() {
        for i in 0..100 {
            let t = i as f64 / 100.0;
            let s = cubic(1.0 + t) + cubic(t) + cubic(1.0 - t) + cubic(2.0 - t);
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f32>::filled([1, 3, 12, 10], 0.4375);
        for s in [ScaleFactor::down(2), ScaleFactor::down(3), ScaleFactor::up(2), ScaleFactor::new(2, 3)] {
            let y = bicubic_resize(&x, s).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.4375).abs() < 1e-6), "{s}");
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let x = Tensor::<f32>::from_fn([1, 2, 7, 9], |[_, c, y, x]| ((c * 31 + y * 7 + x * 3) % 11) as f32 / 11.0);
        let y = bicubic_resize(&x, ScaleFactor::new(1, 1)).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_dims_floor() {
        let x = Tensor::<f32>::zeros([1, 1, 7, 9]);
        assert_eq!(bicubic_resize(&x, ScaleFactor::down(2)).unwrap().shape(), [1, 1, 3, 4]);
        assert_eq!(bicubic_resize(&x, ScaleFactor::up(3)).unwrap().shape(), [1, 1, 21, 27]);
        assert!(bicubic_resize(&x, ScaleFactor::down(8)).is_err());
        assert!(bicubic_resize(&x, ScaleFactor::new(0, 1)).is_err());
    }

    /// Direct 2-D kernel sum, written without the separable tap tables.
    fn oracle(x: &Tensor<f64>, factor: f64) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let (ho, wo) = ((h as f64 * factor) as usize, (w as f64 * factor) as usize);
        Tensor::from_fn([n, c, ho, wo], |[ni, ci, oy, ox]| {
            let sy = (oy as f64 + 0.5) / factor - 0.5;
            let sx = (ox as f64 + 0.5) / factor - 0.5;
            let mut acc = 0.0;
            for iy in (sy.floor() as i64 - 1)..=(sy.floor() as i64 + 2) {
                for ix in (sx.floor() as i64 - 1)..=(sx.floor() as i64 + 2) {
                    let wgt = cubic(sy - iy as f64) * cubic(sx - ix as f64);
                    let cy = iy.clamp(0, h as i64 - 1) as usize;
                    let cx = ix.clamp(0, w as i64 - 1) as usize;
                    acc += wgt * x.get(ni, ci, cy, cx);
                }
            }
            acc
        })
    }

    #[test]
    fn ramp_downscale_matches_direct_oracle() {
        let x = Tensor::<f64>::from_fn([1, 1, 8, 8], |[_, _, y, x]| (y * 8 + x) as f64 / 63.0);
        let want = oracle(&x, 0.5);
        let got = bicubic_resize(&x.cast::<f32>(), ScaleFactor::down(2)).unwrap();
        assert_eq!(got.shape(), [1, 1, 4, 4]);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
        }
        // non-ramp content at other factors
        let x = Tensor::<f64>::from_fn([1, 2, 9, 12], |[_, c, y, x]| ((c + 1) * (y * 5 + x * 3) % 7) as f64 / 7.0);
        for f in [1.0 / 3.0, 2.0, 3.0] {
            let num_den = if f < 1.0 { ScaleFactor::down(3) } else { ScaleFactor::up(f as u32) };
            let got = bicubic_resize(&x, num_den).unwrap();
            let want = oracle(&x, f);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translation_equivariant_on_interior() {
        // period-8 pattern; shifting the input by 2 shifts the /2 output by 1
        let pat = |y: usize, x: usize| ((y % 8) as f64 * 0.1 + ((x % 8) as f64 * 0.7).sin()) * 0.5;
        let a = Tensor::<f64>::from_fn([1, 1, 32, 32], |[_, _, y, x]| pat(y, x));
        let b = Tensor::<f64>::from_fn([1, 1, 32, 32], |[_, _, y, x]| pat(y + 2, x + 2));
        let ra = bicubic_resize(&a, ScaleFactor::down(2)).unwrap();
        let rb = bicubic_resize(&b, ScaleFactor::down(2)).unwrap();
        for y in 2..13 {
            for x in 2..13 {
                assert!((rb.get(0, 0, y, x) - ra.get(0, 0, y + 1, x + 1)).abs() < 1e-12);
            }
        }
    }
}
