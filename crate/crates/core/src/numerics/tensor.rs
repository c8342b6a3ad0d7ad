use std::fmt::Debug;

use crate::error::{EmtError, Result};

/// Scalar storage type for tensors. Production code runs on `f32`; `f64`
/// instantiations exist so gradients can be checked against finite
/// differences without 32-bit rounding noise.
pub trait Real: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense (N, C, H, W) array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [n, c, h, w] = self.shape;
        write!(f, "Tensor({n}x{c}x{h}x{w})")
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::default(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(EmtError::shape(
                "tensor",
                format!(
                    "{}x{}x{}x{} needs {expected} values, got {}",
                    shape[0],
                    shape[1],
                    shape[2],
                    shape[3],
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([ni, ci, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// One (H, W) plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// All channels of one batch item.
    #[inline]
    pub fn item(&self, n: usize) -> &[T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Spatial crop of `h`x`w` starting at (`y`, `x`), all items and channels.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        let [n, c, th, tw] = self.shape;
        if y + h > th || x + w > tw {
            return Err(EmtError::shape(
                "crop",
                format!("window {h}x{w} at ({y}, {x}) exceeds {th}x{tw}"),
            ));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                let plane = self.plane(ni, ci);
                for row in y..y + h {
                    data.extend_from_slice(&plane[row * tw + x..row * tw + x + w]);
                }
            }
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Concatenate along the batch axis. All parts must agree on (C, H, W).
    pub fn stack<'a>(parts: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<Self> {
        let mut shape: Option<[usize; 4]> = None;
        let mut data = Vec::new();
        for part in parts {
            match shape.as_mut() {
                None => shape = Some(part.shape),
                Some(s) => {
                    if s[1..] != part.shape[1..] {
                        return Err(EmtError::shape(
                            "stack",
                            format!("item {:?} does not match {:?}", part.shape, s),
                        ));
                    }
                    s[0] += part.shape[0];
                }
            }
            data.extend_from_slice(&part.data);
        }
        let shape = shape.ok_or_else(|| EmtError::invalid("stack of zero tensors"))?;
        Ok(Tensor { shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }
}

pub fn ensure_same_shape<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(EmtError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
        let err = Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).unwrap_err();
        assert!(err.to_string().contains("1x2x2x2"));
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::<f32>::from_fn([1, 2, 4, 4], |[_, c, y, x]| (c * 100 + y * 10 + x) as f32);
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.shape(), [1, 2, 2, 2]);
        assert_eq!(c.data(), &[12.0, 13.0, 22.0, 23.0, 112.0, 113.0, 122.0, 123.0]);
        assert!(t.crop(3, 3, 2, 2).is_err());

        let s = Tensor::stack([&c, &c]).unwrap();
        assert_eq!(s.shape(), [2, 2, 2, 2]);
        assert_eq!(s.item(1), c.data());
        let other = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(Tensor::stack([&c, &other]).is_err());
    }
}
