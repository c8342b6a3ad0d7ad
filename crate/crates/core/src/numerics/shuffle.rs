use super::tensor::{Real, Tensor};
use crate::error::{EmtError, Result};

/// Depth-to-space: `out[n, c, y*r + i, x*r + j] = in[n, c*r*r + i*r + j, y, x]`.
pub fn pixel_shuffle<T: Real>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(EmtError::shape(
            "pixel_shuffle",
            format!("{c} channels not divisible by r^2 = {}", r * r),
        ));
    }
    let co = c / (r * r);
    let mut out = Tensor::zeros([n, co, h * r, w * r]);
    for ni in 0..n {
        for oc in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let src = input.plane(ni, oc * r * r + i * r + j);
                    for y in 0..h {
                        for x in 0..w {
                            out.set(ni, oc, y * r + i, x * r + j, src[y * w + x]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse permutation of [`pixel_shuffle`]; routes output gradients back to
/// the channel they came from.
pub fn pixel_unshuffle<T: Real>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(EmtError::shape(
            "pixel_unshuffle",
            format!("{h}x{w} not divisible by r = {r}"),
        ));
    }
    let (ho, wo) = (h / r, w / r);
    let mut out = Tensor::zeros([n, c * r * r, ho, wo]);
    for ni in 0..n {
        for ic in 0..c {
            let src = input.plane(ni, ic);
            for i in 0..r {
                for j in 0..r {
                    let oc = ic * r * r + i * r + j;
                    for y in 0..ho {
                        for x in 0..wo {
                            out.set(ni, oc, y, x, src[(y * r + i) * w + x * r + j]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_channels_to_grid() {
        let x = Tensor::<f32>::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn scale_one_is_identity() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 5], |[n, c, y, x]| (n * 1000 + c * 100 + y * 10 + x) as f32);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn rejects_indivisible_channels() {
        let x = Tensor::<f32>::zeros([1, 6, 2, 2]);
        assert!(pixel_shuffle(&x, 2).is_err());
    }

    #[test]
    fn backward_routes_each_index_home() {
        // tag every element with its own flat index
        let x = Tensor::<f64>::from_fn([2, 18, 3, 2], |[n, c, y, x]| (((n * 18 + c) * 3 + y) * 2 + x) as f64);
        for r in [1, 3] {
            let s = pixel_shuffle(&x, r).unwrap();
            let back = pixel_unshuffle(&s, r).unwrap();
            assert_eq!(back, x);
        }
    }

    proptest! {
        #[test]
        fn is_a_permutation(values in proptest::collection::vec(-10.0f32..10.0, 36), r in 1usize..=3) {
            let c = r * r;
            let len = 36 / c * c;
            let x = Tensor::from_vec([1, c, 1, len / c], values[..len].to_vec()).unwrap();
            let y = pixel_shuffle(&x, r).unwrap();
            let mut a = x.data().to_vec();
            let mut b = y.data().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
