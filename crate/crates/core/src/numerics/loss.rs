use super::tensor::{ensure_same_shape, Real, Tensor};
use crate::error::Result;

/// Mean absolute error and its subgradient, `sign(pred - target) / numel`
/// with `sign(0) = 0`.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    ensure_same_shape("l1_loss", pred, target)?;
    let numel = pred.numel() as f64;
    let mut sum = 0.0f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.to_f64() - t.to_f64();
            sum += d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            T::from_f64(s / numel)
        })
        .collect();
    Ok((sum / numel, Tensor::from_vec(pred.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_inputs() {
        let a = Tensor::<f32>::filled([1, 3, 2, 2], 0.3);
        let (l, g) = l1_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_element() {
        let p = Tensor::<f32>::filled([1, 1, 1, 1], 0.5);
        let t = Tensor::<f32>::filled([1, 1, 1, 1], 0.25);
        let (l, g) = l1_loss(&p, &t).unwrap();
        assert_eq!(l, 0.25);
        assert_eq!(g.data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch() {
        let p = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let t = Tensor::<f32>::zeros([1, 1, 2, 3]);
        assert!(l1_loss(&p, &t).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-3;
        for seed in 0..20u64 {
            let p = Tensor::<f64>::from_fn([1, 2, 3, 3], |[_, c, y, x]| {
                (((seed * 31 + c as u64 * 17 + y as u64 * 5 + x as u64) as f64) * 0.754_877_666).fract()
            });
            // targets at least 0.05 away from pred so the stencil never crosses a tie
            let t = p.map(|v| if ((v * 1e4) as u64).is_multiple_of(2) { v + 0.05 + v * 0.1 } else { v - 0.05 - v * 0.1 });
            let (_, g) = l1_loss(&p, &t).unwrap();
            for i in 0..p.numel() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.data_mut()[i] += h;
                pm.data_mut()[i] -= h;
                let fd = (l1_loss(&pp, &t).unwrap().0 - l1_loss(&pm, &t).unwrap().0) / (2.0 * h);
                let a = g.data()[i];
                assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()));
            }
        }
    }
}
