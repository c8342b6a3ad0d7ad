use super::tensor::{ensure_same_shape, Real, Tensor};
use crate::error::{EmtError, Result};

/// Reported in place of +inf when two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ensure_same_shape("mse", a, b)?;
    if a.numel() == 0 {
        return Err(EmtError::invalid("mse of empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10 log10(max^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_value: f64) -> Result<f64> {
    if max_value <= 0.0 {
        return Err(EmtError::invalid(format!("psnr max_value {max_value} must be positive")));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB)
}
