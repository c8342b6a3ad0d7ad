use super::tensor::Real;
use crate::error::{EmtError, Result};

/// Adam moments and hyper-parameters for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step, in place. A coordinate whose gradient and
/// moments are all zero is left bit-identical.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len() {
        return Err(EmtError::shape(
            "adam_step",
            format!(
                "params {}, grads {}, moments {}/{}",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.to_f64();
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let step = state.lr * (*m / bc1) / ((*v / bc2).sqrt() + state.eps);
        if step != 0.0 {
            *p = T::from_f64(p.to_f64() - step);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.1f32, -2.0, 3.5];
        let before = p.clone();
        let mut s = AdamState::new(3, 1e-3);
        adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![1.0f64, 1.0, 1.0];
        let mut s = AdamState::new(3, 0.01);
        s.eps = 0.0;
        adam_step(&mut p, &[3.0, -0.25, 1e-4], &mut s).unwrap();
        for (v, want) in p.iter().zip([0.99, 1.01, 0.99]) {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch() {
        let mut p = vec![0.0f32; 3];
        let mut s = AdamState::new(3, 1e-3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s).is_err());
        let mut s = AdamState::new(2, 1e-3);
        assert!(adam_step(&mut p, &[0.0; 3], &mut s).is_err());
    }

    /// Textbook Adam on f(x, y) = (x - 3)^2 + 10 (y + 1)^2, written out longhand.
    fn reference_trace(steps: usize) -> Vec<[f64; 2]> {
        let (lr, b1, b2, eps) = (0.02, 0.9, 0.999, 1e-8);
        let (mut x, mut y) = (2.5, -0.5);
        let (mut mx, mut my, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let gx = 2.0 * (x - 3.0);
            let gy = 20.0 * (y + 1.0);
            mx = b1 * mx + (1.0 - b1) * gx;
            my = b1 * my + (1.0 - b1) * gy;
            vx = b2 * vx + (1.0 - b2) * gx * gx;
            vy = b2 * vy + (1.0 - b2) * gy * gy;
            let c1 = 1.0 - f64::powi(b1, t as i32);
            let c2 = 1.0 - f64::powi(b2, t as i32);
            x -= lr * (mx / c1) / ((vx / c2).sqrt() + eps);
            y -= lr * (my / c1) / ((vy / c2).sqrt() + eps);
            out.push([x, y]);
        }
        out
    }

    #[test]
    fn quadratic_trace_matches_reference() {
        let want = reference_trace(100);
        let mut p = vec![2.5f64, -0.5];
        let mut s = AdamState::new(2, 0.02);
        for step in &want {
            let g = [2.0 * (p[0] - 3.0), 20.0 * (p[1] + 1.0)];
            adam_step(&mut p, &g, &mut s).unwrap();
            assert!((p[0] - step[0]).abs() < 1e-7 && (p[1] - step[1]).abs() < 1e-7);
        }
        assert!((p[0] - 3.0).abs() < 1e-3 && (p[1] + 1.0).abs() < 1e-3, "{p:?}");
    }
}
