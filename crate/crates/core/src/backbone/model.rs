use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchId, ArchSpec, ConvSpec, Node, IMAGE_CHANNELS};
use crate::error::{EmtError, Result};
use crate::numerics::{
    bicubic_resize, conv2d_backward, conv2d_forward, l1_loss, pixel_shuffle, pixel_unshuffle, Real,
    ScaleFactor, Tensor,
};

/// Where a parameter vector came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Random,
    Pretrained,
    Meta,
    Adapted { chunk: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchSpec,
    pub theta: Vec<f32>,
    pub provenance: Provenance,
}

/// He-uniform weights (bound sqrt(6 / fan_in)) and zero biases, drawn in
/// flat-layout order from a ChaCha8 stream seeded with `seed`.
pub fn build_model(arch_id: ArchId, scale: usize, seed: u64) -> Result<ModelParams> {
    let arch = ArchSpec::new(arch_id, scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(arch.param_count());
    for conv in &arch.convs {
        let bound = (6.0 / conv.fan_in() as f64).sqrt();
        theta.extend((0..conv.weight_len()).map(|_| rng.gen_range(-bound..bound) as f32));
        theta.extend(std::iter::repeat_n(0.0f32, conv.cout));
    }
    Ok(ModelParams {
        arch,
        theta,
        provenance: Provenance::Random,
    })
}

impl ModelParams {
    pub fn new(arch: ArchSpec, theta: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if theta.len() != arch.param_count() {
            return Err(EmtError::shape(
                "model",
                format!(
                    "{} x{} has P = {} parameters, got {}",
                    arch.arch_id,
                    arch.scale,
                    arch.param_count(),
                    theta.len()
                ),
            ));
        }
        Ok(ModelParams {
            arch,
            theta,
            provenance,
        })
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn scale(&self) -> usize {
        self.arch.scale
    }

    pub fn with_theta(&self, theta: Vec<f32>, provenance: Provenance) -> Result<Self> {
        ModelParams::new(self.arch.clone(), theta, provenance)
    }

    pub fn forward(&self, lr_image: &Tensor) -> Result<Tensor> {
        forward_with(&self.arch, &self.theta, lr_image)
    }

    pub fn backward(&self, lr_image: &Tensor, grad_sr: &Tensor) -> Result<Vec<f32>> {
        backward_with(&self.arch, &self.theta, lr_image, grad_sr)
    }

    /// Mean L1 loss of `forward(lr)` against `hr` and its gradient in theta.
    pub fn l1_loss_grad(&self, lr: &Tensor, hr: &Tensor) -> Result<(f64, Vec<f32>)> {
        let (sr, tape) = run_forward(&self.arch, &self.theta, lr)?;
        let (loss, grad_sr) = l1_loss(&sr, hr)?;
        let grad = run_backward(&self.arch, &self.theta, &tape, &grad_sr)?;
        Ok((loss, grad))
    }
}

fn conv_tensors<T: Real>(conv: &ConvSpec, theta: &[T]) -> Result<(Tensor<T>, Vec<T>)> {
    let w = theta[conv.offset..conv.offset + conv.weight_len()].to_vec();
    let b = theta[conv.offset + conv.weight_len()..conv.offset + conv.param_len()].to_vec();
    Ok((Tensor::from_vec([conv.cout, conv.cin, conv.kernel, conv.kernel], w)?, b))
}

/// Inputs of every graph node from a forward pass, plus the output. Kept
/// for the backward pass; also lets callers resume the forward pass from
/// any node.
#[derive(Clone, Debug)]
pub struct Trace<T: Real> {
    /// `inputs[i]` is the input of `arch.nodes[start + i]`.
    pub inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
    pub start: usize,
}

impl<T: Real> Trace<T> {
    /// Input of graph node `node`.
    pub fn input(&self, node: usize) -> &Tensor<T> {
        &self.inputs[node - self.start]
    }
}

fn check_theta<T: Real>(arch: &ArchSpec, theta: &[T]) -> Result<()> {
    if theta.len() != arch.param_count() {
        return Err(EmtError::shape(
            "forward",
            format!("theta has {} values, model needs {}", theta.len(), arch.param_count()),
        ));
    }
    Ok(())
}

fn run_forward<T: Real>(arch: &ArchSpec, theta: &[T], input: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
    check_theta(arch, theta)?;
    if input.c() != IMAGE_CHANNELS {
        return Err(EmtError::shape(
            "forward",
            format!("input has {} channels, {} expects {IMAGE_CHANNELS}", input.c(), arch.arch_id),
        ));
    }
    let trace = run_nodes(arch, theta, 0, input.clone(), None)?;
    Ok((trace.output.clone(), trace))
}

fn run_nodes<T: Real>(
    arch: &ArchSpec,
    theta: &[T],
    start: usize,
    input: Tensor<T>,
    mut skip: Option<Tensor<T>>,
) -> Result<Trace<T>> {
    let mut inputs = Vec::with_capacity(arch.nodes.len() - start);
    let mut cur = input;
    for node in &arch.nodes[start..] {
        let next = match *node {
            Node::Conv(i) => {
                let conv = &arch.convs[i];
                let (w, b) = conv_tensors(conv, theta)?;
                conv2d_forward(&cur, &w, &b, conv.padding())?
            }
            Node::Act(a) => a.forward(&cur),
            Node::PixelShuffle(r) => pixel_shuffle(&cur, r)?,
            Node::Upsample(r) => bicubic_resize(&cur, ScaleFactor::up(r as u32))?,
            Node::SaveSkip => {
                skip = Some(cur.clone());
                cur.clone()
            }
            Node::AddSkip => {
                let s = skip.take().ok_or_else(|| EmtError::invalid("residual add without skip"))?;
                let mut out = cur.clone();
                for (o, v) in out.data_mut().iter_mut().zip(s.data()) {
                    *o = T::from_f64(o.to_f64() + v.to_f64());
                }
                out
            }
        };
        inputs.push(std::mem::replace(&mut cur, next));
    }
    Ok(Trace {
        inputs,
        output: cur,
        start,
    })
}

fn run_backward<T: Real>(arch: &ArchSpec, theta: &[T], tape: &Trace<T>, grad_out: &Tensor<T>) -> Result<Vec<T>> {
    if grad_out.shape() != tape.output.shape() {
        return Err(EmtError::shape(
            "backward",
            format!(
                "grad_sr is {:?} but forward output is {:?}",
                grad_out.shape(),
                tape.output.shape()
            ),
        ));
    }
    // a conv needs its input gradient only if some parameter sits upstream
    let first_conv = arch
        .nodes
        .iter()
        .position(|n| matches!(n, Node::Conv(_)))
        .unwrap_or(arch.nodes.len());

    let mut grad_theta = vec![T::default(); theta.len()];
    let mut g = grad_out.clone();
    let mut skip_grad: Option<Tensor<T>> = None;
    for (idx, node) in arch.nodes.iter().enumerate().rev() {
        let x = &tape.inputs[idx];
        g = match *node {
            Node::Conv(i) => {
                let conv = &arch.convs[i];
                let (w, _) = conv_tensors(conv, theta)?;
                let grads = conv2d_backward(x, &w, conv.padding(), &g, idx > first_conv)?;
                let wl = conv.weight_len();
                grad_theta[conv.offset..conv.offset + wl].copy_from_slice(&grads.weights);
                grad_theta[conv.offset + wl..conv.offset + conv.param_len()].copy_from_slice(&grads.bias);
                match grads.input {
                    Some(gi) => gi,
                    None => break,
                }
            }
            Node::Act(a) => a.backward(x, &g)?,
            Node::PixelShuffle(r) => pixel_unshuffle(&g, r)?,
            // parameter-free and first in the graph; nothing upstream needs it
            Node::Upsample(_) => break,
            Node::AddSkip => {
                skip_grad = Some(g.clone());
                g
            }
            Node::SaveSkip => {
                let s = skip_grad
                    .take()
                    .ok_or_else(|| EmtError::invalid("residual skip without add"))?;
                let mut out = g;
                for (o, v) in out.data_mut().iter_mut().zip(s.data()) {
                    *o = T::from_f64(o.to_f64() + v.to_f64());
                }
                out
            }
        };
    }
    Ok(grad_theta)
}

/// Forward pass over an explicit parameter slice. Generic so the same graph
/// can be evaluated in `f64` for gradient checking.
pub fn forward_with<T: Real>(arch: &ArchSpec, theta: &[T], lr_image: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(run_forward(arch, theta, lr_image)?.0)
}

/// Full forward pass keeping every node input.
pub fn forward_trace_with<T: Real>(arch: &ArchSpec, theta: &[T], lr_image: &Tensor<T>) -> Result<Trace<T>> {
    Ok(run_forward(arch, theta, lr_image)?.1)
}

/// Re-run the graph from node `start` with `input` replacing that node's
/// input, reusing `base` for any residual skip saved before `start`.
pub fn resume_forward_with<T: Real>(
    arch: &ArchSpec,
    theta: &[T],
    base: &Trace<T>,
    start: usize,
    input: Tensor<T>,
) -> Result<Trace<T>> {
    check_theta(arch, theta)?;
    if start >= arch.nodes.len() || base.start != 0 {
        return Err(EmtError::invalid(format!("cannot resume at node {start}")));
    }
    let save = arch.nodes[..start].iter().rposition(|n| *n == Node::SaveSkip);
    let add = arch.nodes[..start].iter().rposition(|n| *n == Node::AddSkip);
    let skip = match (save, add) {
        (Some(s), a) if a.is_none_or(|a| a < s) => Some(base.input(s).clone()),
        _ => None,
    };
    run_nodes(arch, theta, start, input, skip)
}

/// Gradient of `<grad_sr, forward(theta, lr_image)>` with respect to theta,
/// in the flat layout of theta.
pub fn backward_with<T: Real>(
    arch: &ArchSpec,
    theta: &[T],
    lr_image: &Tensor<T>,
    grad_sr: &Tensor<T>,
) -> Result<Vec<T>> {
    let (_, tape) = run_forward(arch, theta, lr_image)?;
    run_backward(arch, theta, &tape, grad_sr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;

    fn image(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_model(ArchId::Espcn, 2, 42).unwrap();
        let b = build_model(ArchId::Espcn, 2, 42).unwrap();
        assert_eq!(a.theta, b.theta);
        let c = build_model(ArchId::Espcn, 2, 43).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn output_shapes() {
        let x = image([1, 3, 10, 12], 0);
        let m = build_model(ArchId::Espcn, 2, 1).unwrap();
        assert_eq!(m.forward(&x).unwrap().shape(), [1, 3, 20, 24]);
        for arch in ArchId::ALL {
            for r in 2..=4 {
                let m = build_model(arch, r, 1).unwrap();
                let x = image([2, 3, 5, 4], 2);
                assert_eq!(m.forward(&x).unwrap().shape(), [2, 3, 5 * r, 4 * r], "{arch} x{r}");
            }
        }
    }

    #[test]
    fn channel_mismatch() {
        let m = build_model(ArchId::Srcnn, 2, 1).unwrap();
        let err = m.forward(&Tensor::zeros([1, 1, 4, 4])).unwrap_err();
        assert!(err.to_string().contains("channels"));
        let x = image([1, 3, 4, 4], 0);
        assert!(m.backward(&x, &Tensor::zeros([1, 3, 4, 4])).is_err());
    }

    #[test]
    fn edsr_zero_branch_is_skip_path() {
        let mut m = build_model(ArchId::Edsr1, 3, 5).unwrap();
        let x = image([1, 3, 6, 7], 3);
        for i in [1, 2] {
            let c = m.arch.convs[i];
            m.theta[c.offset..c.offset + c.param_len()].fill(0.0);
        }
        // head conv -> tail conv -> shuffle, with nothing in between
        let head = m.arch.convs[0];
        let tail = m.arch.convs[3];
        let (hw, hb) = conv_tensors(&head, &m.theta).unwrap();
        let (tw, tb) = conv_tensors(&tail, &m.theta).unwrap();
        let feat = conv2d_forward(&x, &hw, &hb, 1).unwrap();
        let want = pixel_shuffle(&conv2d_forward(&feat, &tw, &tb, 1).unwrap(), 3).unwrap();
        assert_eq!(m.forward(&x).unwrap(), want);
    }

    #[test]
    fn espcn_matches_layer_composition() {
        let m = build_model(ArchId::Espcn, 2, 9).unwrap();
        let x = image([2, 3, 6, 5], 4);
        let c = &m.arch.convs;
        let (w0, b0) = conv_tensors(&c[0], &m.theta).unwrap();
        let (w1, b1) = conv_tensors(&c[1], &m.theta).unwrap();
        let (w2, b2) = conv_tensors(&c[2], &m.theta).unwrap();
        let y = Activation::Tanh.forward(&conv2d_forward(&x, &w0, &b0, 2).unwrap());
        let y = Activation::Tanh.forward(&conv2d_forward(&y, &w1, &b1, 1).unwrap());
        let y = pixel_shuffle(&conv2d_forward(&y, &w2, &b2, 1).unwrap(), 2).unwrap();
        assert_eq!(m.forward(&x).unwrap(), y);
    }

    #[test]
    fn srcnn_matches_layer_composition() {
        let m = build_model(ArchId::Srcnn, 3, 2).unwrap();
        let x = image([1, 3, 4, 5], 6);
        let c = &m.arch.convs;
        let up = bicubic_resize(&x, ScaleFactor::up(3)).unwrap();
        let (w0, b0) = conv_tensors(&c[0], &m.theta).unwrap();
        let (w1, b1) = conv_tensors(&c[1], &m.theta).unwrap();
        let (w2, b2) = conv_tensors(&c[2], &m.theta).unwrap();
        let y = Activation::Relu.forward(&conv2d_forward(&up, &w0, &b0, 4).unwrap());
        let y = Activation::Relu.forward(&conv2d_forward(&y, &w1, &b1, 2).unwrap());
        let y = conv2d_forward(&y, &w2, &b2, 2).unwrap();
        assert_eq!(m.forward(&x).unwrap(), y);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        for arch in ArchId::ALL {
            let m = build_model(arch, 2, 3).unwrap();
            let x = image([1, 3, 6, 6], 1);
            let g = m.backward(&x, &Tensor::zeros([1, 3, 12, 12])).unwrap();
            assert_eq!(g.len(), m.param_count());
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let m = build_model(ArchId::Edsr1, 2, 3).unwrap();
        let x = image([2, 3, 8, 8], 1);
        let gs = image([2, 3, 16, 16], 2);
        assert_eq!(m.backward(&x, &gs).unwrap(), m.backward(&x, &gs).unwrap());
    }

    #[test]
    fn theta_length_checked() {
        let arch = ArchSpec::new(ArchId::Espcn, 2).unwrap();
        assert!(ModelParams::new(arch.clone(), vec![0.0; 10], Provenance::Random).is_err());
        assert!(ModelParams::new(arch, vec![0.0; 26_796], Provenance::Random).is_ok());
    }
}
