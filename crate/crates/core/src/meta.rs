//! Pretraining and first-order MAML over chunk tasks.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ModelParams, Provenance};
use crate::dataset::{FramePair, FrameStore};
use crate::error::{EmtError, Result, ResultExt};
use crate::numerics::{adam_step, AdamState, Tensor};
use crate::train::{stream_rng, Batch};

/// One chunk of the meta-dataset.
#[derive(Clone, Debug)]
pub struct MetaTask {
    pub task_id: usize,
    pub scale: usize,
    pub frames: Vec<FramePair>,
}

impl MetaTask {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// One task per chunk of `store`, each holding up to `frames_per_task`
/// frames spread evenly over the chunk. Task ids start at `first_id`.
pub fn tasks_from_store(store: &FrameStore, frames_per_task: usize, first_id: usize) -> Result<Vec<MetaTask>> {
    if frames_per_task == 0 {
        return Err(EmtError::invalid("frames per task must be at least 1"));
    }
    let m = store.manifest();
    m.chunks
        .iter()
        .enumerate()
        .map(|(c, range)| {
            let n = frames_per_task.min(range.len());
            let frames = (0..n)
                .map(|i| store.pair(range.start + i * range.len() / n))
                .collect::<Result<Vec<_>>>()?;
            Ok(MetaTask {
                task_id: first_id + c,
                scale: m.scale,
                frames,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// alpha
    pub inner_lr: f64,
    /// beta
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// n
    pub tasks_per_iter: usize,
    pub frames_per_task: usize,
    pub patch_size: usize,
    pub batch_size_per_task: usize,
    pub outer_iters: usize,
    /// Adam instead of plain gradient descent for the outer step.
    pub outer_adam: bool,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.5e-5,
            outer_lr: 1e-3,
            inner_steps: 2,
            tasks_per_iter: 15,
            frames_per_task: 50,
            patch_size: 144,
            batch_size_per_task: 16,
            outer_iters: 1000,
            outer_adam: false,
            seed: 0,
        }
    }
}

impl MetaConfig {
    /// Batch across all tasks of one iteration.
    pub fn total_batch(&self) -> usize {
        self.batch_size_per_task * self.tasks_per_iter
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.outer_lr >= 0.0) {
            return Err(EmtError::invalid("learning rates must be non-negative"));
        }
        if self.tasks_per_iter == 0 || self.batch_size_per_task == 0 || self.patch_size == 0 {
            return Err(EmtError::invalid("task count, batch size and patch size must be positive"));
        }
        Ok(())
    }
}

/// `batch_size` random HR patches of `patch_size`^2 with their LR
/// counterparts. Frames are drawn uniformly, then corners uniformly among
/// multiples of the scale.
pub fn sample_task_batch(task: &MetaTask, patch_size: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let s = task.scale;
    if task.frames.is_empty() {
        return Err(EmtError::invalid(format!("task {} has no frames", task.task_id)));
    }
    if !patch_size.is_multiple_of(s) {
        return Err(EmtError::invalid(format!("patch size {patch_size} is not a multiple of scale {s}")));
    }
    for f in &task.frames {
        if f.hr.h() < patch_size || f.hr.w() < patch_size {
            return Err(EmtError::FrameTooSmall {
                frame: f.frame_id,
                height: f.hr.h(),
                width: f.hr.w(),
                patch: patch_size,
            });
        }
    }
    let lp = patch_size / s;
    let mut lr = Vec::with_capacity(batch_size);
    let mut hr = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let f = &task.frames[rng.gen_range(0..task.frames.len())];
        let y = s * rng.gen_range(0..=(f.hr.h() - patch_size) / s);
        let x = s * rng.gen_range(0..=(f.hr.w() - patch_size) / s);
        hr.push(f.hr.crop(y, x, patch_size, patch_size)?);
        lr.push(f.lr.crop(y / s, x / s, lp, lp)?);
    }
    Ok(Batch {
        lr: Tensor::stack(&lr)?,
        hr: Tensor::stack(&hr)?,
    })
}

/// theta - step * g, computed in f64.
fn descend(theta: &[f32], grad: &[f64], step: f64) -> Vec<f32> {
    theta
        .iter()
        .zip(grad)
        .map(|(&t, &g)| (t as f64 - step * g) as f32)
        .collect()
}

/// `steps` plain gradient-descent steps on one batch.
pub fn inner_update(model: &ModelParams, batch: &Batch, alpha: f64, steps: usize) -> Result<ModelParams> {
    let mut theta = model.theta.clone();
    let mut cur = model.clone();
    for step in 0..steps {
        let (loss, grad) = cur.l1_loss_grad(&batch.lr, &batch.hr)?;
        if !loss.is_finite() {
            return Err(EmtError::Diverged {
                context: format!("inner step {step}"),
            });
        }
        let grad: Vec<f64> = grad.iter().map(|&g| g as f64).collect();
        theta = descend(&theta, &grad, alpha);
        cur.theta.clone_from(&theta);
    }
    Ok(cur)
}

fn sum_gradients(param_count: usize, task_gradients: &[Vec<f32>]) -> Result<Vec<f64>> {
    let mut sum = vec![0.0f64; param_count];
    for (i, g) in task_gradients.iter().enumerate() {
        if g.len() != param_count {
            return Err(EmtError::shape(
                "outer_update",
                format!("task gradient {i} has {} values, model has {param_count}", g.len()),
            ));
        }
        for (s, &v) in sum.iter_mut().zip(g) {
            *s += v as f64;
        }
    }
    Ok(sum)
}

/// theta - beta * sum_i g_i, summed in task order.
pub fn outer_update(model: &ModelParams, task_gradients: &[Vec<f32>], beta: f64) -> Result<ModelParams> {
    let sum = sum_gradients(model.param_count(), task_gradients)?;
    model.with_theta(descend(&model.theta, &sum, beta), model.provenance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub elapsed_ms: u64,
}

/// `iter,<loss_name>,elapsed_ms` lines; `timings = false` writes 0.
pub fn log_csv(loss_name: &str, log: &[LogEntry], timings: bool) -> String {
    let mut s = format!("iter,{loss_name},elapsed_ms\n");
    for e in log {
        let _ = writeln!(s, "{},{:.6},{}", e.iter, e.loss, if timings { e.elapsed_ms } else { 0 });
    }
    s
}

fn task_stream(iter: usize, task_id: usize) -> u64 {
    ((iter as u64) << 24) | (task_id as u64 & 0xff_ffff)
}

/// First-order MAML. Each iteration samples `tasks_per_iter` tasks, adapts
/// a copy to each with `inner_steps` gradient steps on one batch, takes the
/// loss gradient at the adapted parameters on that batch, and applies the
/// sum of those gradients to the shared model.
pub fn meta_train(init: &ModelParams, tasks: &[MetaTask], config: &MetaConfig) -> Result<(ModelParams, Vec<LogEntry>)> {
    config.validate()?;
    if tasks.len() < config.tasks_per_iter {
        return Err(EmtError::Dataset(format!(
            "{} tasks available, {} needed per iteration",
            tasks.len(),
            config.tasks_per_iter
        )));
    }
    let started = Instant::now();
    let mut model = init.clone();
    let mut adam = config
        .outer_adam
        .then(|| AdamState::new(init.param_count(), config.outer_lr));
    let mut pick = stream_rng(config.seed, u64::MAX);
    let mut log = Vec::with_capacity(config.outer_iters);
    for iter in 0..config.outer_iters {
        let mut chosen = sample(&mut pick, tasks.len(), config.tasks_per_iter).into_vec();
        chosen.sort_unstable();
        let mut grads = Vec::with_capacity(chosen.len());
        let mut loss_sum = 0.0;
        for &t in &chosen {
            let task = &tasks[t];
            let run = || -> Result<(f64, Vec<f32>)> {
                let mut rng = stream_rng(config.seed, task_stream(iter, t));
                let batch = sample_task_batch(task, config.patch_size, config.batch_size_per_task, &mut rng)?;
                let adapted = inner_update(&model, &batch, config.inner_lr, config.inner_steps)?;
                let (loss, grad) = adapted.l1_loss_grad(&batch.lr, &batch.hr)?;
                if !loss.is_finite() {
                    return Err(EmtError::Diverged {
                        context: "meta-gradient".into(),
                    });
                }
                Ok((loss, grad))
            };
            let (loss, grad) = run().context(|| format!("meta iteration {iter}, task {}", task.task_id))?;
            loss_sum += loss;
            grads.push(grad);
        }
        model = match adam.as_mut() {
            None => outer_update(&model, &grads, config.outer_lr)?,
            Some(state) => {
                let sum: Vec<f32> = sum_gradients(model.param_count(), &grads)?
                    .into_iter()
                    .map(|v| v as f32)
                    .collect();
                let mut theta = model.theta.clone();
                adam_step(&mut theta, &sum, state)?;
                model.with_theta(theta, model.provenance)?
            }
        };
        log.push(LogEntry {
            iter,
            loss: loss_sum / chosen.len() as f64,
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
    }
    if config.outer_iters > 0 {
        model.provenance = Provenance::Meta;
    }
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub iters: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            iters: 1000,
            batch_size: 16,
            patch_size: 144,
            seed: 0,
        }
    }
}

/// Supervised Adam training on a single image-set task.
pub fn pretrain(init: &ModelParams, images: &MetaTask, config: &PretrainConfig) -> Result<(ModelParams, Vec<LogEntry>)> {
    let started = Instant::now();
    let mut theta = init.theta.clone();
    let mut adam = AdamState::new(theta.len(), config.lr);
    let mut rng = stream_rng(config.seed, 0);
    let mut model = init.clone();
    let mut log = Vec::with_capacity(config.iters);
    for iter in 0..config.iters {
        let batch = sample_task_batch(images, config.patch_size, config.batch_size, &mut rng)?;
        model.theta = theta;
        let (loss, grad) = model.l1_loss_grad(&batch.lr, &batch.hr)?;
        if !loss.is_finite() {
            return Err(EmtError::Diverged {
                context: format!("pretraining iteration {iter}"),
            });
        }
        theta = std::mem::take(&mut model.theta);
        adam_step(&mut theta, &grad, &mut adam)?;
        log.push(LogEntry {
            iter,
            loss,
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
    }
    let provenance = if config.iters > 0 { Provenance::Pretrained } else { init.provenance };
    Ok((init.with_theta(theta, provenance)?, log))
}
