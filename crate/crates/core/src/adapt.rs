//! Per-chunk partial adaptation: probe which parameters move, keep the top
//! p% as a mask, fine-tune only those, and chain chunk after chunk.

use std::fmt::Write as _;
use std::time::Instant;

use crate::backbone::{ModelParams, Provenance};
use crate::codec::{encode_delta, SparseDelta};
use crate::dataset::FrameStore;
use crate::error::{EmtError, Result, ResultExt};
use crate::numerics::{adam_step, AdamState};
use crate::sampler::{PairSampler, PatchPair};
use crate::train::{mean_pair_psnr, stream_rng, Batch, EpochCursor};

/// Sorted coordinates of the parameters a chunk may change.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMask {
    pub indices: Vec<usize>,
    pub param_count: usize,
    /// Percentage of P.
    pub fraction: f64,
}

impl GradientMask {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn full(param_count: usize) -> Self {
        GradientMask {
            indices: (0..param_count).collect(),
            param_count,
            fraction: 100.0,
        }
    }
}

/// max(1, round(p/100 * P)).
pub fn mask_size(p: f64, param_count: usize) -> usize {
    ((p / 100.0 * param_count as f64).round() as usize).clamp(1, param_count.max(1))
}

/// The `mask_size(p, len)` largest magnitudes; equal magnitudes are taken in
/// ascending index order.
pub fn top_fraction_mask(magnitudes: &[f64], p: f64) -> Result<GradientMask> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(EmtError::invalid(format!("mask fraction must be in (0, 100], got {p}")));
    }
    if magnitudes.is_empty() {
        return Err(EmtError::invalid("cannot mask an empty parameter vector"));
    }
    if let Some(i) = magnitudes.iter().position(|m| !m.is_finite()) {
        return Err(EmtError::Diverged {
            context: format!("probe change at coordinate {i} is not finite"),
        });
    }
    let k = mask_size(p, magnitudes.len());
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    if k < order.len() {
        let cmp = |a: &usize, b: &usize| magnitudes[*b].total_cmp(&magnitudes[*a]).then(a.cmp(b));
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable();
    Ok(GradientMask {
        indices: order,
        param_count: magnitudes.len(),
        fraction: p,
    })
}

/// Named fine-tuning budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    S,
    M,
    L,
}

impl std::str::FromStr for Preset {
    type Err = EmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(Preset::S),
            "M" => Ok(Preset::M),
            "L" => Ok(Preset::L),
            _ => Err(EmtError::invalid(format!("unknown preset '{s}' (expected S, M or L)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    /// Mask percentage for the first chunk of a chain.
    pub p1: f64,
    /// Mask percentage for every later chunk.
    pub p2: f64,
    pub probe_steps: usize,
    pub epochs: f64,
    /// Fixed per-chunk step count; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig::preset(Preset::S)
    }
}

impl AdaptConfig {
    pub fn preset(preset: Preset) -> Self {
        let (epochs, p1) = match preset {
            Preset::S => (0.1, 20.0),
            Preset::M => (3.0, 20.0),
            Preset::L => (3.0, 100.0),
        };
        AdaptConfig {
            p1,
            p2: 1.0,
            probe_steps: 10,
            epochs,
            steps: None,
            lr: 1e-4,
            batch_size: 16,
            patch_size: 144,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(p > 0.0 && p <= 100.0) {
                return Err(EmtError::invalid(format!("{name} must be in (0, 100], got {p}")));
            }
        }
        if self.probe_steps == 0 {
            return Err(EmtError::invalid("probe steps must be at least 1"));
        }
        if !(self.epochs > 0.0) {
            return Err(EmtError::invalid(format!("epochs must be positive, got {}", self.epochs)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(EmtError::invalid("learning rate and batch size must be positive"));
        }
        Ok(())
    }

    /// Fine-tuning steps for a chunk with `pairs` training pairs.
    pub fn steps_for(&self, pairs: usize) -> usize {
        self.steps
            .unwrap_or_else(|| epochs_to_steps(self.epochs, pairs, self.batch_size))
    }
}

/// max(1, round(epochs * ceil(pairs / batch))).
pub fn epochs_to_steps(epochs: f64, pairs_per_epoch: usize, batch_size: usize) -> usize {
    let per_epoch = pairs_per_epoch.div_ceil(batch_size.max(1));
    ((epochs * per_epoch as f64).round() as usize).max(1)
}

fn probe_stream(chunk_id: u32) -> u64 {
    (chunk_id as u64) << 1
}

fn finetune_stream(chunk_id: u32) -> u64 {
    ((chunk_id as u64) << 1) | 1
}

/// Adam on `pairs`; gradient coordinates outside `mask` are zeroed before
/// every step. Returns the parameters and the number of steps taken.
fn adam_train(
    reference: &ModelParams,
    mask: Option<&GradientMask>,
    pairs: &[PatchPair],
    steps: usize,
    config: &AdaptConfig,
    stream: u64,
) -> Result<Vec<f32>> {
    let mut theta = reference.theta.clone();
    if steps == 0 {
        return Ok(theta);
    }
    let keep: Option<Vec<bool>> = mask.map(|m| {
        let mut keep = vec![false; theta.len()];
        for &i in &m.indices {
            keep[i] = true;
        }
        keep
    });
    let mut cursor = EpochCursor::new(pairs.len(), config.batch_size, stream_rng(config.seed, stream))?;
    let mut adam = AdamState::new(theta.len(), config.lr);
    let mut model = reference.clone();
    for step in 0..steps {
        let batch = Batch::from_pairs(cursor.next_batch().into_iter().map(|i| &pairs[i]).collect::<Vec<_>>())?;
        model.theta = theta;
        let (loss, mut grad) = model.l1_loss_grad(&batch.lr, &batch.hr)?;
        if !loss.is_finite() {
            return Err(EmtError::Diverged {
                context: format!("fine-tuning step {step}"),
            });
        }
        if let Some(keep) = &keep {
            for (g, k) in grad.iter_mut().zip(keep) {
                if !k {
                    *g = 0.0;
                }
            }
        }
        theta = std::mem::take(&mut model.theta);
        adam_step(&mut theta, &grad, &mut adam)?;
    }
    Ok(theta)
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub mask: GradientMask,
    /// The temporarily fine-tuned copy the mask was read from.
    pub probed: ModelParams,
}

/// `probe_steps` full-parameter Adam steps on a copy, then the top-`p`%
/// coordinates by |probed - reference|.
pub fn probe_and_mask(
    reference: &ModelParams,
    pairs: &[PatchPair],
    p: f64,
    config: &AdaptConfig,
    chunk_id: u32,
) -> Result<ProbeOutcome> {
    if pairs.is_empty() {
        return Err(EmtError::invalid(format!("chunk {chunk_id} has no training pairs")));
    }
    if config.probe_steps == 0 {
        return Err(EmtError::invalid("probe steps must be at least 1"));
    }
    let theta = adam_train(reference, None, pairs, config.probe_steps, config, probe_stream(chunk_id))?;
    let magnitudes: Vec<f64> = theta
        .iter()
        .zip(&reference.theta)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .collect();
    Ok(ProbeOutcome {
        mask: top_fraction_mask(&magnitudes, p)?,
        probed: reference.with_theta(theta, reference.provenance)?,
    })
}

#[derive(Clone, Debug)]
pub struct Finetuned {
    pub model: ModelParams,
    pub delta: SparseDelta,
    pub steps: usize,
}

/// Fine-tune only the masked coordinates and encode the result as a delta
/// against `reference`.
pub fn masked_finetune(
    reference: &ModelParams,
    mask: &GradientMask,
    pairs: &[PatchPair],
    config: &AdaptConfig,
    chunk_id: u32,
) -> Result<Finetuned> {
    if mask.param_count != reference.param_count() {
        return Err(EmtError::invalid(format!(
            "mask was built for P = {}, model has P = {}",
            mask.param_count,
            reference.param_count()
        )));
    }
    if pairs.is_empty() {
        return Err(EmtError::invalid(format!("chunk {chunk_id} has no training pairs")));
    }
    let steps = config.steps_for(pairs.len());
    let theta = adam_train(reference, Some(mask), pairs, steps, config, finetune_stream(chunk_id))?;
    let model = reference.with_theta(theta, Provenance::Adapted { chunk: chunk_id })?;
    let delta = encode_delta(reference, &model, &mask.indices, chunk_id)?;
    Ok(Finetuned { model, delta, steps })
}

/// Whole-model fine-tuning with the same batches and step count as
/// [`masked_finetune`].
pub fn full_finetune(reference: &ModelParams, pairs: &[PatchPair], config: &AdaptConfig, chunk_id: u32) -> Result<ModelParams> {
    let steps = config.steps_for(pairs.len());
    let theta = adam_train(reference, None, pairs, steps, config, finetune_stream(chunk_id))?;
    reference.with_theta(theta, Provenance::Adapted { chunk: chunk_id })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkReport {
    pub chunk_id: u32,
    pub mask_size: usize,
    pub steps: usize,
    pub final_train_psnr_db: f64,
    /// Train PSNR of the model the chunk started from.
    pub reference_train_psnr_db: f64,
    pub pairs: usize,
    pub candidates: usize,
    pub forwards: usize,
    pub delta_entries: usize,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug)]
pub struct EmtOutcome {
    pub deltas: Vec<SparseDelta>,
    pub masks: Vec<GradientMask>,
    /// f^j for every chunk, in order.
    pub models: Vec<ModelParams>,
    pub reports: Vec<ChunkReport>,
}

impl EmtOutcome {
    pub fn private_params(&self) -> usize {
        self.masks.iter().map(GradientMask::len).sum()
    }

    /// Chunks whose adapted model fits its training pairs worse than the
    /// model it started from.
    pub fn self_fit_violations(&self) -> Vec<u32> {
        self.reports
            .iter()
            .filter(|r| r.final_train_psnr_db < r.reference_train_psnr_db)
            .map(|r| r.chunk_id)
            .collect()
    }
}

/// Adapt `chunks` in order: the first from `meta` with `p1`, each later one
/// from its predecessor with `p2`.
pub fn emt_run(
    meta: &ModelParams,
    store: &FrameStore,
    chunks: &[usize],
    config: &AdaptConfig,
    sampler: &dyn PairSampler,
) -> Result<EmtOutcome> {
    config.validate()?;
    if chunks.is_empty() {
        return Err(EmtError::invalid("no chunks to adapt"));
    }
    let mut out = EmtOutcome {
        deltas: Vec::with_capacity(chunks.len()),
        masks: Vec::with_capacity(chunks.len()),
        models: Vec::with_capacity(chunks.len()),
        reports: Vec::with_capacity(chunks.len()),
    };
    let mut reference = meta.clone();
    for (pos, &chunk) in chunks.iter().enumerate() {
        let started = Instant::now();
        let chunk_id = u32::try_from(chunk).map_err(|_| EmtError::invalid("chunk index exceeds u32"))?;
        let p = if pos == 0 { config.p1 } else { config.p2 };
        let step = || -> Result<(Finetuned, GradientMask, ChunkReport)> {
            let sampled = sampler.sample(&reference, store, chunk)?;
            let probe = probe_and_mask(&reference, &sampled.pairs, p, config, chunk_id)?;
            let tuned = masked_finetune(&reference, &probe.mask, &sampled.pairs, config, chunk_id)?;
            let report = ChunkReport {
                chunk_id,
                mask_size: probe.mask.len(),
                steps: tuned.steps,
                final_train_psnr_db: mean_pair_psnr(&tuned.model, &sampled.pairs)?,
                reference_train_psnr_db: mean_pair_psnr(&reference, &sampled.pairs)?,
                pairs: sampled.pairs.len(),
                candidates: sampled.candidates,
                forwards: sampled.forwards,
                delta_entries: tuned.delta.len(),
                elapsed_ms: started.elapsed().as_millis() as u64,
            };
            Ok((tuned, probe.mask, report))
        };
        let (tuned, mask, report) = step().context(|| format!("chunk {chunk}"))?;
        reference = tuned.model.clone();
        out.deltas.push(tuned.delta);
        out.masks.push(mask);
        out.models.push(tuned.model);
        out.reports.push(report);
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "chunk_id,mask_size,steps,final_train_psnr_db,elapsed_ms";

/// Delimited per-chunk report; `timings = false` writes 0 for elapsed time
/// so reruns compare byte for byte.
pub fn report_csv(reports: &[ChunkReport], timings: bool) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{}",
            r.chunk_id,
            r.mask_size,
            r.steps,
            r.final_train_psnr_db,
            if timings { r.elapsed_ms } else { 0 }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_rule() {
        assert_eq!(epochs_to_steps(1.0, 160, 16), 10);
        assert_eq!(epochs_to_steps(0.1, 160, 16), 1);
        assert_eq!(epochs_to_steps(3.0, 160, 16), 30);
        assert_eq!(epochs_to_steps(0.1, 90, 16), 1);
        assert_eq!(epochs_to_steps(3.0, 90, 16), 18);
    }

    #[test]
    fn small_masks() {
        let d = [0.9, 0.1, 0.05, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(top_fraction_mask(&d, 20.0).unwrap().indices, vec![0, 3]);
        assert_eq!(top_fraction_mask(&d, 100.0).unwrap().indices, (0..10).collect::<Vec<_>>());
        // ties at zero resolve to the lowest indices
        assert_eq!(top_fraction_mask(&d, 60.0).unwrap().indices, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(top_fraction_mask(&d, 0.01).unwrap().len(), 1);
        assert!(top_fraction_mask(&d, 0.0).is_err());
        assert!(top_fraction_mask(&[f64::NAN], 50.0).is_err());
    }

    #[test]
    fn mask_sizes_for_espcn_x2() {
        assert_eq!(mask_size(20.0, 26_796), 5_359);
        assert_eq!(mask_size(1.0, 26_796), 268);
    }

    #[test]
    fn presets() {
        let s = AdaptConfig::preset(Preset::S);
        assert_eq!((s.epochs, s.p1, s.p2), (0.1, 20.0, 1.0));
        let m = AdaptConfig::preset(Preset::M);
        assert_eq!((m.epochs, m.p1, m.p2), (3.0, 20.0, 1.0));
        let l = AdaptConfig::preset(Preset::L);
        assert!(l.epochs >= m.epochs);
        assert_eq!((l.p1, l.p2), (100.0, 1.0));
        assert_eq!("m".parse::<Preset>().unwrap(), Preset::M);
    }

    #[test]
    fn report_format() {
        let r = ChunkReport {
            chunk_id: 3,
            mask_size: 268,
            steps: 2,
            final_train_psnr_db: 31.123456,
            reference_train_psnr_db: 31.0,
            pairs: 90,
            candidates: 480,
            forwards: 3,
            delta_entries: 268,
            elapsed_ms: 1234,
        };
        assert_eq!(report_csv(std::slice::from_ref(&r), true), format!("{REPORT_HEADER}\n3,268,2,31.1235,1234\n"));
        assert!(report_csv(&[r], false).ends_with(",0\n"));
    }
}
