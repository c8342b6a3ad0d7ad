//! Batching and evaluation helpers shared by pretraining, meta-training and
//! per-chunk fine-tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::ModelParams;
use crate::error::{EmtError, Result};
use crate::numerics::{psnr, Tensor};
use crate::sampler::PatchPair;

/// Stacked LR inputs and HR targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lr: Tensor,
    pub hr: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lr.n()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.n() == 0
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a PatchPair> + Clone) -> Result<Self> {
        Ok(Batch {
            lr: Tensor::stack(pairs.clone().into_iter().map(|p| &p.lr))?,
            hr: Tensor::stack(pairs.into_iter().map(|p| &p.hr))?,
        })
    }
}

/// Independent ChaCha8 stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Walks shuffled epochs over `len` items in batches of `batch_size`; the
/// last batch of an epoch may be short.
#[derive(Debug)]
pub struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl EpochCursor {
    pub fn new(len: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(EmtError::invalid("batching needs at least one item and a positive batch size"));
        }
        let mut cursor = EpochCursor {
            order: (0..len).collect(),
            pos: 0,
            batch_size,
            rng,
        };
        cursor.order.shuffle(&mut cursor.rng);
        Ok(cursor)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos == self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Mean per-pair PSNR (RGB, peak 1) of `model` on `pairs`.
pub fn mean_pair_psnr(model: &ModelParams, pairs: &[PatchPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(EmtError::invalid("no pairs to evaluate"));
    }
    const EVAL_BATCH: usize = 64;
    let mut total = 0.0;
    for group in pairs.chunks(EVAL_BATCH) {
        let batch = Batch::from_pairs(group)?;
        let sr = model.forward(&batch.lr)?;
        for (i, p) in group.iter().enumerate() {
            let one = Tensor::from_vec(p.hr.shape(), sr.item(i).to_vec())?;
            total += psnr(&one, &p.hr, 1.0)?;
        }
    }
    Ok(total / pairs.len() as f64)
}
