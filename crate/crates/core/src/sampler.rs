//! Challenging patch sampling: score a grid of patches on anchor frames with
//! the previous chunk's model, keep the worst r%, and reuse those positions
//! on every frame up to the next anchor.

use std::fmt::Write as _;
use std::ops::Range;

use crate::backbone::ModelParams;
use crate::dataset::FrameStore;
use crate::error::{EmtError, Result};
use crate::numerics::{ensure_same_shape, psnr_from_mse, Tensor, PSNR_CAP_DB};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Percentage of grid cells kept per anchor frame.
    pub r: f64,
    /// HR cell size; also the training patch size.
    pub patch_size: usize,
    pub psnr_cap: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            r: 20.0,
            patch_size: 144,
            psnr_cap: PSNR_CAP_DB,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r <= 100.0) {
            return Err(EmtError::invalid(format!("r must be in (0, 100], got {}", self.r)));
        }
        if self.patch_size == 0 {
            return Err(EmtError::invalid("patch size must be positive"));
        }
        Ok(())
    }
}

/// Per-cell PSNR on the non-overlapping grid anchored at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct PsnrMap {
    pub frame_id: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    /// Row-major, `rows * cols` values in dB.
    pub values: Vec<f64>,
}

impl PsnrMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Comma-separated grid, one line per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("# frame {} cell {}\n", self.frame_id, self.patch_size);
        for row in self.values.chunks(self.cols) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPositions {
    pub iframe_id: usize,
    /// (row, col) grid cells.
    pub cells: Vec<(usize, usize)>,
    pub r: f64,
}

/// Patch coordinates (HR pixels, top-left) for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCoords {
    pub frame_id: usize,
    pub coords: Vec<(usize, usize)>,
}

/// An aligned training patch pair.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub frame_id: usize,
    /// HR top-left corner.
    pub y: usize,
    pub x: usize,
    pub lr: Tensor,
    pub hr: Tensor,
}

/// Super-resolve an anchor frame with the previous chunk's model.
pub fn sr_iframe(prev_model: &ModelParams, iframe_lr: &Tensor) -> Result<Tensor> {
    prev_model.forward(iframe_lr)
}

pub fn psnr_map(sr: &Tensor, hr: &Tensor, patch_size: usize, frame_id: usize) -> Result<PsnrMap> {
    psnr_map_capped(sr, hr, patch_size, frame_id, PSNR_CAP_DB)
}

pub fn psnr_map_capped(sr: &Tensor, hr: &Tensor, patch_size: usize, frame_id: usize, cap: f64) -> Result<PsnrMap> {
    ensure_same_shape("psnr_map", sr, hr)?;
    let [n, c, h, w] = hr.shape();
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(EmtError::FrameTooSmall {
            frame: frame_id,
            height: h,
            width: w,
            patch: patch_size,
        });
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let mut sums = vec![0.0f64; rows * cols];
    for ni in 0..n {
        for ci in 0..c {
            let (a, b) = (sr.plane(ni, ci), hr.plane(ni, ci));
            for y in 0..rows * patch_size {
                let row = &mut sums[(y / patch_size) * cols..(y / patch_size + 1) * cols];
                let (ra, rb) = (&a[y * w..y * w + cols * patch_size], &b[y * w..y * w + cols * patch_size]);
                for (cell, (pa, pb)) in row.iter_mut().zip(ra.chunks(patch_size).zip(rb.chunks(patch_size))) {
                    *cell += pa
                        .iter()
                        .zip(pb)
                        .map(|(&u, &v)| {
                            let d = u as f64 - v as f64;
                            d * d
                        })
                        .sum::<f64>();
                }
            }
        }
    }
    let count = (n * c * patch_size * patch_size) as f64;
    let values = sums
        .into_iter()
        .map(|s| psnr_from_mse(s / count, 1.0).min(cap))
        .collect();
    Ok(PsnrMap {
        frame_id,
        rows,
        cols,
        patch_size,
        values,
    })
}

/// max(1, round(r/100 * cells)), never more than `cells`.
pub fn selection_count(r: f64, cells: usize) -> usize {
    ((r / 100.0 * cells as f64).round() as usize).clamp(1, cells.max(1))
}

/// The lowest-PSNR cells; equal values are taken in (row, col) order.
pub fn select_positions(map: &PsnrMap, r: f64) -> PatchPositions {
    let k = selection_count(r, map.cells());
    let mut order: Vec<usize> = (0..map.cells()).collect();
    let key = |&i: &usize| (map.values[i], i);
    if k < order.len() {
        order.select_nth_unstable_by(k, |a, b| key(a).partial_cmp(&key(b)).expect("finite PSNR"));
        order.truncate(k);
    }
    order.sort_unstable();
    PatchPositions {
        iframe_id: map.frame_id,
        cells: order.into_iter().map(|i| (i / map.cols, i % map.cols)).collect(),
        r,
    }
}

/// Same cell list, in pixel coordinates, on every frame of `frames`.
pub fn propagate_positions(positions: &PatchPositions, frames: Range<usize>, patch_size: usize) -> Vec<FrameCoords> {
    let coords: Vec<(usize, usize)> = positions
        .cells
        .iter()
        .map(|&(r, c)| (r * patch_size, c * patch_size))
        .collect();
    frames
        .map(|frame_id| FrameCoords {
            frame_id,
            coords: coords.clone(),
        })
        .collect()
}

/// Cut aligned LR/HR patches; HR corners must be multiples of the scale.
pub fn extract_pairs(store: &FrameStore, coords: &[FrameCoords], patch_size: usize) -> Result<Vec<PatchPair>> {
    let scale = store.scale();
    if !patch_size.is_multiple_of(scale) {
        return Err(EmtError::invalid(format!(
            "patch size {patch_size} is not a multiple of scale {scale}"
        )));
    }
    let m = store.manifest();
    let mut pairs = Vec::new();
    for fc in coords {
        let (hr, lr) = (store.hr(fc.frame_id)?, store.lr(fc.frame_id)?);
        for &(y, x) in &fc.coords {
            if y % scale != 0 || x % scale != 0 || y + patch_size > m.height || x + patch_size > m.width {
                return Err(EmtError::invalid(format!(
                    "patch at ({y}, {x}) on frame {} is out of bounds or off the x{scale} lattice",
                    fc.frame_id
                )));
            }
            let lp = patch_size / scale;
            pairs.push(PatchPair {
                frame_id: fc.frame_id,
                y,
                x,
                hr: hr.crop(y, x, patch_size, patch_size)?,
                lr: lr.crop(y / scale, x / scale, lp, lp)?,
            });
        }
    }
    Ok(pairs)
}

/// Training pairs for one chunk.
#[derive(Clone, Debug)]
pub struct ChunkPairs {
    pub pairs: Vec<PatchPair>,
    /// Model evaluations spent choosing the pairs.
    pub forwards: usize,
    /// Patch positions available: grid cells times chunk frames.
    pub candidates: usize,
    pub maps: Vec<PsnrMap>,
}

pub trait PairSampler {
    fn name(&self) -> &'static str;

    /// `prev` is the model the chunk adapts from.
    fn sample(&self, prev: &ModelParams, store: &FrameStore, chunk: usize) -> Result<ChunkPairs>;
}

/// Anchor frames of a chunk and the frame range each one covers. Anchors
/// are the chunk's I-frames; a chunk that does not open on an I-frame also
/// gets its first frame as an anchor so every frame is covered.
pub fn chunk_anchors(store: &FrameStore, chunk: usize) -> Vec<(usize, Range<usize>)> {
    let m = store.manifest();
    let range = m.chunks[chunk].clone();
    let mut anchors = m.iframes_in(chunk);
    if anchors.first() != Some(&range.start) {
        anchors.insert(0, range.start);
    }
    anchors
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, k..anchors.get(i + 1).copied().unwrap_or(range.end)))
        .collect()
}

fn grid_cells(store: &FrameStore, patch_size: usize) -> usize {
    let m = store.manifest();
    (m.height / patch_size) * (m.width / patch_size)
}

#[derive(Clone, Debug)]
pub struct CpsSampler {
    pub config: SamplerConfig,
}

impl PairSampler for CpsSampler {
    fn name(&self) -> &'static str {
        "cps"
    }

    fn sample(&self, prev: &ModelParams, store: &FrameStore, chunk: usize) -> Result<ChunkPairs> {
        self.config.validate()?;
        let patch = self.config.patch_size;
        let mut coords = Vec::new();
        let mut maps = Vec::new();
        let mut forwards = 0;
        for (anchor, range) in chunk_anchors(store, chunk) {
            let sr = sr_iframe(prev, &*store.lr(anchor)?)?;
            forwards += 1;
            let map = psnr_map_capped(&sr, &*store.hr(anchor)?, patch, anchor, self.config.psnr_cap)?;
            let positions = select_positions(&map, self.config.r);
            coords.extend(propagate_positions(&positions, range, patch));
            maps.push(map);
        }
        let frames = store.manifest().chunks[chunk].len();
        Ok(ChunkPairs {
            pairs: extract_pairs(store, &coords, patch)?,
            forwards,
            candidates: grid_cells(store, patch) * frames,
            maps,
        })
    }
}

/// Every grid cell of every frame; the no-CPS ablation arm.
#[derive(Clone, Debug)]
pub struct AllPatchSampler {
    pub patch_size: usize,
}

impl PairSampler for AllPatchSampler {
    fn name(&self) -> &'static str {
        "all"
    }

    fn sample(&self, _prev: &ModelParams, store: &FrameStore, chunk: usize) -> Result<ChunkPairs> {
        let m = store.manifest();
        let p = self.patch_size;
        if p == 0 || p > m.height.min(m.width) {
            return Err(EmtError::FrameTooSmall {
                frame: m.chunks[chunk].start,
                height: m.height,
                width: m.width,
                patch: p,
            });
        }
        let cells: Vec<(usize, usize)> = (0..m.height / p)
            .flat_map(|r| (0..m.width / p).map(move |c| (r * p, c * p)))
            .collect();
        let coords: Vec<FrameCoords> = m.chunks[chunk]
            .clone()
            .map(|frame_id| FrameCoords {
                frame_id,
                coords: cells.clone(),
            })
            .collect();
        let pairs = extract_pairs(store, &coords, p)?;
        Ok(ChunkPairs {
            candidates: pairs.len(),
            pairs,
            forwards: 0,
            maps: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{chunkify, ChunkManifest};

    fn map(rows: usize, cols: usize, values: Vec<f64>) -> PsnrMap {
        PsnrMap {
            frame_id: 0,
            rows,
            cols,
            patch_size: 4,
            values,
        }
    }

    #[test]
    fn identical_frames_hit_the_cap() {
        let t = Tensor::from_fn([1, 3, 8, 12], |[_, c, y, x]| (c + y * x) as f32 / 100.0);
        let m = psnr_map(&t, &t, 4, 3).unwrap();
        assert_eq!((m.rows, m.cols), (2, 3));
        assert!(m.values.iter().all(|&v| v == PSNR_CAP_DB));
        assert!(psnr_map(&t, &t, 9, 3).is_err());
    }

    #[test]
    fn corrupted_cell_is_the_minimum() {
        let hr = Tensor::from_fn([1, 3, 12, 12], |[_, _, y, x]| ((y * 7 + x * 3) % 11) as f32 / 11.0);
        let mut sr = hr.clone();
        for y in 4..8 {
            for x in 8..12 {
                let v = sr.get(0, 1, y, x);
                sr.set(0, 1, y, x, v + if (x + y) % 2 == 0 { 0.1 } else { -0.1 });
            }
        }
        sr.set(0, 0, 0, 0, hr.get(0, 0, 0, 0) + 0.01);
        let m = psnr_map(&sr, &hr, 4, 0).unwrap();
        let worst = select_positions(&m, 1.0);
        assert_eq!(worst.cells, vec![(1, 2)]);
    }

    #[test]
    fn select_counts_and_ties() {
        let m = map(5, 4, (0..20).map(|i| (i * 7 % 20) as f64).collect());
        let p = select_positions(&m, 20.0);
        assert_eq!(p.cells.len(), 4);
        let mut picked: Vec<f64> = p.cells.iter().map(|&(r, c)| m.get(r, c)).collect();
        picked.sort_by(f64::total_cmp);
        assert_eq!(picked, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(select_positions(&m, 100.0).cells.len(), 20);

        let flat = map(2, 3, vec![5.0; 6]);
        assert_eq!(select_positions(&flat, 50.0).cells, vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(selection_count(1.0, 16), 1);
    }

    #[test]
    fn propagation() {
        let p = PatchPositions {
            iframe_id: 10,
            cells: vec![(0, 1), (2, 0), (1, 1), (3, 3)],
            r: 20.0,
        };
        assert_eq!(propagate_positions(&p, 10..11, 8).len(), 1);
        let out = propagate_positions(&p, 10..22, 8);
        assert_eq!(out.iter().map(|f| f.coords.len()).sum::<usize>(), 48);
        assert!(out.iter().all(|f| f.coords == out[0].coords));
        assert_eq!(out[0].coords[0], (0, 8));
    }

    fn store() -> FrameStore {
        let frames: Vec<Tensor> = (0..12)
            .map(|f| Tensor::from_fn([1, 3, 16, 16], |[_, c, y, x]| ((f + c + y * 3 + x * 5) % 13) as f32 / 13.0))
            .collect();
        let m = ChunkManifest::in_memory(12, 1.0, 2, 16, 16, vec![0, 4, 7]).unwrap();
        FrameStore::from_frames(chunkify(&m, 6.0).unwrap(), frames).unwrap()
    }

    #[test]
    fn pair_alignment() {
        let s = store();
        let coords = vec![FrameCoords {
            frame_id: 3,
            coords: vec![(8, 4)],
        }];
        let pairs = extract_pairs(&s, &coords, 8).unwrap();
        assert_eq!(pairs[0].lr.data(), s.lr(3).unwrap().crop(4, 2, 4, 4).unwrap().data());
        assert_eq!(pairs[0].hr.shape(), [1, 3, 8, 8]);
        let off = vec![FrameCoords {
            frame_id: 3,
            coords: vec![(9, 4)],
        }];
        assert!(extract_pairs(&s, &off, 8).is_err());
        let out = vec![FrameCoords {
            frame_id: 3,
            coords: vec![(10, 0)],
        }];
        assert!(extract_pairs(&s, &out, 8).is_err());
    }

    #[test]
    fn anchors_are_clipped_to_the_chunk() {
        let s = store();
        // chunks 0..6 and 6..12; I-frames 0, 4, 7
        assert_eq!(chunk_anchors(&s, 0), vec![(0, 0..4), (4, 4..6)]);
        assert_eq!(chunk_anchors(&s, 1), vec![(6, 6..7), (7, 7..12)]);
    }
}
