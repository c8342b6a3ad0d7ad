//! File-level pipeline behind the `emt` command line: synth, ingest,
//! pretrain, meta-train, adapt, apply and evaluate.
//!
//! Every command reads and writes plain files under an output directory.
//! Reports are comma-separated text plus a JSON summary. Individual files
//! are written atomically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::adapt::{emt_run, report_csv, AdaptConfig, ChunkReport, Preset};
use crate::backbone::{build_model, ArchId, ModelParams, Provenance};
use crate::codec::{apply_delta, read_model, storage_report, write_atomic, write_model, SparseDelta};
use crate::dataset::{
    chunk_by_count, chunkify, frame_file_name, group_long_video, ingest, list_frames, save_frame, write_iframe_sidecar,
    ChunkManifest, FramePair, FrameStore, IFrameSource, FALLBACK_IFRAME_INTERVAL,
};
use crate::error::{EmtError, Result, ResultExt};
use crate::meta::{log_csv, meta_train, pretrain, tasks_from_store, MetaConfig, MetaTask, PretrainConfig};
use crate::numerics::psnr;
use crate::sampler::{AllPatchSampler, CpsSampler, PairSampler, SamplerConfig};
use crate::synth::{synth_pretrain_images, synth_video, VideoSpec};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "EMT_OUT_DIR";

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SIDECAR_FILE: &str = "iframes.txt";
pub const PRETRAINED_FILE: &str = "pretrained.srm";
pub const META_FILE: &str = "meta.srm";
pub const DELTA_DIR: &str = "deltas";
pub const SR_DIR: &str = "sr";

/// Which model a chunk chain starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitChoice {
    Meta,
    Pretrained,
}

impl std::str::FromStr for InitChoice {
    type Err = EmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(InitChoice::Meta),
            "pretrained" => Ok(InitChoice::Pretrained),
            _ => Err(EmtError::invalid(format!("unknown init '{s}' (expected meta or pretrained)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub arch: ArchId,
    pub scale: usize,
    pub preset: Option<Preset>,
    pub adapt: AdaptConfig,
    pub sampler: SamplerConfig,
    pub meta: MetaConfig,
    pub pretrain: PretrainConfig,
    /// Challenging patch sampling; all grid patches otherwise.
    pub cps: bool,
    pub init: InitChoice,
    pub fps: f64,
    pub chunk_seconds: f64,
    /// Split into this many chunks instead of fixed-length ones.
    pub chunk_count: Option<usize>,
    pub iframes_per_group: Option<usize>,
    pub seed: u64,
    /// Write measured elapsed times; zeros otherwise.
    pub record_timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: default_out_dir(),
            arch: ArchId::Espcn,
            scale: 2,
            preset: Some(Preset::S),
            adapt: AdaptConfig::preset(Preset::S),
            sampler: SamplerConfig::default(),
            meta: MetaConfig::default(),
            pretrain: PretrainConfig::default(),
            cps: true,
            init: InitChoice::Meta,
            fps: 30.0,
            chunk_seconds: 5.0,
            chunk_count: None,
            iframes_per_group: None,
            seed: 0,
            record_timings: true,
        }
    }
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("emt-out"))
}

impl RunConfig {
    /// Settings sized for the bundled 96x96 synthetic data on one CPU core.
    pub fn desk() -> Self {
        let patch = 24;
        let mut c = RunConfig {
            fps: 6.0,
            ..RunConfig::default()
        };
        c.set_patch_size(patch);
        c.meta = MetaConfig {
            tasks_per_iter: 3,
            frames_per_task: 10,
            patch_size: patch,
            batch_size_per_task: 4,
            outer_iters: 150,
            outer_adam: true,
            ..MetaConfig::default()
        };
        c.pretrain = PretrainConfig {
            iters: 150,
            patch_size: patch,
            ..PretrainConfig::default()
        };
        c
    }

    /// Switch to a named budget, keeping patch size, seed and probe steps.
    pub fn apply_preset(&mut self, preset: Preset) {
        let base = AdaptConfig::preset(preset);
        self.adapt.p1 = base.p1;
        self.adapt.p2 = base.p2;
        self.adapt.epochs = base.epochs;
        self.preset = Some(preset);
    }

    /// Push `seed` into every component config.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.adapt.seed = seed;
        self.meta.seed = seed;
        self.pretrain.seed = seed;
    }

    /// One patch size for sampling, fine-tuning, meta-training and pretraining.
    pub fn set_patch_size(&mut self, patch: usize) {
        self.adapt.patch_size = patch;
        self.sampler.patch_size = patch;
        self.meta.patch_size = patch;
        self.pretrain.patch_size = patch;
    }

    pub fn sampler(&self) -> Box<dyn PairSampler> {
        if self.cps {
            Box::new(CpsSampler {
                config: SamplerConfig {
                    patch_size: self.adapt.patch_size,
                    ..self.sampler.clone()
                },
            })
        } else {
            Box::new(AllPatchSampler {
                patch_size: self.adapt.patch_size,
            })
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| EmtError::Format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| EmtError::Dataset(format!("cannot create {}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub video_seconds: f64,
    pub meta_videos: usize,
    pub meta_seconds: f64,
    pub pretrain_images: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            video_seconds: 45.0,
            meta_videos: 3,
            meta_seconds: 30.0,
            pretrain_images: 24,
        }
    }
}

/// Write the bundled desk-scale dataset:
/// `video/` (frames, I-frame sidecar, manifest), `meta/<name>/` (one
/// chunked video per directory) and `pretrain/` (still images).
pub fn cmd_synth(config: &RunConfig, options: &SynthOptions) -> Result<()> {
    let root = &config.out_dir;
    let spec = |seconds: f64, seed: u64| VideoSpec {
        fps: config.fps,
        frames: (seconds * config.fps).round() as usize,
        ..VideoSpec::desk(seconds, seed)
    };
    write_video(&root.join("video"), &spec(options.video_seconds, config.seed.wrapping_add(5000)), config)?;
    for v in 0..options.meta_videos {
        let seed = config.seed.wrapping_mul(31).wrapping_add(1000 + v as u64);
        write_video(&root.join("meta").join(format!("v{v:02}")), &spec(options.meta_seconds, seed), config)?;
    }
    let dir = root.join("pretrain");
    create_dir(&dir)?;
    for (i, img) in synth_pretrain_images(options.pretrain_images, 96, 96, config.seed.wrapping_add(100))
        .iter()
        .enumerate()
    {
        save_frame(&dir.join(format!("img_{i:03}.png")), img)?;
    }
    Ok(())
}

fn write_video(dir: &Path, spec: &VideoSpec, config: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    for (i, frame) in synth_video(spec)?.iter().enumerate() {
        save_frame(&dir.join(frame_file_name(i)), frame)?;
    }
    write_iframe_sidecar(&dir.join(SIDECAR_FILE), &spec.iframes())?;
    let manifest = build_manifest(dir, config)?;
    manifest.write(&dir.join(MANIFEST_FILE))
}

/// Ingest, chunk and (optionally) group a frame directory. Uses the
/// directory's I-frame sidecar when present.
pub fn build_manifest(frame_dir: &Path, config: &RunConfig) -> Result<ChunkManifest> {
    let sidecar = frame_dir.join(SIDECAR_FILE);
    let source = if sidecar.is_file() {
        IFrameSource::Sidecar(sidecar)
    } else {
        IFrameSource::Interval(FALLBACK_IFRAME_INTERVAL)
    };
    chunk_and_group(&ingest(frame_dir, config.fps, config.scale, &source)?, config)
}

/// Apply the configured chunking and grouping to an ingested manifest.
pub fn chunk_and_group(ingested: &ChunkManifest, config: &RunConfig) -> Result<ChunkManifest> {
    let mut m = match config.chunk_count {
        Some(n) => chunk_by_count(ingested, n)?,
        None => chunkify(ingested, config.chunk_seconds)?,
    };
    if let Some(g) = config.iframes_per_group {
        m.groups = group_long_video(&m, g)?;
    }
    Ok(m)
}

/// Write `manifest.txt` for a frame directory into the output directory.
pub fn cmd_ingest(config: &RunConfig, frame_dir: &Path, iframes: Option<&Path>) -> Result<ChunkManifest> {
    let mut m = match iframes {
        Some(p) => chunk_and_group(
            &ingest(frame_dir, config.fps, config.scale, &IFrameSource::Sidecar(p.to_path_buf()))?,
            config,
        )?,
        None => build_manifest(frame_dir, config)?,
    };
    m.root = fs::canonicalize(&m.root).unwrap_or(m.root);
    create_dir(&config.out_dir)?;
    m.write(&config.path(MANIFEST_FILE))?;
    Ok(m)
}

fn image_task(dir: &Path, scale: usize) -> Result<MetaTask> {
    let names = list_frames(dir)?;
    if names.is_empty() {
        return Err(EmtError::Dataset(format!("{}: no PNG or PPM images", dir.display())));
    }
    let mut frames = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let path = dir.join(name);
        let img = image::open(&path)
            .map_err(|source| EmtError::Image { path: path.clone(), source })?
            .to_rgb8();
        let (h, w) = (img.height() as usize, img.width() as usize);
        let hr = crate::dataset::center_crop(&img, h - h % scale, w - w % scale)?;
        let lr = crate::dataset::make_lr(&hr, scale)?;
        frames.push(FramePair {
            frame_id: i,
            hr: Arc::new(hr),
            lr: Arc::new(lr),
        });
    }
    Ok(MetaTask {
        task_id: 0,
        scale,
        frames,
    })
}

/// Train a fresh model on an image directory; writes `pretrained.srm` and
/// `pretrain_log.csv`.
pub fn cmd_pretrain(config: &RunConfig, image_dir: &Path) -> Result<ModelParams> {
    let images = image_task(image_dir, config.scale).context(|| "pretraining images".to_string())?;
    let init = build_model(config.arch, config.scale, config.seed)?;
    let (model, log) = pretrain(&init, &images, &config.pretrain)?;
    create_dir(&config.out_dir)?;
    write_model(&config.path(PRETRAINED_FILE), &model)?;
    write_text(&config.path("pretrain_log.csv"), &log_csv("loss", &log, config.record_timings))?;
    Ok(model)
}

/// Tasks from a meta-dataset directory: every subdirectory is a video,
/// every chunk of it a task. A subdirectory's own `manifest.txt` is used
/// when present.
pub fn load_meta_tasks(meta_dir: &Path, config: &RunConfig) -> Result<Vec<MetaTask>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(meta_dir)
        .map_err(|e| EmtError::Dataset(format!("meta-dataset {}: {e}", meta_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(EmtError::Dataset(format!(
            "meta-dataset {} has no video subdirectories",
            meta_dir.display()
        )));
    }
    let mut tasks = Vec::new();
    for dir in dirs {
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest = if manifest_path.is_file() {
            ChunkManifest::read(&manifest_path)?
        } else {
            build_manifest(&dir, config)?
        };
        manifest.root = dir.clone();
        if manifest.scale != config.scale {
            return Err(EmtError::Dataset(format!(
                "{} was ingested at x{}, run is x{}",
                dir.display(),
                manifest.scale,
                config.scale
            )));
        }
        let store = FrameStore::open(manifest);
        let first = tasks.len();
        tasks.extend(tasks_from_store(&store, config.meta.frames_per_task, first)?);
    }
    Ok(tasks)
}

/// Meta-train from `init`; writes `meta.srm` and `meta_log.csv`.
pub fn cmd_meta_train(config: &RunConfig, meta_dir: &Path, init: &Path) -> Result<ModelParams> {
    let init = read_model(init)?;
    check_model(&init, config)?;
    let tasks = load_meta_tasks(meta_dir, config)?;
    let (mut model, log) = meta_train(&init, &tasks, &config.meta)?;
    model.provenance = Provenance::Meta;
    create_dir(&config.out_dir)?;
    write_model(&config.path(META_FILE), &model)?;
    write_text(&config.path("meta_log.csv"), &log_csv("meta_loss", &log, config.record_timings))?;
    Ok(model)
}

fn check_model(model: &ModelParams, config: &RunConfig) -> Result<()> {
    if model.arch.arch_id != config.arch || model.scale() != config.scale {
        return Err(EmtError::invalid(format!(
            "model is {} x{}, run is configured for {} x{}",
            model.arch.arch_id,
            model.scale(),
            config.arch,
            config.scale
        )));
    }
    Ok(())
}

pub fn delta_file_name(chunk: usize) -> String {
    format!("chunk_{chunk:05}.srd")
}

#[derive(Clone, Debug, Serialize)]
pub struct ChunkSummary {
    pub chunk_id: u32,
    pub group: usize,
    pub mask_size: usize,
    pub delta_entries: usize,
    pub steps: usize,
    pub pairs: usize,
    pub candidates: usize,
    pub forwards: usize,
    pub reference_train_psnr_db: f64,
    pub final_train_psnr_db: f64,
    pub model_hash: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptSummary {
    pub arch: String,
    pub scale: usize,
    pub param_count: usize,
    pub init: InitChoice,
    pub init_hash: String,
    pub sampler: &'static str,
    pub p1: f64,
    pub p2: f64,
    pub epochs: f64,
    pub chunks: usize,
    pub groups: usize,
    pub private_params: usize,
    pub delta_entries: usize,
    pub storage: String,
    pub delta_bytes: usize,
    pub self_fit_violations: Vec<u32>,
    pub per_chunk: Vec<ChunkSummary>,
}

#[derive(Clone, Debug)]
pub struct AdaptRun {
    pub summary: AdaptSummary,
    pub reports: Vec<ChunkReport>,
    pub models: Vec<ModelParams>,
    pub deltas: Vec<SparseDelta>,
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

/// EMT over every chunk of a manifest, restarting from the root model at
/// each group. Writes one `.srd` per chunk under `deltas/`, plus
/// `adapt_report.csv`, `adapt_hashes.txt` and `adapt_summary.json`.
pub fn cmd_adapt(config: &RunConfig, manifest: &ChunkManifest, root: &ModelParams) -> Result<AdaptRun> {
    check_model(root, config)?;
    if manifest.scale != config.scale {
        return Err(EmtError::invalid(format!(
            "manifest is x{}, run is x{}",
            manifest.scale, config.scale
        )));
    }
    let store = FrameStore::open(manifest.clone());
    let sampler = config.sampler();
    let mut reports = Vec::new();
    let mut models = Vec::new();
    let mut deltas = Vec::new();
    let mut masks = 0;
    let mut per_chunk = Vec::new();
    let mut violations = Vec::new();
    for (g, group) in manifest.groups.iter().enumerate() {
        let chunks: Vec<usize> = group.clone().collect();
        let out = emt_run(root, &store, &chunks, &config.adapt, sampler.as_ref())
            .context(|| format!("group {g}"))?;
        masks += out.private_params();
        violations.extend(out.self_fit_violations());
        for (r, m) in out.reports.iter().zip(&out.models) {
            per_chunk.push(ChunkSummary {
                chunk_id: r.chunk_id,
                group: g,
                mask_size: r.mask_size,
                delta_entries: r.delta_entries,
                steps: r.steps,
                pairs: r.pairs,
                candidates: r.candidates,
                forwards: r.forwards,
                reference_train_psnr_db: r.reference_train_psnr_db,
                final_train_psnr_db: r.final_train_psnr_db,
                model_hash: hex(m.content_hash()),
            });
        }
        reports.extend(out.reports);
        models.extend(out.models);
        deltas.extend(out.deltas);
    }
    let storage = storage_report(&deltas, root.param_count());

    let delta_dir = config.path(DELTA_DIR);
    create_dir(&delta_dir)?;
    for d in &deltas {
        d.write(&delta_dir.join(delta_file_name(d.chunk_id as usize)))?;
    }
    write_text(&config.path("adapt_report.csv"), &report_csv(&reports, config.record_timings))?;
    write_text(&config.path("adapt_hashes.txt"), &hash_log(&models))?;
    let summary = AdaptSummary {
        arch: config.arch.to_string(),
        scale: config.scale,
        param_count: root.param_count(),
        init: config.init,
        init_hash: hex(root.content_hash()),
        sampler: sampler.name(),
        p1: config.adapt.p1,
        p2: config.adapt.p2,
        epochs: config.adapt.epochs,
        chunks: manifest.chunk_count(),
        groups: manifest.groups.len(),
        private_params: masks,
        delta_entries: storage.private_params,
        storage: storage.fraction_label(),
        delta_bytes: storage.delta_bytes,
        self_fit_violations: violations,
        per_chunk,
    };
    write_json(&config.path("adapt_summary.json"), &summary)?;
    Ok(AdaptRun {
        summary,
        reports,
        models,
        deltas,
    })
}

/// `chunk_id,hash` per model, hash as 16 hex digits.
pub fn hash_log(models: &[ModelParams]) -> String {
    let mut s = String::from("chunk_id,hash\n");
    for m in models {
        let chunk = match m.provenance {
            Provenance::Adapted { chunk } => chunk.to_string(),
            _ => "-".into(),
        };
        let _ = writeln!(s, "{chunk},{}", hex(m.content_hash()));
    }
    s
}

/// Rebuild every chunk model from the root and the delta files present in
/// `delta_dir`. A chunk without a delta keeps its predecessor's model.
pub fn reconstruct_models(manifest: &ChunkManifest, root: &ModelParams, delta_dir: &Path) -> Result<Vec<ModelParams>> {
    let mut models = Vec::with_capacity(manifest.chunk_count());
    for group in &manifest.groups {
        let mut cur = root.clone();
        for chunk in group.clone() {
            let path = delta_dir.join(delta_file_name(chunk));
            if path.is_file() {
                let delta = SparseDelta::read(&path)?;
                cur = apply_delta(&cur, &delta).context(|| format!("chunk {chunk}"))?;
            }
            models.push(cur.clone());
        }
    }
    Ok(models)
}

/// Super-resolve every LR frame with its chunk's reconstructed model;
/// writes `sr/<frame>.png` and `apply_hashes.txt`.
pub fn cmd_apply(config: &RunConfig, manifest: &ChunkManifest, root: &ModelParams, delta_dir: &Path) -> Result<Vec<ModelParams>> {
    check_model(root, config)?;
    let models = reconstruct_models(manifest, root, delta_dir)?;
    let store = FrameStore::open(manifest.clone());
    let sr_dir = config.path(SR_DIR);
    create_dir(&sr_dir)?;
    for (c, range) in manifest.chunks.iter().enumerate() {
        for f in range.clone() {
            let sr = models[c].forward(&*store.lr(f)?)?;
            save_frame(&sr_dir.join(frame_file_name(f)), &sr)?;
        }
    }
    write_text(&config.path("apply_hashes.txt"), &hash_log(&models))?;
    Ok(models)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    /// Chunk index, or `None` for the overall row.
    pub chunk: Option<usize>,
    pub frames: usize,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub color_space: &'static str,
    pub per_frame_psnr_db: Vec<f64>,
    pub rows: Vec<EvalRow>,
    pub overall_psnr_db: f64,
    /// Frames whose SR output equals the HR frame (PSNR at the cap).
    pub capped_frames: usize,
}

/// Per-chunk and overall mean of per-frame PSNR between `sr_dir` frames and
/// the manifest's HR frames. Writes `eval.csv` and `eval_summary.json`.
pub fn cmd_evaluate(config: &RunConfig, manifest: &ChunkManifest, sr_dir: &Path) -> Result<EvalSummary> {
    let sr_frames = list_frames(sr_dir)?;
    if sr_frames.len() != manifest.frame_count() {
        return Err(EmtError::Dataset(format!(
            "{} SR frames in {} but the manifest has {} frames",
            sr_frames.len(),
            sr_dir.display(),
            manifest.frame_count()
        )));
    }
    let hr_store = FrameStore::open(manifest.clone());
    let sr_manifest = ChunkManifest {
        root: sr_dir.to_path_buf(),
        frames: sr_frames,
        ..manifest.clone()
    };
    let sr_store = FrameStore::open(sr_manifest);
    let per_frame = (0..manifest.frame_count())
        .map(|f| psnr(&*sr_store.hr(f)?, &*hr_store.hr(f)?, 1.0))
        .collect::<Result<Vec<f64>>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rows: Vec<EvalRow> = manifest
        .chunks
        .iter()
        .enumerate()
        .map(|(c, r)| EvalRow {
            chunk: Some(c),
            frames: r.len(),
            psnr_db: mean(&per_frame[r.clone()]),
        })
        .collect();
    let overall = mean(&per_frame);
    rows.push(EvalRow {
        chunk: None,
        frames: per_frame.len(),
        psnr_db: overall,
    });
    let mut csv = String::from("chunk,frames,psnr_db\n");
    for r in &rows {
        let id = r.chunk.map_or("overall".to_string(), |c| c.to_string());
        let _ = writeln!(csv, "{id},{},{:.4}", r.frames, r.psnr_db);
    }
    let summary = EvalSummary {
        color_space: "RGB [0,1], peak 1",
        capped_frames: per_frame.iter().filter(|&&p| p >= crate::numerics::PSNR_CAP_DB).count(),
        per_frame_psnr_db: per_frame,
        rows,
        overall_psnr_db: overall,
    };
    create_dir(&config.out_dir)?;
    write_text(&config.path("eval.csv"), &csv)?;
    write_json(&config.path("eval_summary.json"), &summary)?;
    Ok(summary)
}

/// Mean per-frame PSNR of `model` over one chunk of `store`.
pub fn chunk_psnr(model: &ModelParams, store: &FrameStore, chunk: usize) -> Result<f64> {
    let range = store.manifest().chunks[chunk].clone();
    let n = range.len() as f64;
    let mut total = 0.0;
    for f in range {
        total += psnr(&model.forward(&*store.lr(f)?)?, &*store.hr(f)?, 1.0)?;
    }
    Ok(total / n)
}

/// Load the chain root selected by `config.init` from the output directory.
pub fn load_root(config: &RunConfig) -> Result<ModelParams> {
    let name = match config.init {
        InitChoice::Meta => META_FILE,
        InitChoice::Pretrained => PRETRAINED_FILE,
    };
    read_model(&config.path(name))
}
