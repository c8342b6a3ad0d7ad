use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use emt::adapt::Preset;
use emt::backbone::ArchId;
use emt::codec::read_model;
use emt::dataset::ChunkManifest;
use emt::harness::{self, InitChoice, RunConfig, SynthOptions, DELTA_DIR, MANIFEST_FILE, SR_DIR};

#[derive(Parser, Debug)]
#[command(name = "emt", version, about = "Meta-learned, masked per-chunk super-resolution for video delivery")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// 96x96 synthetic frames, 24-pixel patches, short training runs.
    Desk,
    /// Full-size defaults: 144-pixel patches, 30 fps, long training runs.
    Full,
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory [default: $EMT_OUT_DIR or ./emt-out]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long, global = true, default_value = "espcn")]
    arch: ArchId,
    #[arg(long, global = true, default_value_t = 2)]
    scale: usize,
    /// S, M or L; explicit --p1/--p2/--epochs override it
    #[arg(long, global = true, default_value = "S")]
    preset: Preset,
    #[arg(long, global = true)]
    p1: Option<f64>,
    #[arg(long, global = true)]
    p2: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<f64>,
    /// Fixed fine-tuning steps per chunk, replacing --epochs
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Percentage of grid cells kept per I-frame by CPS
    #[arg(long, global = true)]
    r: Option<f64>,
    #[arg(long, global = true)]
    probe_steps: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    #[arg(long, global = true)]
    fps: Option<f64>,
    #[arg(long, global = true)]
    chunk_seconds: Option<f64>,
    /// Split the video into exactly this many chunks
    #[arg(long, global = true)]
    chunks: Option<usize>,
    #[arg(long, global = true)]
    iframes_per_group: Option<usize>,
    /// Train on every grid patch instead of challenging patches
    #[arg(long, global = true)]
    no_cps: bool,
    #[arg(long, global = true, value_enum, default_value = "meta")]
    init: InitArg,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write zeros instead of elapsed times so reruns are byte-identical
    #[arg(long, global = true)]
    no_timings: bool,

    /// Tasks per meta iteration (n)
    #[arg(long, global = true)]
    tasks: Option<usize>,
    #[arg(long, global = true)]
    frames_per_task: Option<usize>,
    #[arg(long, global = true)]
    outer_iters: Option<usize>,
    #[arg(long, global = true)]
    inner_steps: Option<usize>,
    #[arg(long, global = true)]
    inner_lr: Option<f64>,
    #[arg(long, global = true)]
    outer_lr: Option<f64>,
    #[arg(long, global = true)]
    meta_batch: Option<usize>,
    /// Outer optimizer
    #[arg(long, global = true, value_enum)]
    outer_opt: Option<OuterOpt>,
    #[arg(long, global = true)]
    pretrain_iters: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Meta,
    Pretrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OuterOpt {
    Sgd,
    Adam,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic desk dataset (video/, meta/, pretrain/)
    Synth {
        #[arg(long, default_value_t = 45.0)]
        video_seconds: f64,
        #[arg(long, default_value_t = 3)]
        meta_videos: usize,
        #[arg(long, default_value_t = 30.0)]
        meta_seconds: f64,
        #[arg(long, default_value_t = 24)]
        pretrain_images: usize,
    },
    /// Index a frame directory into <out>/manifest.txt
    Ingest {
        frames: PathBuf,
        /// I-frame index file [default: <frames>/iframes.txt, else every 48th frame]
        #[arg(long)]
        iframes: Option<PathBuf>,
    },
    /// Train a fresh model on a directory of images
    Pretrain { images: PathBuf },
    /// Meta-train from a pretrained model over a directory of chunked videos
    MetaTrain {
        meta_dir: PathBuf,
        /// Starting model [default: <out>/pretrained.srm]
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Adapt one model per chunk and write sparse deltas
    Adapt {
        /// [default: <out>/manifest.txt]
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Chain root [default: <out>/meta.srm or <out>/pretrained.srm per --init]
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Rebuild chunk models from deltas and super-resolve every frame
    Apply {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// [default: <out>/deltas]
        #[arg(long)]
        deltas: Option<PathBuf>,
    },
    /// PSNR of SR frames against the manifest's HR frames
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// [default: <out>/sr]
        #[arg(long)]
        sr: Option<PathBuf>,
    },
}

fn run_config(c: &Common) -> RunConfig {
    let mut rc = match c.profile {
        Profile::Desk => RunConfig::desk(),
        Profile::Full => RunConfig::default(),
    };
    rc.out_dir = c.out.clone().unwrap_or_else(harness::default_out_dir);
    rc.arch = c.arch;
    rc.scale = c.scale;
    rc.apply_preset(c.preset);
    if c.p1.is_some() || c.p2.is_some() || c.epochs.is_some() || c.steps.is_some() {
        rc.preset = None;
    }
    if let Some(v) = c.p1 {
        rc.adapt.p1 = v;
    }
    if let Some(v) = c.p2 {
        rc.adapt.p2 = v;
    }
    if let Some(v) = c.epochs {
        rc.adapt.epochs = v;
    }
    rc.adapt.steps = c.steps;
    if let Some(v) = c.r {
        rc.sampler.r = v;
    }
    if let Some(v) = c.probe_steps {
        rc.adapt.probe_steps = v;
    }
    if let Some(v) = c.lr {
        rc.adapt.lr = v;
    }
    if let Some(v) = c.batch_size {
        rc.adapt.batch_size = v;
    }
    if let Some(v) = c.patch_size {
        rc.set_patch_size(v);
    }
    if let Some(v) = c.fps {
        rc.fps = v;
    }
    if let Some(v) = c.chunk_seconds {
        rc.chunk_seconds = v;
    }
    rc.chunk_count = c.chunks;
    rc.iframes_per_group = c.iframes_per_group;
    rc.cps = !c.no_cps;
    rc.init = match c.init {
        InitArg::Meta => InitChoice::Meta,
        InitArg::Pretrained => InitChoice::Pretrained,
    };
    rc.set_seed(c.seed);
    rc.record_timings = !c.no_timings;

    if let Some(v) = c.tasks {
        rc.meta.tasks_per_iter = v;
    }
    if let Some(v) = c.frames_per_task {
        rc.meta.frames_per_task = v;
    }
    if let Some(v) = c.outer_iters {
        rc.meta.outer_iters = v;
    }
    if let Some(v) = c.inner_steps {
        rc.meta.inner_steps = v;
    }
    if let Some(v) = c.inner_lr {
        rc.meta.inner_lr = v;
    }
    if let Some(v) = c.outer_lr {
        rc.meta.outer_lr = v;
    }
    if let Some(v) = c.meta_batch {
        rc.meta.batch_size_per_task = v;
    }
    if let Some(v) = c.outer_opt {
        rc.meta.outer_adam = v == OuterOpt::Adam;
    }
    if let Some(v) = c.pretrain_iters {
        rc.pretrain.iters = v;
    }
    rc
}

fn manifest_at(rc: &RunConfig, path: Option<PathBuf>) -> Result<ChunkManifest> {
    let path = path.unwrap_or_else(|| rc.out_dir.join(MANIFEST_FILE));
    let m = ChunkManifest::read(&path).with_context(|| format!("reading manifest {}", path.display()))?;
    if m.scale != rc.scale {
        bail!("manifest {} was ingested at x{}; pass --scale {}", path.display(), m.scale, m.scale);
    }
    Ok(m)
}

fn root_model(rc: &RunConfig, path: Option<PathBuf>) -> Result<emt::backbone::ModelParams> {
    match path {
        Some(p) => read_model(&p).with_context(|| format!("reading model {}", p.display())),
        None => harness::load_root(rc).with_context(|| {
            format!(
                "no {:?} model in {}; run pretrain/meta-train first or pass --model",
                rc.init,
                rc.out_dir.display()
            )
        }),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let rc = run_config(&cli.common);
    rc.adapt.validate()?;
    rc.sampler.validate()?;
    rc.meta.validate()?;
    match cli.command {
        Command::Synth {
            video_seconds,
            meta_videos,
            meta_seconds,
            pretrain_images,
        } => {
            let options = SynthOptions {
                video_seconds,
                meta_videos,
                meta_seconds,
                pretrain_images,
            };
            harness::cmd_synth(&rc, &options)?;
            println!("wrote synthetic dataset to {}", rc.out_dir.display());
        }
        Command::Ingest { frames, iframes } => {
            let m = harness::cmd_ingest(&rc, &frames, iframes.as_deref())?;
            println!(
                "{} frames, {} chunks, {} groups, {} I-frames",
                m.frame_count(),
                m.chunk_count(),
                m.groups.len(),
                m.iframes.len()
            );
        }
        Command::Pretrain { images } => {
            let m = harness::cmd_pretrain(&rc, &images)?;
            println!("pretrained {} x{} ({} parameters)", m.arch.arch_id, m.scale(), m.param_count());
        }
        Command::MetaTrain { meta_dir, model } => {
            let init = model.unwrap_or_else(|| rc.out_dir.join(harness::PRETRAINED_FILE));
            let m = harness::cmd_meta_train(&rc, &meta_dir, &init)?;
            println!("meta-trained model hash {:016x}", m.content_hash());
        }
        Command::Adapt { manifest, model } => {
            let m = manifest_at(&rc, manifest)?;
            let root = root_model(&rc, model)?;
            let run = harness::cmd_adapt(&rc, &m, &root)?;
            let s = &run.summary;
            println!(
                "{} chunks, {} private parameters of P = {}: {}",
                s.chunks, s.delta_entries, s.param_count, s.storage
            );
            if !s.self_fit_violations.is_empty() {
                eprintln!("warning: chunks {:?} lost train PSNR against their reference", s.self_fit_violations);
            }
        }
        Command::Apply { manifest, model, deltas } => {
            let m = manifest_at(&rc, manifest)?;
            let root = root_model(&rc, model)?;
            let deltas = deltas.unwrap_or_else(|| rc.out_dir.join(DELTA_DIR));
            let models = harness::cmd_apply(&rc, &m, &root, &deltas)?;
            println!("super-resolved {} frames with {} chunk models", m.frame_count(), models.len());
        }
        Command::Evaluate { manifest, sr } => {
            let m = manifest_at(&rc, manifest)?;
            let sr = sr.unwrap_or_else(|| rc.out_dir.join(SR_DIR));
            let s = harness::cmd_evaluate(&rc, &m, &sr)?;
            for r in &s.rows {
                let id = r.chunk.map_or("overall".to_string(), |c| format!("chunk {c}"));
                println!("{id:>10}  {:>4} frames  {:.3} dB", r.frames, r.psnr_db);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
