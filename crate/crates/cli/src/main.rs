mod run_manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use villm_core::base::{BaseConfig, ImageLlm, PretrainConfig};
use villm_core::encoder::{sample_frames, EncoderConfig, VideoTensor, VisualEncoder};
use villm_core::harness::{ablation_sweep, evaluate, gen_synthetic_dataset, generate_examples, SweepAxis, SweepConfig, SyntheticTask, TaskKind};
use villm_core::lm::generate;
use villm_core::tuning::{check_batch_gradients, load_samples, AdapterStack, Checkpoint, Sample, TrainConfig, Trainer, Variant};
use villm_core::VillmError;

use run_manifest::{manifest_path, RunManifest};

const MAX_GRAD_ERROR: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "villm", version, about = "Video adapters on a frozen image-language backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic video QA dataset (VTNS clips plus data.jsonl).
    GenData(GenDataArgs),
    /// Train adapters on a JSONL dataset with the backbone frozen.
    Train(TrainArgs),
    /// Exact-match accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Answer one instruction about one video.
    Generate(GenerateArgs),
    /// Train and evaluate one run per value of a swept setting.
    Ablate(AblateArgs),
    /// Compare analytic adapter gradients with central differences.
    GradCheck(GradCheckArgs),
    /// Encode a video into per-frame patch features.
    Encode(EncodeArgs),
}

#[derive(Args, Clone)]
struct BaseArgs {
    /// Where the pretrained backbone is cached.
    #[arg(long, env = "VILLM_CACHE", default_value = "villm-cache")]
    cache_dir: PathBuf,
    /// Use the seeded backbone without the image-QA pretraining pass.
    #[arg(long)]
    untrained_base: bool,
}

impl BaseArgs {
    fn config(&self) -> BaseConfig {
        BaseConfig {
            pretrain: (!self.untrained_base).then(PretrainConfig::default),
            ..Default::default()
        }
    }

    /// Loads the backbone with a sequence budget wide enough for `frames`.
    fn load(&self, frames: usize) -> Result<ImageLlm, CliError> {
        let cfg = self.config();
        let mut base = ImageLlm::load_or_build(&cfg, &self.cache_dir)?;
        let need = frames + cfg.encoder.num_patches() + 192;
        if need > base.decoder.max_seq_len() {
            base.decoder = base.decoder.with_max_seq_len(need);
        }
        Ok(base)
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 2e-5)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, env = "VILLM_SEED", default_value_t = 0)]
    seed: u64,
    /// Put spatial tokens before temporal ones.
    #[arg(long)]
    spatial_first: bool,
    /// Window side for the window-pooled variant.
    #[arg(long, default_value_t = 2)]
    spatial_window: usize,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            frames: self.frames,
            seed: self.seed,
            variant: self.variant,
            temporal_first: !self.spatial_first,
            spatial_window: self.spatial_window,
        }
    }

    fn echo(&self) -> String {
        format!(
            "variant={} lr={:e} batch={} epochs={} frames={} seed={} order={} spatial_window={}",
            self.variant,
            self.lr,
            self.batch,
            self.epochs,
            self.frames,
            self.seed,
            if self.spatial_first { "spatial-first" } else { "temporal-first" },
            self.spatial_window
        )
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, env = "VILLM_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Stop after this many optimizer steps; rerun with --resume to continue.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    base: BaseArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Task tag written into the report.
    #[arg(long, default_value = "custom")]
    task: String,
    #[command(flatten)]
    base: BaseArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    instruction: String,
    #[arg(long, default_value_t = 16)]
    max_new_tokens: usize,
    #[command(flatten)]
    base: BaseArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Swept setting: variant, frames or spatial_tokens.
    #[arg(long, value_parser = parse_axis)]
    axis: SweepAxis,
    /// Comma-separated values of the swept setting.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, default_value = "direction", value_parser = parse_task)]
    task: TaskKind,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_eval: usize,
    /// Frames per generated clip; defaults to the largest frame count used.
    #[arg(long)]
    raw_frames: Option<usize>,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[command(flatten)]
    train: TrainFlags,
    /// Record wall-clock seconds (the CSV is then no longer byte-stable).
    #[arg(long)]
    time: bool,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    base: BaseArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Check these adapters instead of a fresh stack.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 3)]
    batches: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value = "direction", value_parser = parse_task)]
    task: TaskKind,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[command(flatten)]
    base: BaseArgs,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    video: PathBuf,
    /// Resample to this many frames first.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: VillmError| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: VillmError| e.to_string())
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: VillmError| e.to_string())
}

#[derive(Debug)]
enum CliError {
    /// Bad flags or inputs; exit code 2.
    Usage(String),
    /// Failure inside a run; exit code 1.
    Internal(String),
}

impl From<VillmError> for CliError {
    fn from(e: VillmError) -> Self {
        use VillmError::*;
        match e {
            Io { .. } | Format { .. } | Config(_) | Manifest(_) | Dataset(_) | LabelMismatch { .. } | Length { .. } => {
                CliError::Usage(e.to_string())
            }
            Shape { .. } | Axis { .. } | NonFinite(_) | EmptyMask | Diverged { .. } => CliError::Internal(e.to_string()),
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| CliError::Usage(format!("creating {}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let task = SyntheticTask::new(a.task, a.n, a.frames, a.seed);
    let encoder = VisualEncoder::new(EncoderConfig::default())?;
    let mut run = RunManifest::start("gen-data");
    let summary = gen_synthetic_dataset(&task, &a.out, &encoder)?;
    let classes: Vec<String> = summary.per_class.iter().map(|(c, n)| format!("{c}:{n}")).collect();
    println!("wrote {} records to {} ({})", summary.records, a.out.display(), classes.join(" "));
    run.config(&format!("task={} n={} frames={}", a.task, a.n, a.frames))
        .set("seed", a.seed)
        .encoder_hashes(&encoder);
    run.finish(&manifest_path(&a.out, true))?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    require_file(&a.data, "dataset")?;
    let cfg = a.train.config();
    cfg.validate()?;
    println!("config: {}", a.train.echo());
    let mut run = RunManifest::start("train");
    let base = a.base.load(cfg.frames)?;
    let data = load_samples(&a.data, &base.encoder, cfg.frames)?;
    let mut trainer = if a.resume {
        let state = Checkpoint::load(&a.out)?;
        if state.config != cfg {
            return Err(CliError::Usage(format!(
                "checkpoint in {} was trained with {}, not {}",
                a.out.display(),
                state.config.echo(),
                cfg.echo()
            )));
        }
        Trainer::resume(&base, state)?
    } else {
        Trainer::new(&base, cfg.clone())?
    };
    trainer.train_steps(&data, a.max_steps)?;
    let state = &trainer.state;
    for (i, l) in state.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {l:.6}", i + 1);
    }
    println!(
        "step {}/{} saved to {}",
        state.step,
        trainer.total_steps(data.len()),
        a.out.display()
    );
    state.save(&a.out)?;
    run.config(&cfg.echo())
        .set("seed", cfg.seed)
        .set("data", a.data.display())
        .set("step", state.step)
        .set("adapters_hash", state.adapters.params_hash())
        .base_hashes(&base);
    run.finish(&manifest_path(&a.out, true))?;
    Ok(())
}

fn load_checkpoint(path: &Path, base: &ImageLlm) -> Result<Checkpoint, CliError> {
    require_file(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    if ckpt.backbone_hash != base.backbone_hash() {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained on a different backbone (pass the same --untrained-base setting)",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn checkpoint_frames(path: &Path) -> Result<usize, CliError> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?.config.frames)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    require_file(&a.data, "dataset")?;
    let base = a.base.load(checkpoint_frames(&a.checkpoint)?)?;
    let ckpt = load_checkpoint(&a.checkpoint, &base)?;
    let mut run = RunManifest::start("eval");
    let samples = load_samples(&a.data, &base.encoder, ckpt.config.frames)?;
    let report = evaluate(&base.decoder, &ckpt.adapters, &samples, &a.task, &ckpt.config.echo())?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &a.out {
        create_parent(out)?;
        fs::write(out, &csv).map_err(|e| CliError::Usage(format!("writing {}: {e}", out.display())))?;
        run.config(&ckpt.config.echo())
            .set("checkpoint", a.checkpoint.display())
            .set("data", a.data.display())
            .set("accuracy", report.accuracy)
            .base_hashes(&base);
        run.finish(&manifest_path(out, false))?;
    }
    Ok(())
}

fn generate_cmd(a: GenerateArgs) -> Result<(), CliError> {
    require_file(&a.video, "video")?;
    let base = a.base.load(checkpoint_frames(&a.checkpoint)?)?;
    let ckpt = load_checkpoint(&a.checkpoint, &base)?;
    let video = VideoTensor::load(&a.video)?;
    let sample = Sample::from_video("input", &video, &base.encoder, ckpt.config.frames, a.instruction.as_str(), "")?;
    let (q_v, _) = ckpt.adapters.forward(&sample.features)?;
    println!("{}", generate(&base.decoder, &q_v, &a.instruction, a.max_new_tokens)?);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let train = a.train.config();
    train.validate()?;
    let mut largest = train.frames;
    if a.axis == SweepAxis::Frames {
        for v in &a.values {
            largest = largest.max(v.parse().map_err(|_| CliError::Usage(format!("`{v}` is not a frame count")))?);
        }
    }
    let cfg = SweepConfig {
        task: a.task,
        n_train: a.n_train,
        n_eval: a.n_eval,
        raw_frames: a.raw_frames.unwrap_or(largest),
        data_seed: a.data_seed,
        train,
        record_time: a.time,
    };
    let mut run = RunManifest::start("ablate");
    let base = a.base.load(largest)?;
    let result = ablation_sweep(&base, a.axis, &a.values, &cfg)?;
    let csv = result.to_csv();
    print!("{csv}");
    create_parent(&a.out)?;
    fs::write(&a.out, &csv).map_err(|e| CliError::Usage(format!("writing {}: {e}", a.out.display())))?;
    run.config(&format!("axis={} values={} {}", a.axis, a.values.join(";"), cfg.echo()))
        .set("seed", cfg.train.seed)
        .set("data_seed", cfg.data_seed)
        .base_hashes(&base);
    run.finish(&manifest_path(&a.out, false))?;
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<(), CliError> {
    let cfg = a.train.config();
    cfg.validate()?;
    if a.batches == 0 || a.batch_size == 0 {
        return Err(CliError::Usage("--batches and --batch-size must be positive".into()));
    }
    let base = a.base.load(cfg.frames)?;
    let adapters = match &a.checkpoint {
        Some(p) => load_checkpoint(p, &base)?.adapters,
        None => AdapterStack::new(&base.g_z, &cfg),
    };
    let examples = generate_examples(&SyntheticTask::new(a.task, a.batches * a.batch_size, cfg.frames, cfg.seed))?;
    let samples = examples
        .iter()
        .map(|e| Sample::from_video(&e.id, &e.video, &base.encoder, cfg.frames, &e.instruction, &e.answer))
        .collect::<villm_core::Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    for (i, chunk) in samples.chunks(a.batch_size).enumerate() {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let rep = check_batch_gradients(&base.decoder, &adapters, &batch, a.step)?;
        println!(
            "batch {} max_rel_error {:.3e} over {} coordinates",
            i + 1,
            rep.max_relative_error,
            rep.coordinates
        );
        worst = worst.max(rep.max_relative_error);
    }
    println!("max_rel_error {worst:.3e}");
    if worst > MAX_GRAD_ERROR {
        return Err(CliError::Internal(format!(
            "gradient error {worst:.3e} exceeds {MAX_GRAD_ERROR:e}"
        )));
    }
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<(), CliError> {
    require_file(&a.video, "video")?;
    let encoder = VisualEncoder::new(EncoderConfig::default())?;
    let mut run = RunManifest::start("encode");
    let mut video = VideoTensor::load(&a.video)?;
    if let Some(f) = a.frames {
        video = sample_frames(&video, f)?;
    }
    let feats = encoder.encode(&video)?;
    create_parent(&a.out)?;
    feats.save(&a.out)?;
    println!(
        "{} frames × {} patches × {} dims written to {}",
        feats.frames(),
        feats.patches(),
        feats.dim(),
        a.out.display()
    );
    run.set("video", a.video.display()).encoder_hashes(&encoder);
    run.finish(&manifest_path(&a.out, false))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            let mut cmd = Cli::command();
            cmd.build();
            let sub = std::env::args().nth(1).unwrap_or_default();
            let usage = match cmd.find_subcommand_mut(&sub) {
                Some(c) => c.render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("\n{usage}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Encode(a) => encode(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
