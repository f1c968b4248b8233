use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::base::ImageLlm;
use crate::error::{Result, VillmError};
use crate::lm::{ASSISTANT_SUFFIX, USER_PREFIX};
use crate::tuning::{train, Sample, TrainConfig, Variant};

use super::eval::evaluate;
use super::synthetic::{generate_examples, SyntheticExample, SyntheticTask, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Variant,
    Frames,
    SpatialTokens,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Variant => "variant",
            SweepAxis::Frames => "frames",
            SweepAxis::SpatialTokens => "spatial_tokens",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = VillmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variant" => Ok(SweepAxis::Variant),
            "frames" => Ok(SweepAxis::Frames),
            "spatial_tokens" | "spatial-tokens" => Ok(SweepAxis::SpatialTokens),
            _ => Err(VillmError::Config(format!(
                "unknown axis `{s}` (expected variant, frames or spatial_tokens)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub task: TaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    /// Frames drawn per synthetic clip before sampling down (or up) to
    /// `train.frames`.
    pub raw_frames: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
    /// Record wall-clock seconds per run; off keeps the CSV byte-stable.
    pub record_time: bool,
}

impl SweepConfig {
    pub fn echo(&self) -> String {
        format!(
            "task={} n_train={} n_eval={} raw_frames={} data_seed={} {}",
            self.task,
            self.n_train,
            self.n_eval,
            self.raw_frames,
            self.data_seed,
            self.train.echo()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis_value: String,
    pub task: String,
    pub accuracy: f64,
    pub train_loss_final: f64,
    pub wall_seconds: Option<f64>,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        let wall = self.wall_seconds.map_or("na".to_string(), |s| format!("{s:.2}"));
        format!(
            "{},{},{:.4},{:.6},{wall}",
            self.axis_value, self.task, self.accuracy, self.train_loss_final
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub config: String,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "axis_value,task,accuracy,train_loss_final,wall_seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("# config: axis={} {}\n{}\n", self.axis, self.config, Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    pub fn row(&self, axis_value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.axis_value == axis_value)
    }
}

/// Parsed per-run override.
enum Setting {
    Variant(Variant),
    Frames(usize),
    Window(usize),
}

fn parse_value(axis: SweepAxis, v: &str, grid_side: usize) -> Result<Setting> {
    let count = || {
        v.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| VillmError::Config(format!("`{v}` is not a positive count")))
    };
    match axis {
        SweepAxis::Variant => Ok(Setting::Variant(v.parse()?)),
        SweepAxis::Frames => Ok(Setting::Frames(count()?)),
        SweepAxis::SpatialTokens => {
            let n = count()?;
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n || grid_side % side != 0 {
                return Err(VillmError::Config(format!(
                    "{n} spatial tokens cannot be pooled from a {grid_side}×{grid_side} grid"
                )));
            }
            Ok(Setting::Window(grid_side / side))
        }
    }
}

fn to_samples(examples: &[SyntheticExample], base: &ImageLlm, frames: usize) -> Result<Vec<Sample>> {
    examples
        .iter()
        .map(|e| Sample::from_video(&e.id, &e.video, &base.encoder, frames, &e.instruction, &e.answer))
        .collect()
}

/// Longest prompt the task can produce with `video_tokens` video rows.
fn prompt_len(task: TaskKind, video_tokens: usize) -> usize {
    let answer = task.answers().iter().map(|a| a.len()).max().unwrap_or(0);
    USER_PREFIX.len() + video_tokens + task.question().len() + ASSISTANT_SUFFIX.len() + answer + 1
}

/// Trains and evaluates one run per value with shared seeds and data.
pub fn ablation_sweep(base: &ImageLlm, axis: SweepAxis, values: &[String], cfg: &SweepConfig) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(VillmError::Config("sweep needs at least one value".into()));
    }
    let grid = base.config.encoder.grid_side();
    let settings = values
        .iter()
        .map(|v| parse_value(axis, v, grid))
        .collect::<Result<Vec<_>>>()?;
    let train_ex = generate_examples(&SyntheticTask::new(cfg.task, cfg.n_train, cfg.raw_frames, cfg.data_seed))?;
    let eval_ex = generate_examples(&SyntheticTask::new(
        cfg.task,
        cfg.n_eval,
        cfg.raw_frames,
        cfg.data_seed.wrapping_add(1),
    ))?;
    let mut cached: Option<(usize, Vec<Sample>, Vec<Sample>)> = None;
    let mut rows = Vec::with_capacity(values.len());
    for (value, setting) in values.iter().zip(settings) {
        let mut tc = cfg.train.clone();
        match setting {
            Setting::Variant(v) => tc.variant = v,
            Setting::Frames(t) => tc.frames = t,
            Setting::Window(1) => tc.variant = Variant::Full,
            Setting::Window(w) => {
                tc.variant = Variant::WindowPooled;
                tc.spatial_window = w;
            }
        }
        let started = Instant::now();
        if cached.as_ref().map(|c| c.0) != Some(tc.frames) {
            cached = Some((tc.frames, to_samples(&train_ex, base, tc.frames)?, to_samples(&eval_ex, base, tc.frames)?));
        }
        let (_, train_set, eval_set) = cached.as_ref().expect("just filled");
        let needed = prompt_len(cfg.task, tc.frames + base.config.encoder.num_patches());
        let run_base;
        let base_ref = if needed > base.decoder.max_seq_len() {
            let mut b = base.clone();
            b.decoder = b.decoder.with_max_seq_len(needed);
            run_base = b;
            &run_base
        } else {
            base
        };
        let ckpt = train(base_ref, train_set, &tc)?;
        let report = evaluate(&base_ref.decoder, &ckpt.adapters, eval_set, cfg.task.name(), &tc.echo())?;
        log::info!("{axis}={value}: accuracy {:.4}", report.accuracy);
        rows.push(SweepRow {
            axis_value: value.clone(),
            task: cfg.task.to_string(),
            accuracy: report.accuracy,
            train_loss_final: ckpt.final_loss().unwrap_or(f64::NAN),
            wall_seconds: cfg.record_time.then(|| started.elapsed().as_secs_f64()),
        });
    }
    Ok(SweepResult {
        axis,
        config: format!("values={} {}", values.join(";"), cfg.echo()),
        rows,
    })
}
