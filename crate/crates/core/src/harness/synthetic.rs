//! Procedurally drawn video QA tasks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{VideoTensor, VisualEncoder};
use crate::error::{IoContext, Result, VillmError};
use crate::pooling::{spatial_pool, temporal_pool};
use crate::rng;
use crate::tensor::Tensor;
use crate::tuning::data::{write_jsonl, InstructionRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// A dot moves left, right, up or down.
    Direction,
    /// A square and a bar appear one after the other.
    Order,
    /// A square sits still in one quadrant.
    Static,
}

pub const DIRECTION_QUESTION: &str = "Which direction does the dot move?";
pub const DIRECTION_ANSWERS: [&str; 4] = ["left", "right", "up", "down"];
pub const STATIC_QUESTION: &str = "Which quadrant holds the square?";
pub const STATIC_ANSWERS: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];
pub const ORDER_QUESTION: &str = "Does the square appear before or after the bar?";
pub const ORDER_ANSWERS: [&str; 2] = ["before", "after"];
pub const WHERE_QUESTION: &str = "Where is the dot?";

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Direction => "direction",
            TaskKind::Order => "order",
            TaskKind::Static => "static",
        }
    }

    pub fn answers(self) -> &'static [&'static str] {
        match self {
            TaskKind::Direction => &DIRECTION_ANSWERS,
            TaskKind::Order => &ORDER_ANSWERS,
            TaskKind::Static => &STATIC_ANSWERS,
        }
    }

    pub fn question(self) -> &'static str {
        match self {
            TaskKind::Direction => DIRECTION_QUESTION,
            TaskKind::Order => ORDER_QUESTION,
            TaskKind::Static => STATIC_QUESTION,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = VillmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direction" => Ok(TaskKind::Direction),
            "order" => Ok(TaskKind::Order),
            "static" => Ok(TaskKind::Static),
            _ => Err(VillmError::Config(format!(
                "unknown task `{s}` (expected direction, order or static)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub n_samples: usize,
    pub frames: usize,
    pub seed: u64,
    pub image_size: usize,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, n_samples: usize, frames: usize, seed: u64) -> Self {
        Self {
            kind,
            n_samples,
            frames,
            seed,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticExample {
    pub id: String,
    pub class: usize,
    pub video: VideoTensor,
    pub instruction: String,
    pub answer: String,
}

struct Canvas {
    frames: usize,
    side: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(frames: usize, side: usize) -> Self {
        Self {
            frames,
            side,
            data: vec![0.0; frames * side * side * 3],
        }
    }

    /// Fills an axis-aligned rectangle on frame `f` with `rgb`.
    fn rect(&mut self, f: usize, y: usize, x: usize, h: usize, w: usize, rgb: [f64; 3]) {
        let s = self.side;
        for yy in y..(y + h).min(s) {
            for xx in x..(x + w).min(s) {
                let o = ((f * s + yy) * s + xx) * 3;
                self.data[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }

    fn into_video(self, id: &str) -> Result<VideoTensor> {
        let dims = vec![self.frames, self.side, self.side, 3];
        VideoTensor::new(Tensor::new(dims, self.data)?, id)
    }
}

const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
const ORANGE: [f64; 3] = [1.0, 0.5, 0.0];

fn dot_size(side: usize) -> usize {
    (side / 8).max(1)
}

/// Dot travelling `span` pixels; class 0 left, 1 right, 2 up, 3 down.
fn draw_direction(c: &mut Canvas, class: usize, r: &mut ChaCha8Rng) {
    let s = c.side;
    let d = dot_size(s);
    let span = s * 5 / 8;
    let start = r.random_range(0..=s - d - span);
    let perp = r.random_range(0..=s - d);
    let last = (c.frames - 1).max(1);
    for f in 0..c.frames {
        let off = ((f * span) as f64 / last as f64).round() as usize;
        let pos = if class % 2 == 1 { start + off } else { start + span - off };
        if class < 2 {
            c.rect(f, perp, pos, d, d, WHITE);
        } else {
            c.rect(f, pos, perp, d, d, WHITE);
        }
    }
}

fn quadrant_square(side: usize, class: usize, r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let half = side / 2;
    let sq = side * 3 / 16;
    let y = r.random_range(0..=half - sq) + half * (class / 2);
    let x = r.random_range(0..=half - sq) + half * (class % 2);
    (y, x, sq)
}

fn draw_static(c: &mut Canvas, class: usize, r: &mut ChaCha8Rng) {
    let (y, x, sq) = quadrant_square(c.side, class, r);
    for f in 0..c.frames {
        c.rect(f, y, x, sq, sq, WHITE);
    }
}

/// Square and bar each shown for half the clip; class 0 square first.
fn draw_order(c: &mut Canvas, class: usize, r: &mut ChaCha8Rng) {
    let s = c.side;
    let sq = s * 3 / 16;
    let (sy, sx) = (r.random_range(0..=s - sq), r.random_range(0..=s - sq));
    let (bh, bw) = ((s / 16).max(1), s / 2);
    let (by, bx) = (r.random_range(0..=s - bh), r.random_range(0..=s - bw));
    let split = c.frames.div_ceil(2);
    for f in 0..c.frames {
        let square_now = (f < split) == (class == 0);
        if square_now {
            c.rect(f, sy, sx, sq, sq, WHITE);
        } else {
            c.rect(f, by, bx, bh, bw, ORANGE);
        }
    }
}

/// Generates the examples of `task`. Classes cycle `i mod classes`, so
/// counts differ by at most one.
pub fn generate_examples(task: &SyntheticTask) -> Result<Vec<SyntheticExample>> {
    let min_frames = if task.kind == TaskKind::Static { 1 } else { 2 };
    if task.frames < min_frames {
        return Err(VillmError::Config(format!(
            "{} clips need at least {min_frames} frames",
            task.kind
        )));
    }
    if task.image_size < 16 {
        return Err(VillmError::Config("synthetic frames must be at least 16 pixels".into()));
    }
    let mut r = rng::stream(task.seed, &format!("synthetic/{}", task.kind));
    let classes = task.kind.answers().len();
    (0..task.n_samples)
        .map(|i| {
            let class = i % classes;
            let id = format!("{}-{i:05}", task.kind);
            let mut c = Canvas::new(task.frames, task.image_size);
            match task.kind {
                TaskKind::Direction => draw_direction(&mut c, class, &mut r),
                TaskKind::Static => draw_static(&mut c, class, &mut r),
                TaskKind::Order => draw_order(&mut c, class, &mut r),
            }
            Ok(SyntheticExample {
                video: c.into_video(&id)?,
                id,
                class,
                instruction: task.kind.question().to_string(),
                answer: task.kind.answers()[class].to_string(),
            })
        })
        .collect()
}

/// Single-image questions used to pretrain the base model: where a dot
/// sits, and which quadrant holds a square.
pub fn pretraining_images(n: usize, image_size: usize, seed: u64) -> Result<Vec<SyntheticExample>> {
    let mut r = rng::stream(seed, "synthetic/pretraining");
    let s = image_size;
    let d = dot_size(s);
    let (lo, hi) = (s / 4, s * 5 / 8);
    (0..n)
        .map(|i| {
            let class = i % 4;
            let id = format!("image-{i:05}");
            let mut c = Canvas::new(1, s);
            let (instruction, answer) = if r.random_range(0..2) == 0 {
                let (y, x) = match class {
                    0 => (r.random_range(lo..=hi), r.random_range(0..=lo)),
                    1 => (r.random_range(lo..=hi), r.random_range(hi..=s - d)),
                    2 => (r.random_range(0..=lo), r.random_range(lo..=hi)),
                    _ => (r.random_range(hi..=s - d), r.random_range(lo..=hi)),
                };
                c.rect(0, y, x, d, d, WHITE);
                (WHERE_QUESTION, DIRECTION_ANSWERS[class])
            } else {
                let (y, x, sq) = quadrant_square(s, class, &mut r);
                c.rect(0, y, x, sq, sq, WHITE);
                (STATIC_QUESTION, STATIC_ANSWERS[class])
            };
            Ok(SyntheticExample {
                video: c.into_video(&id)?,
                id,
                class,
                instruction: instruction.into(),
                answer: answer.into(),
            })
        })
        .collect()
}

/// Checks that time-averaged features cannot tell a clip from its
/// reversal while per-frame features can.
pub fn reversal_check(video: &VideoTensor, encoder: &VisualEncoder) -> Result<()> {
    let fwd = encoder.encode(video)?;
    let rev = encoder.encode(&video.reversed()?)?;
    let (zf, zr) = (temporal_pool(&fwd)?, temporal_pool(&rev)?);
    let gap = zf
        .data()
        .iter()
        .zip(zr.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if gap > 1e-9 {
        return Err(VillmError::Dataset(format!(
            "{}: time-averaged features of the clip and its reversal differ by {gap:e}",
            video.source_id
        )));
    }
    if spatial_pool(&fwd)? == spatial_pool(&rev)? {
        return Err(VillmError::Dataset(format!(
            "{}: per-frame features do not change under reversal",
            video.source_id
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub records: usize,
    pub per_class: Vec<(String, usize)>,
}

/// Writes `videos/<id>.vtns` and `data.jsonl` under `out_dir`. Direction
/// clips are checked with [`reversal_check`].
pub fn gen_synthetic_dataset(task: &SyntheticTask, out_dir: impl AsRef<Path>, encoder: &VisualEncoder) -> Result<DatasetSummary> {
    let out_dir = out_dir.as_ref();
    let videos = out_dir.join("videos");
    std::fs::create_dir_all(&videos).io_context(|| format!("creating {}", videos.display()))?;
    let examples = generate_examples(task)?;
    let mut records = Vec::with_capacity(examples.len());
    let mut per_class: Vec<(String, usize)> = task.kind.answers().iter().map(|a| (a.to_string(), 0)).collect();
    for ex in &examples {
        if task.kind == TaskKind::Direction {
            reversal_check(&ex.video, encoder)?;
        }
        let rel = format!("videos/{}.vtns", ex.id);
        ex.video.save(out_dir.join(&rel))?;
        per_class[ex.class].1 += 1;
        records.push(InstructionRecord {
            video: rel,
            instruction: ex.instruction.clone(),
            answer: ex.answer.clone(),
            id: ex.id.clone(),
        });
    }
    write_jsonl(out_dir.join("data.jsonl"), &records)?;
    Ok(DatasetSummary {
        records: records.len(),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_balanced() {
        let ex = generate_examples(&SyntheticTask::new(TaskKind::Direction, 100, 8, 7)).unwrap();
        for c in 0..4 {
            assert_eq!(ex.iter().filter(|e| e.class == c).count(), 25);
        }
        let ex = generate_examples(&SyntheticTask::new(TaskKind::Order, 5, 8, 7)).unwrap();
        assert_eq!(ex.iter().filter(|e| e.answer == "before").count(), 3);
    }

    #[test]
    fn same_seed_same_clips() {
        let t = SyntheticTask::new(TaskKind::Order, 6, 8, 3);
        assert_eq!(generate_examples(&t).unwrap(), generate_examples(&t).unwrap());
        let other = SyntheticTask { seed: 4, ..t.clone() };
        assert_ne!(generate_examples(&t).unwrap(), generate_examples(&other).unwrap());
    }

    #[test]
    fn direction_reversal_swaps_opposite_classes() {
        let ex = generate_examples(&SyntheticTask::new(TaskKind::Direction, 4, 8, 1)).unwrap();
        let enc = VisualEncoder::new(Default::default()).unwrap();
        for e in &ex {
            reversal_check(&e.video, &enc).unwrap();
            // The dot is visible on every frame.
            for f in 0..8 {
                assert!(e.video.frame(f).iter().sum::<f64>() > 0.0);
            }
        }
    }

    #[test]
    fn static_clips_fail_the_reversal_check() {
        let ex = generate_examples(&SyntheticTask::new(TaskKind::Static, 1, 4, 1)).unwrap();
        let enc = VisualEncoder::new(Default::default()).unwrap();
        assert!(reversal_check(&ex[0].video, &enc).is_err());
    }

    #[test]
    fn bad_tasks_are_rejected() {
        assert!("spin".parse::<TaskKind>().is_err());
        assert!(generate_examples(&SyntheticTask::new(TaskKind::Direction, 4, 1, 0)).is_err());
        assert_eq!(generate_examples(&SyntheticTask::new(TaskKind::Static, 2, 1, 0)).unwrap().len(), 2);
    }

    #[test]
    fn pretraining_images_cover_both_questions() {
        let imgs = pretraining_images(40, 32, 0).unwrap();
        assert!(imgs.iter().any(|e| e.instruction == WHERE_QUESTION));
        assert!(imgs.iter().any(|e| e.instruction == STATIC_QUESTION));
        assert!(imgs.iter().all(|e| e.video.num_frames() == 1));
    }
}
