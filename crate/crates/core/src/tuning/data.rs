//! JSON-lines instruction records and their encoded form.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{sample_frames, VideoTensor, VisualEncoder};
use crate::error::{IoContext, Result, VillmError};
use crate::pooling::PooledFeatures;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    /// VTNS video path, relative to the dataset file's directory unless
    /// absolute.
    pub video: String,
    pub instruction: String,
    pub answer: String,
    pub id: String,
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<InstructionRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.io_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructionRecord = serde_json::from_str(&line)
            .map_err(|e| VillmError::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if rec.answer.is_empty() {
            return Err(VillmError::Dataset(format!("{}:{}: empty answer", path.display(), n + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[InstructionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .io_context(|| format!("writing {}", path.display()))
}

pub fn resolve_video(dataset_dir: &Path, video: &str) -> PathBuf {
    let p = Path::new(video);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dataset_dir.join(p)
    }
}

/// A record with its video already encoded and pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: PooledFeatures,
    pub instruction: String,
    pub answer: String,
}

impl Sample {
    pub fn from_video(
        id: impl Into<String>,
        video: &VideoTensor,
        encoder: &VisualEncoder,
        frames: usize,
        instruction: impl Into<String>,
        answer: impl Into<String>,
    ) -> Result<Self> {
        let sampled = sample_frames(video, frames)?;
        let x = encoder.encode(&sampled)?;
        Ok(Self {
            id: id.into(),
            features: PooledFeatures::from_embeddings(&x)?,
            instruction: instruction.into(),
            answer: answer.into(),
        })
    }
}

/// Loads, samples, encodes and pools every record of a JSONL dataset.
pub fn load_samples(path: impl AsRef<Path>, encoder: &VisualEncoder, frames: usize) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    read_jsonl(path)?
        .into_iter()
        .map(|r| {
            let vp = resolve_video(dir, &r.video);
            if !vp.exists() {
                return Err(VillmError::Dataset(format!("record {}: missing video {}", r.id, vp.display())));
            }
            let video = VideoTensor::load(&vp)?;
            Sample::from_video(r.id, &video, encoder, frames, r.instruction, r.answer)
        })
        .collect()
}
