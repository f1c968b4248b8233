use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use villm_core::base::ImageLlm;
use villm_core::encoder::VisualEncoder;
use villm_core::manifest::Manifest;
use villm_core::Result;

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Provenance record written next to a command's outputs.
pub struct RunManifest {
    m: Manifest,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        let mut m = Manifest::new();
        m.set("format", "villm-run")
            .set("command", command)
            .set("argv", std::env::args().collect::<Vec<_>>().join(" ").replace('\n', " "))
            .set("started_unix", unix_now());
        Self { m }
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.m.set(key, value);
        self
    }

    /// Every `key=value` pair of a one-line config echo, under `config.`.
    pub fn config(&mut self, echo: &str) -> &mut Self {
        for kv in echo.split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                self.m.set(&format!("config.{k}"), v);
            }
        }
        self
    }

    pub fn encoder_hashes(&mut self, encoder: &VisualEncoder) -> &mut Self {
        for (n, t) in encoder.named_tensors() {
            self.m.set(&format!("hash.encoder.{n}"), t.content_hash());
        }
        self
    }

    pub fn base_hashes(&mut self, base: &ImageLlm) -> &mut Self {
        self.m
            .set("base.config_key", base.config.key())
            .set("base.backbone_hash", base.backbone_hash());
        for (n, h) in base.tensor_hashes() {
            self.m.set(&format!("hash.{n}"), h);
        }
        self
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.m.set("finished_unix", unix_now());
        self.m.save(path)
    }
}

/// `run.manifest` inside an output directory, or `<stem>.run.manifest`
/// beside an output file.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        return out.join("run.manifest");
    }
    let stem = out.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.run.manifest"))
}
