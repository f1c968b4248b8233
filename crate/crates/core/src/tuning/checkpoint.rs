//! Training state on disk: a manifest, the adapter tensors and the Adam
//! moments, all VTNS.

use std::path::Path;

use crate::error::{IoContext, Result, VillmError};
use crate::manifest::Manifest;
use crate::tensor::{hash_tensors, vtns};

use super::config::TrainConfig;
use super::model::AdapterStack;
use super::optim::Adam;

pub const FORMAT: &str = "villm-checkpoint";
pub const VERSION: u32 = 1;
const MANIFEST: &str = "checkpoint.manifest";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub adapters: AdapterStack,
    pub optimizer: Adam,
    pub step: u64,
    /// Hash of the frozen encoder and decoder the adapters were trained on.
    pub backbone_hash: String,
    /// Mean training loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss accumulated so far in the current epoch.
    pub epoch_loss_sum: f64,
}

fn f64_bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_bits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| VillmError::Manifest(format!("bad float bits {s:?}: {e}")))
}

impl Checkpoint {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    /// Hash over adapter parameters and optimizer state.
    pub fn state_hash(&self) -> String {
        let tensors = self
            .adapters
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        hash_tensors(tensors)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
        let mut m = Manifest::new();
        m.set("format", FORMAT).set("version", VERSION);
        self.config.write_manifest(&mut m);
        m.set("D", self.adapters.g_z.in_dim())
            .set("K", self.adapters.g_z.out_dim())
            .set("step", self.step)
            .set("adam_t", self.optimizer.t)
            .set("backbone_hash", &self.backbone_hash)
            .set(
                "epoch_losses",
                self.epoch_losses.iter().map(|&v| f64_bits(v)).collect::<Vec<_>>().join(","),
            )
            .set("epoch_loss_sum", f64_bits(self.epoch_loss_sum))
            .set("state_hash", self.state_hash());
        self.adapters.save(dir)?;
        for (i, (name, _)) in self.adapters.trainable().iter().enumerate() {
            vtns::save(dir.join(format!("adam_m.{name}.vtns")), &self.optimizer.m[i])?;
            vtns::save(dir.join(format!("adam_v.{name}.vtns")), &self.optimizer.v[i])?;
        }
        m.save(dir.join(MANIFEST))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = Manifest::load(dir.join(MANIFEST))?;
        m.expect("format", FORMAT)?;
        m.expect("version", &VERSION.to_string())?;
        let config = TrainConfig::read_manifest(&m)?;
        let adapters = AdapterStack::load(dir, &config)?;
        let (d, k): (usize, usize) = (m.parse_value("D")?, m.parse_value("K")?);
        if (adapters.g_z.in_dim(), adapters.g_z.out_dim()) != (d, k) {
            return Err(VillmError::Manifest(format!("adapter shapes disagree with D={d} K={k}")));
        }
        let mut optimizer = Adam::new(config.learning_rate, &[]);
        for (name, t) in adapters.trainable() {
            let mm = vtns::load(dir.join(format!("adam_m.{name}.vtns")))?;
            let vv = vtns::load(dir.join(format!("adam_v.{name}.vtns")))?;
            if mm.dims() != t.dims() || vv.dims() != t.dims() {
                return Err(VillmError::Manifest(format!("optimizer moments for {name} have the wrong shape")));
            }
            optimizer.m.push(mm);
            optimizer.v.push(vv);
        }
        optimizer.t = m.parse_value("adam_t")?;
        let losses = m.get("epoch_losses")?;
        let epoch_losses = if losses.is_empty() {
            Vec::new()
        } else {
            losses.split(',').map(parse_bits).collect::<Result<_>>()?
        };
        let ckpt = Self {
            config,
            adapters,
            optimizer,
            step: m.parse_value("step")?,
            backbone_hash: m.get("backbone_hash")?.to_string(),
            epoch_losses,
            epoch_loss_sum: parse_bits(m.get("epoch_loss_sum")?)?,
        };
        m.expect("state_hash", &ckpt.state_hash())?;
        Ok(ckpt)
    }
}
