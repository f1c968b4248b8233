use std::fmt;
use std::str::FromStr;

use crate::error::{Result, VillmError};
use crate::manifest::Manifest;

/// Which adapters feed the prompt and which of them train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `[g_t(t); g_z(z)]`, both adapters train.
    Full,
    /// `[g_z(t); g_z(z)]` through the single alignment module.
    NoTemporalModule,
    /// `[g_z(z)]`
    SpatialOnly,
    /// `[g_t(t)]`
    TemporalOnly,
    /// `[g_t(t); mlp(g_z(z))]` with a freshly initialized MLP.
    WithExtraMlp,
    /// `[g_t(t); g_z(window_pool(z))]`
    WindowPooled,
    /// As `Full`, with `g_z` frozen.
    FrozenGz,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoTemporalModule,
        Variant::SpatialOnly,
        Variant::TemporalOnly,
        Variant::WithExtraMlp,
        Variant::WindowPooled,
        Variant::FrozenGz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTemporalModule => "no-temporal-module",
            Variant::SpatialOnly => "spatial-only",
            Variant::TemporalOnly => "temporal-only",
            Variant::WithExtraMlp => "with-extra-mlp",
            Variant::WindowPooled => "window-pooled",
            Variant::FrozenGz => "frozen-gz",
        }
    }

    pub fn has_temporal_module(self) -> bool {
        !matches!(self, Variant::NoTemporalModule | Variant::SpatialOnly)
    }

    pub fn uses_temporal_tokens(self) -> bool {
        self != Variant::SpatialOnly
    }

    pub fn uses_spatial_tokens(self) -> bool {
        self != Variant::TemporalOnly
    }

    pub fn trains_g_z(self) -> bool {
        !matches!(self, Variant::TemporalOnly | Variant::FrozenGz)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = VillmError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                VillmError::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub frames: usize,
    pub seed: u64,
    pub variant: Variant,
    /// `[Q_t; Q_z]` when true, `[Q_z; Q_t]` otherwise.
    pub temporal_first: bool,
    /// Window side for the window-pooled variant.
    pub spatial_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: 3,
            frames: 8,
            seed: 0,
            variant: Variant::Full,
            temporal_first: true,
            spatial_window: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VillmError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.frames == 0 {
            return bad("frames must be at least 1");
        }
        if self.spatial_window == 0 {
            return bad("spatial window must be at least 1");
        }
        Ok(())
    }

    pub fn write_manifest(&self, m: &mut Manifest) {
        m.set("variant", self.variant)
            .set("learning_rate", self.learning_rate)
            .set("batch_size", self.batch_size)
            .set("epochs", self.epochs)
            .set("frames", self.frames)
            .set("seed", self.seed)
            .set("temporal_first", self.temporal_first)
            .set("spatial_window", self.spatial_window);
    }

    pub fn read_manifest(m: &Manifest) -> Result<Self> {
        Ok(Self {
            variant: m.get("variant")?.parse()?,
            learning_rate: m.parse_value("learning_rate")?,
            batch_size: m.parse_value("batch_size")?,
            epochs: m.parse_value("epochs")?,
            frames: m.parse_value("frames")?,
            seed: m.parse_value("seed")?,
            temporal_first: m.parse_value("temporal_first")?,
            spatial_window: m.parse_value("spatial_window")?,
        })
    }

    /// One-line `key=value` echo.
    pub fn echo(&self) -> String {
        let mut m = Manifest::new();
        self.write_manifest(&mut m);
        m.entries().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.epochs, c.frames), (2e-5, 32, 3, 8));
        assert_eq!(c.variant, Variant::Full);
        assert!(c.temporal_first);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("fancy".parse::<Variant>().is_err());
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let c = TrainConfig {
            learning_rate: 0.03,
            variant: Variant::WithExtraMlp,
            ..Default::default()
        };
        let mut m = Manifest::new();
        c.write_manifest(&mut m);
        assert_eq!(TrainConfig::read_manifest(&m).unwrap(), c);
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..c }.validate().is_err());
    }
}
