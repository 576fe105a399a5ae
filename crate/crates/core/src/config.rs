//! Merged run configuration, read from TOML and identified by a content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionConfig;
use crate::classifier::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluation::MatchMode;
use crate::io::sha256_hex;
use crate::phantom::PhantomConfig;
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Require IoU above this value for a match instead of any intersection.
    pub strict_iou: Option<f64>,
}

impl EvalConfig {
    pub fn match_mode(&self) -> MatchMode {
        match self.strict_iou {
            Some(threshold) => MatchMode::StrictIou { threshold },
            None => MatchMode::Intersect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        self.attribution.validate()?;
        self.pipeline.validate()?;
        if let Some(t) = self.eval.strict_iou {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!("strict_iou must be in [0, 1), got {t}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical sorted-key JSON form, so key order and
    /// formatting in the source file do not matter.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        sha256_hex(v.to_string().as_bytes())
    }

    /// First 16 hex digits of [`RunConfig::hash`].
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip_and_hash() {
        let c = RunConfig::default();
        let text = c.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = "[pipeline]\nt_high = 0.05\niter_limit = 4\n[train]\niterations = 9\nlearning_rate = 0.02\n";
        let b = "[train]\nlearning_rate = 0.02\niterations = 9\n\n[pipeline]\niter_limit = 4\nt_high = 0.05\n";
        let (x, y) = (RunConfig::from_toml_str(a).unwrap(), RunConfig::from_toml_str(b).unwrap());
        assert_eq!(x.hash(), y.hash());
        assert_eq!(x.pipeline.iter_limit, 4);
        let c = RunConfig::from_toml_str("[pipeline]\nt_high = 0.06\niter_limit = 4\n").unwrap();
        assert_ne!(c.hash(), x.hash());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::from_toml_str("[pipeline]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("[pipeline]\niter_limit = 0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("[eval]\nstrict_iou = 1.5\n"), Err(Error::Config(_))));
        let s = RunConfig::from_toml_str("[eval]\nstrict_iou = 0.5\n").unwrap();
        assert_eq!(s.eval.match_mode(), MatchMode::StrictIou { threshold: 0.5 });
    }
}
