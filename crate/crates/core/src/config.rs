//! Run configuration: a flat JSON object with `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decode::{GenMode, GenerationConfig};
use crate::error::{Error, Result};
use crate::gp::{GpPriorSpec, MeanMode};
use crate::seq2seq::{ModelConfig, Variant};
use crate::train::TrainOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Synonym,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub variant: Variant,
    pub v: f64,
    pub r: f64,
    pub sigma2: f64,
    pub mean_mode: MeanMode,
    pub standardize: bool,
    /// Must match the corpus vocabulary when set.
    pub vocab: Option<usize>,
    pub emb: usize,
    pub hidden: usize,
    pub latent: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub tau: f64,
    pub beam: usize,
    pub max_len: usize,
    /// Directory written by `corpus-gen`.
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Evaluate on at most this many sources.
    pub eval_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gp = GpPriorSpec::default();
        Self {
            task: Task::Copy,
            variant: Variant::Gp,
            v: gp.v,
            r: gp.r,
            sigma2: gp.sigma2,
            mean_mode: gp.mean_mode,
            standardize: gp.standardize,
            vocab: None,
            emb: 32,
            hidden: 64,
            latent: 64,
            lr: 1e-4,
            epochs: 30,
            batch_size: 32,
            patience: 10,
            seed: 0,
            tau: 1.0,
            beam: 10,
            max_len: 16,
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("run"),
            eval_limit: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies `key=value`; the value is read as JSON, or as a bare string
    /// when it does not parse.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got `{assignment}`")))?;
        let key = key.trim();
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("config is an object");
        if !map.contains_key(key) {
            return Err(Error::config(format!("unknown config key `{key}`")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(obj).map_err(|e| Error::config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn with_overrides<S: AsRef<str>>(mut self, sets: &[S]) -> Result<Self> {
        for s in sets {
            self.set(s.as_ref())?;
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn gp_spec(&self) -> Result<GpPriorSpec> {
        let spec = GpPriorSpec::new(self.v, self.r, self.sigma2, self.mean_mode)?;
        Ok(if self.standardize { spec } else { spec.without_standardization() })
    }

    pub fn model_config(&self, vocab: usize) -> Result<ModelConfig> {
        if let Some(v) = self.vocab {
            if v != vocab {
                return Err(Error::config(format!("config vocab {v} differs from corpus vocab {vocab}")));
            }
        }
        let spec = match self.variant {
            Variant::Gp => Some(self.gp_spec()?),
            _ => None,
        };
        ModelConfig::new(vocab, self.emb, self.hidden, self.latent, self.variant, spec)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn generation(&self, mode: GenMode) -> GenerationConfig {
        GenerationConfig {
            mode,
            tau: self.tau,
            beam: self.beam,
            max_len: self.max_len,
            seed: self.seed,
            num_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 || self.beam == 0 || self.max_len == 0 {
            return Err(Error::config("batch_size, beam and max_len must be at least 1"));
        }
        if self.variant == Variant::Gp {
            self.gp_spec()?;
        }
        self.generation(GenMode::Mean).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.patience, 10);
        assert_eq!(c.beam, 10);
        c.validate().unwrap();
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&["lr=0.003", "variant=normal", "out=/tmp/x", "vocab=50", "task=synonym"])
            .unwrap();
        assert_eq!(c.lr, 0.003);
        assert_eq!(c.variant, Variant::Normal);
        assert_eq!(c.out, PathBuf::from("/tmp/x"));
        assert_eq!(c.vocab, Some(50));
        assert_eq!(c.task, Task::Synonym);
        assert!(RunConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["lr"]).is_err());
        assert!(RunConfig::default().with_overrides(&["epochs=-1"]).is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = RunConfig::default().with_overrides(&["seed=9"]).unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<RunConfig>("{\"bogus\": 1}").is_err());
        let partial: RunConfig = serde_json::from_str("{\"epochs\": 3}").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.hidden, 64);
    }

    #[test]
    fn grid_bounds_enforced() {
        let c = RunConfig::default().with_overrides(&["v=1000"]).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::default().with_overrides(&["v=1000", "variant=normal"]).unwrap();
        assert!(c.validate().is_ok());
    }

    #[test]
    fn model_config_checks_vocab() {
        let c = RunConfig::default().with_overrides(&["vocab=40"]).unwrap();
        assert!(c.model_config(50).is_err());
        assert_eq!(c.model_config(40).unwrap().vocab, 40);
    }
}
