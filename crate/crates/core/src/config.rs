//! Run configuration: architecture toggles, data, optimization and evaluation settings.
//!
//! Every section rejects unknown keys; omitted keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::Interference;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Seconds per clip; one video frame per second.
    pub frames: usize,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub seed: u64,
    /// Probability that both shapes sound.
    pub multi_source: f64,
    /// Probability that a single-source scene also shows the silent shape.
    pub distractor: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            frames: 4,
            train_clips: 200,
            eval_clips: 50,
            seed: 0,
            multi_source: 0.1,
            distractor: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Epochs at which the learning rate is multiplied by `gamma`; defaults to 50% and 75%.
    pub milestones: Option<Vec<usize>>,
    pub gamma: f64,
    /// Stop once the train-set J&F reaches this value.
    pub early_stop_jf: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 60,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            milestones: None,
            gamma: 0.1,
            early_stop_jf: None,
        }
    }
}

/// Test-time audio interference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    #[serde(alias = "clean")]
    None,
    Brownian,
    ChirpTrain,
}

impl NoiseKind {
    pub fn interference(self) -> Option<Interference> {
        match self {
            NoiseKind::None => None,
            NoiseKind::Brownian => Some(Interference::Brownian),
            NoiseKind::ChirpTrain => Some(Interference::ChirpTrain),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub noise: NoiseKind,
    /// Interference RMS relative to the signal RMS.
    pub scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            noise: NoiseKind::None,
            scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let d = &self.data;
        if d.frames == 0 || d.train_clips == 0 || d.eval_clips == 0 {
            return bad("data.frames, data.train_clips and data.eval_clips must be positive");
        }
        if !(0.0..=1.0).contains(&d.multi_source) || !(0.0..=1.0).contains(&d.distractor) {
            return bad("data.multi_source and data.distractor are probabilities");
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive");
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return bad("train.optimizer has out-of-range values");
        }
        if !(t.gamma > 0.0) {
            return bad("train.gamma must be positive");
        }
        if let Some(jf) = t.early_stop_jf {
            if !(0.0..=1.0).contains(&jf) {
                return bad("train.early_stop_jf must lie in [0, 1]");
            }
        }
        if !(self.eval.scale >= 0.0) || !self.eval.scale.is_finite() {
            return bad("eval.scale must be a non-negative number");
        }
        Ok(())
    }

    /// SHA-256 of the sections that determine a trained model (`model`, `data`, `train`).
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            model: &'a ModelConfig,
            data: &'a DataConfig,
            train: &'a TrainConfig,
        }
        let json = serde_json::to_string(&Hashed {
            model: &self.model,
            data: &self.data,
            train: &self.train,
        })
        .expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Milestones of the step schedule.
    pub fn milestones(&self) -> Vec<usize> {
        self.train
            .milestones
            .clone()
            .unwrap_or_else(|| crate::optim::MultiStepLr::standard(self.train.optimizer.lr, self.train.epochs).milestones)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.height, 64);
        assert_eq!(c.data.train_clips, 200);
        assert_eq!(c.train.optimizer.lr, 1e-3);
        assert_eq!(c.milestones(), vec![30, 45]);
    }

    #[test]
    fn unknown_keys_are_errors_in_every_section() {
        for text in [
            r#"{"extra": 1}"#,
            r#"{"model": {"heigth": 64}}"#,
            r#"{"data": {"clips": 3}}"#,
            r#"{"train": {"optimizer": {"momentum": 0.9}}}"#,
            r#"{"eval": {"noise": "brownian", "level": 1}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn enum_values_parse() {
        let c = RunConfig::from_json(
            r#"{"model": {"snrp": "post", "rm": "straight", "branch": "a2v", "pairing": "textual"},
                "eval": {"noise": "chirp_train", "scale": 0.2}}"#,
        )
        .unwrap();
        assert_eq!(c.eval.noise, NoiseKind::ChirpTrain);
        assert_eq!(RunConfig::from_json(r#"{"eval": {"noise": "clean"}}"#).unwrap().eval.noise, NoiseKind::None);
        assert!(RunConfig::from_json(r#"{"model": {"rm": "sub"}}"#).is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        for text in [
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"model": {"height": 40}}"#,
            r#"{"data": {"distractor": 1.5}}"#,
            r#"{"eval": {"scale": -0.1}}"#,
            r#"{"train": {"optimizer": {"lr": 0}}}"#,
        ] {
            assert!(RunConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn hash_tracks_training_sections_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.noise = NoiseKind::Brownian;
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
        let round = RunConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(round.config_hash(), a.config_hash());
    }
}
