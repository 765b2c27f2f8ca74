//! Run configuration. Files are TOML; every field has a default, so a file
//! only needs the values it changes. CLI flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, Scenario};
use crate::error::{Error, Result};
use crate::hypgeom::{ExpMapVariant, GAMMA_FLOOR};
use crate::model::ModelShape;
use crate::prototype::{EmaMode, Geometry};

/// Server-side supervised pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub lr_power: f64,
    pub momentum: f64,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
    pub classifier_lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            batch_size: 16,
            lr: 5e-3,
            lr_power: 0.9,
            momentum: 0.9,
            classifier_epochs: 8,
            classifier_batch_size: 88,
            classifier_lr: 0.05,
        }
    }
}

/// Component switches used for ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub clustering_loss: bool,
    pub weather_bn: bool,
    pub queue_agg: bool,
    pub geometry: Geometry,
    pub exp_map: ExpMapVariant,
    pub ema_mode: EmaMode,
    pub learn_curvature: bool,
    /// Weight the client mean by local sample counts instead of the plain mean.
    pub weighted_client_mean: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            clustering_loss: true,
            weather_bn: true,
            queue_agg: true,
            geometry: Geometry::Hyperbolic,
            exp_map: ExpMapVariant::Printed,
            ema_mode: EmaMode::Coordinate,
            learn_curvature: true,
            weighted_client_mean: false,
        }
    }
}

/// Names accepted by `--ablate`.
pub const ABLATIONS: [&str; 6] = ["clustering", "weather_bn", "queue", "hyperbolic", "curvature", "all"];

impl Toggles {
    /// Turns off one component by name.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name.trim() {
            "clustering" | "clustering_loss" => self.clustering_loss = false,
            "weather_bn" | "bn" => self.weather_bn = false,
            "queue" | "queue_agg" => self.queue_agg = false,
            "hyperbolic" => self.geometry = Geometry::Euclidean,
            "curvature" => self.learn_curvature = false,
            "all" => {
                self.clustering_loss = false;
                self.weather_bn = false;
                self.queue_agg = false;
            }
            "" | "none" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// FedAvg with plain self-training: no clustering, one shared BN bank, no queue.
    pub fn baseline() -> Toggles {
        let mut t = Toggles::default();
        t.ablate("all").expect("known ablation");
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub lambda_cl: f64,
    /// Client prototype smoothing rate.
    pub beta: f64,
    /// Server prototype smoothing rate.
    pub beta_prime: f64,
    pub queue_len: usize,
    pub gamma_init: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub curvature_lr: f64,
    /// Curvature gradients are clipped to this magnitude before the step.
    pub curvature_clip: f64,
    /// Worker threads for client rounds; results do not depend on it.
    pub workers: usize,
    /// Evaluate the global model every this many rounds (the last round is always evaluated).
    pub eval_every: usize,
    /// Write a checkpoint of the global model after every round.
    pub checkpoint_rounds: bool,
    /// Record wall-clock time in the ledger (breaks byte-for-byte replay).
    pub record_wall_time: bool,
    pub toggles: Toggles,
    pub pretrain: PretrainConfig,
    pub model: ModelShape,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scenario: Scenario::I,
            rounds: 100,
            clients_per_round: 5,
            lambda_cl: 140.0,
            beta: 0.85,
            beta_prime: 0.85,
            queue_len: 5,
            gamma_init: 0.1,
            local_epochs: 1,
            batch_size: 8,
            lr: 1e-4,
            momentum: 0.0,
            curvature_lr: 1e-3,
            curvature_clip: 1.0,
            workers: 1,
            eval_every: 1,
            checkpoint_rounds: false,
            record_wall_time: false,
            toggles: Toggles::default(),
            pretrain: PretrainConfig::default(),
            model: ModelShape::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.clients_per_round == 0 {
            return fail("clients_per_round must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.beta_prime) {
            return fail("beta and beta_prime must lie in [0, 1]");
        }
        if !(self.gamma_init.is_finite() && self.gamma_init >= GAMMA_FLOOR) {
            return fail("gamma_init must be finite and at least the curvature floor");
        }
        if self.lambda_cl < 0.0 || !self.lambda_cl.is_finite() {
            return fail("lambda_cl must be non-negative");
        }
        for (name, v) in [
            ("lr", self.lr),
            ("curvature_lr", self.curvature_lr),
            ("curvature_clip", self.curvature_clip),
            ("pretrain.lr", self.pretrain.lr),
            ("pretrain.classifier_lr", self.pretrain.classifier_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.pretrain.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.pretrain.batch_size == 0 || self.pretrain.classifier_batch_size == 0 {
            return fail("batch sizes must be positive");
        }
        if self.workers == 0 {
            return fail("workers must be positive");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive");
        }
        if self.model.input_dim != self.data.input_dim {
            return fail("model.input_dim must equal data.input_dim");
        }
        if self.model.classes != self.data.car_classes {
            return fail("model.classes must equal data.car_classes");
        }
        if self.model.hidden.contains(&0) {
            return fail("hidden widths must be positive");
        }
        self.data.validate()
    }

    /// Applies a comma-separated `--ablate` list.
    pub fn apply_ablations(&mut self, list: &str) -> Result<()> {
        for name in list.split(',') {
            self.toggles.ablate(name)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn default_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(
            (c.lambda_cl, c.beta, c.beta_prime, c.queue_len, c.gamma_init, c.rounds, c.clients_per_round),
            (140.0, 0.85, 0.85, 5, 0.1, 100, 5)
        );
        assert_eq!((c.pretrain.epochs, c.pretrain.batch_size), (5, 16));
        assert_eq!(c.lr, 1e-4);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("rounds = 3\nscenario = \"iii\"\n[toggles]\nqueue_agg = false\n").unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.scenario, Scenario::III);
        assert!(!cfg.toggles.queue_agg);
        assert!(cfg.toggles.weather_bn);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in ["beta = 1.5", "gamma_init = 0.0", "unknown_key = 1", "workers = 0", "rounds = \"x\""] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn ablations() {
        let mut cfg = RunConfig::default();
        cfg.apply_ablations("queue,clustering").unwrap();
        assert!(!cfg.toggles.queue_agg && !cfg.toggles.clustering_loss && cfg.toggles.weather_bn);
        assert!(cfg.apply_ablations("bogus").is_err());
        let b = Toggles::baseline();
        assert!(!b.queue_agg && !b.clustering_loss && !b.weather_bn);
    }
}
