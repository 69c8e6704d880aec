//! Experiment configuration: one TOML file names the plant, the controller
//! flavor, the seed schedule, and the solver/model knobs; the same layout is
//! re-emitted as the run manifest so a finished run is reproducible from its
//! output directory alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gpmpc::controller::{reactor_economic_objective, reactor_tracking_objective, ChanceMode};
use gpmpc::learner::LearningConfig;
use gpmpc::plant::PlantConfig;
use gpmpc::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveChoice {
    /// Hold the reactor temperature at its setpoint.
    Tracking,
    /// Maximize the final polymer mass.
    Economic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Inducing points per state channel.
    pub n_inducing: usize,
    /// Random restarts per hyperparameter fit.
    pub fit_restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// OCP stopping tolerance (projected-gradient norm on the unit box).
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Plant TOML, resolved relative to the directory of this config file.
    pub plant_config: PathBuf,
    pub objective: ObjectiveChoice,
    /// false = constraints act on predicted means only (the ablation).
    pub chance_constraints: bool,
    /// Chance-constraint confidence ε.
    pub epsilon_confidence: f64,
    /// GP-controlled batch iterations after the PI seed batch.
    pub n_batch: usize,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub solver: SolverSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.plant_config.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.plant_config = dir.join(&cfg.plant_config);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !self.plant_config.exists() {
            return Err(Error::Config(format!(
                "plant_config: {} does not exist",
                self.plant_config.display()
            )));
        }
        if self.chance_constraints
            && !(self.epsilon_confidence > 0.5 && self.epsilon_confidence < 1.0)
        {
            return Err(Error::Config(format!(
                "epsilon_confidence must lie in (0.5, 1), got {}",
                self.epsilon_confidence
            )));
        }
        if self.model.n_inducing == 0 || self.model.fit_restarts == 0 {
            return Err(Error::Config(
                "model.n_inducing and model.fit_restarts must be at least 1".into(),
            ));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::Config(
                "solver.tol must be positive and solver.max_iter at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn chance_mode(&self) -> ChanceMode {
        if self.chance_constraints {
            ChanceMode::Chance
        } else {
            ChanceMode::MeanOnly
        }
    }

    pub fn learning_config(&self, plant: &PlantConfig) -> LearningConfig {
        let objective = match self.objective {
            ObjectiveChoice::Tracking => reactor_tracking_objective(&plant.constraints),
            ObjectiveChoice::Economic => reactor_economic_objective(),
        };
        LearningConfig {
            objective,
            chance_mode: self.chance_mode(),
            epsilon: self.epsilon_confidence,
            n_batch: self.n_batch,
            seeds: self.seeds.clone(),
            master_seed: self.master_seed,
            n_inducing: self.model.n_inducing,
            fit_restarts: self.model.fit_restarts,
            solver_tol: self.solver.tol,
            solver_max_iter: self.solver.max_iter,
        }
    }

    /// Write as the run manifest (atomic, TOML — reparses to an equal config).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
        gpmpc::util::write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped_plant() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/plant.toml")
    }

    fn minimal(plant: &Path, out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            plant_config: plant.to_path_buf(),
            objective: ObjectiveChoice::Tracking,
            chance_constraints: true,
            epsilon_confidence: 0.95,
            n_batch: 1,
            seeds: vec![3],
            master_seed: 7,
            out_dir: out.to_path_buf(),
            model: ModelSection {
                n_inducing: 8,
                fit_restarts: 1,
            },
            solver: SolverSection {
                tol: 1e-3,
                max_iter: 25,
            },
        }
    }

    #[test]
    fn manifest_round_trips_to_an_equal_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = minimal(&shipped_plant().canonicalize().unwrap(), dir.path());
        let manifest = dir.path().join("manifest.toml");
        cfg.save(&manifest).unwrap();
        let back = ExperimentConfig::load(&manifest).unwrap();
        assert_eq!(back, cfg, "save → load must be the identity");
    }

    #[test]
    fn relative_plant_path_resolves_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::copy(shipped_plant(), dir.path().join("plant.toml")).unwrap();
        let mut cfg = minimal(Path::new("plant.toml"), dir.path());
        cfg.out_dir = PathBuf::from("out");
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, toml::to_string_pretty(&cfg).unwrap()).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded.plant_config, dir.path().join("plant.toml"));
    }

    #[test]
    fn validation_rejects_missing_plant_and_empty_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = minimal(&dir.path().join("nope.toml"), dir.path());
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("plant_config"), "message must name the field: {err}");
        cfg.plant_config = shipped_plant();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![1];
        cfg.epsilon_confidence = 0.5;
        assert!(cfg.validate().is_err(), "ε = 0.5 gives no tightening at all");
        cfg.chance_constraints = false;
        assert!(
            cfg.validate().is_ok(),
            "ε unused in mean-only mode, any stored value is fine"
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<ExperimentConfig, _> =
            toml::from_str("typo_field = 3\nseeds = [1]");
        assert!(r.is_err(), "silent typos in configs are a footgun");
    }
}
