use serde::{Deserialize, Serialize};

use crate::data::{BlobConfig, ToyKind};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{Activation, Head, MlpSpec, TrainHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Toy1,
    Toy2,
    /// Clean multi-class blobs with a held-out split.
    Tabular,
    /// Blobs with label noise; scores rank misclassified test inputs.
    Misclass,
    /// Blobs; scores separate in-distribution test inputs from shifted ones.
    Ood,
}

impl Task {
    pub fn toy_kind(self) -> Option<ToyKind> {
        match self {
            Task::Toy1 => Some(ToyKind::Toy1),
            Task::Toy2 => Some(ToyKind::Toy2),
            _ => None,
        }
    }

    pub fn is_regression(self) -> bool {
        self.toy_kind().is_some()
    }
}

/// Hidden layout of the base network; input and output widths follow the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Dropout rate after every hidden layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub no_max: bool,
    pub separate_branches: bool,
    pub mc_dropout_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training samples per toy region before density weighting.
    pub n_per_region: usize,
    /// Test samples per toy region (an independent draw).
    pub n_test_per_region: usize,
    /// Relative sampling density per toy region; empty means uniform.
    pub density: Vec<f64>,
    pub blobs: BlobConfig,
    /// Fraction of training labels replaced by another class.
    pub label_noise: f64,
    pub ood_shifts: Vec<f64>,
    pub train_fraction: f64,
    pub mc_dropout_passes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_per_region: 2000,
            n_test_per_region: 200,
            density: Vec::new(),
            blobs: BlobConfig { classes: 4, n_per_class: 1000, dim: 4, spread: 0.45 },
            label_noise: 0.0,
            ood_shifts: Vec::new(),
            train_fraction: 0.8,
            mc_dropout_passes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub insertion_layer: usize,
    pub trunk_depth: usize,
    pub base: TrainHyper,
    pub cupid: TrainHyper,
    pub weights: LossWeights,
    #[serde(default)]
    pub ablations: Ablations,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Default configuration for each task.
    pub fn preset(task: Task) -> Self {
        let toy_weights = LossWeights { lambda1: 0.001, lambda2: 0.01 };
        let seeds = vec![0, 1, 2];
        match task {
            Task::Toy1 | Task::Toy2 => Self {
                task,
                model: ModelConfig { hidden: vec![64, 64], activation: Activation::Sigmoid, dropout: None },
                insertion_layer: 2,
                trunk_depth: 2,
                base: TrainHyper { epochs: 50, batch_size: 16, lr: 0.001 },
                cupid: TrainHyper { epochs: 50, batch_size: 8, lr: 0.001 },
                weights: toy_weights,
                ablations: Ablations::default(),
                seeds,
                data: DataConfig::default(),
            },
            Task::Tabular => Self {
                task,
                model: ModelConfig { hidden: vec![64, 64, 64], activation: Activation::Sigmoid, dropout: Some(0.1) },
                insertion_layer: 3,
                trunk_depth: 2,
                base: TrainHyper { epochs: 50, batch_size: 256, lr: 0.001 },
                cupid: TrainHyper { epochs: 50, batch_size: 256, lr: 0.0001 },
                weights: toy_weights,
                ablations: Ablations::default(),
                seeds,
                data: DataConfig {
                    blobs: BlobConfig { classes: 7, n_per_class: 1000, dim: 8, spread: 0.5 },
                    ..DataConfig::default()
                },
            },
            Task::Misclass | Task::Ood => {
                let ood = task == Task::Ood;
                Self {
                    task,
                    model: ModelConfig { hidden: vec![32, 32], activation: Activation::Sigmoid, dropout: None },
                    insertion_layer: if ood { 1 } else { 2 },
                    trunk_depth: 2,
                    base: TrainHyper { epochs: 50, batch_size: 16, lr: 0.001 },
                    cupid: TrainHyper { epochs: 50, batch_size: 16, lr: 0.001 },
                    weights: LossWeights { lambda1: 0.01, lambda2: 0.009 },
                    ablations: Ablations::default(),
                    seeds,
                    data: if ood {
                        DataConfig {
                            blobs: BlobConfig { spread: 0.7, ..DataConfig::default().blobs },
                            ood_shifts: vec![0.0, 1.75, 3.5, 7.0],
                            ..DataConfig::default()
                        }
                    } else {
                        DataConfig { label_noise: 0.1, ..DataConfig::default() }
                    },
                }
            }
        }
    }

    pub fn input_width(&self) -> usize {
        if self.task.is_regression() {
            1
        } else {
            self.data.blobs.dim
        }
    }

    pub fn output_width(&self) -> usize {
        if self.task.is_regression() {
            1
        } else {
            self.data.blobs.classes
        }
    }

    pub fn head(&self) -> Head {
        if self.task.is_regression() {
            Head::Regression
        } else {
            Head::SoftmaxClassification
        }
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.model.hidden);
        widths.push(self.output_width());
        let spec = MlpSpec::new(widths, self.model.activation, self.head());
        match self.model.dropout {
            Some(rate) => spec.with_hidden_dropout(rate),
            None => spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.mlp_spec();
        spec.validate()?;
        self.weights.validate()?;
        if self.insertion_layer == 0 || self.insertion_layer >= spec.num_layers() {
            return Err(Error::invalid(format!(
                "insertion layer {} outside 1..{}",
                self.insertion_layer,
                spec.num_layers()
            )));
        }
        if self.trunk_depth == 0 {
            return Err(Error::invalid("trunk depth must be at least 1"));
        }
        for (name, h) in [("base", &self.base), ("cupid", &self.cupid)] {
            if h.batch_size == 0 || !(h.lr > 0.0) || !h.lr.is_finite() {
                return Err(Error::invalid(format!("{name} hyperparameters need batch_size > 0 and lr > 0")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::invalid("seeds must be distinct"));
        }
        let d = &self.data;
        if let Some(kind) = self.task.toy_kind() {
            if d.n_per_region == 0 || d.n_test_per_region * kind.regions().len() < super::pipeline::AUSE_STEPS {
                return Err(Error::invalid(format!(
                    "toy tasks need training samples in every region and at least {} test samples",
                    super::pipeline::AUSE_STEPS
                )));
            }
            if !d.density.is_empty()
                && (d.density.len() != kind.regions().len() || d.density.iter().any(|w| !(*w > 0.0)))
            {
                return Err(Error::invalid("density needs one positive weight per region"));
            }
        } else {
            d.blobs.validate()?;
            if !(0.0..1.0).contains(&d.label_noise) {
                return Err(Error::invalid("label_noise must lie in [0, 1)"));
            }
            if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
                return Err(Error::invalid("train_fraction must lie in (0, 1)"));
            }
            if self.task == Task::Ood && (d.ood_shifts.is_empty() || d.ood_shifts.iter().any(|s| !(*s >= 0.0))) {
                return Err(Error::invalid("ood tasks need non-negative shift magnitudes"));
            }
        }
        if self.ablations.mc_dropout_baseline {
            if self.model.dropout.is_none() {
                return Err(Error::invalid("the MC dropout baseline needs model.dropout"));
            }
            if d.mc_dropout_passes < 2 {
                return Err(Error::invalid("mc_dropout_passes must be at least 2"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for task in [Task::Toy1, Task::Toy2, Task::Tabular, Task::Misclass, Task::Ood] {
            let cfg = ExperimentConfig::preset(task);
            cfg.validate().unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let base = ExperimentConfig::preset(Task::Toy2);
        let mut c = base.clone();
        c.insertion_layer = 3;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.weights.lambda1 = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.ablations.mc_dropout_baseline = true;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::preset(Task::Ood);
        c.data.ood_shifts.clear();
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"task":"toy1"}"#).is_err());
    }

    #[test]
    fn derived_widths() {
        let c = ExperimentConfig::preset(Task::Tabular);
        assert_eq!(c.mlp_spec().widths, vec![8, 64, 64, 64, 7]);
        assert_eq!(ExperimentConfig::preset(Task::Toy1).mlp_spec().widths, vec![1, 64, 64, 1]);
    }
}
