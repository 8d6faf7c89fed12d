use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Task};
use super::report::{ExperimentReport, MetricRow, ScoreType, SeedFailure};
use crate::autodiff::Tensor;
use crate::cupid::{CupidModule, CupidTraining, Objective};
use crate::data::{self, ClassificationSample};
use crate::error::{Error, Result};
use crate::losses::EpisMode;
use crate::metrics::{self, ScoredSample};
use crate::nn::{InputScaling, Mlp, SplitNetwork, Targets};
use crate::rng::mix;
use crate::uncertainty::{self, UncertaintyRecord};

const TAG_DATA: u64 = 0x5001;
const TAG_TEST: u64 = 0x5002;
const TAG_NOISE: u64 = 0x5003;
const TAG_SHIFT: u64 = 0x5100;
const TAG_BASE_INIT: u64 = 0x5010;
const TAG_BASE_TRAIN: u64 = 0x5011;
const TAG_CUPID_INIT: u64 = 0x5020;
const TAG_CUPID_TRAIN: u64 = 0x5021;
const TAG_ALEA_INIT: u64 = 0x5022;
const TAG_ALEA_TRAIN: u64 = 0x5023;
const TAG_MC: u64 = 0x5030;

pub const AUSE_STEPS: usize = 100;
pub const UCE_BINS: usize = 10;

/// Seed for one named purpose within a run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag))
}

/// A labelled evaluation set.
#[derive(Debug, Clone)]
pub struct EvalSet {
    /// `test` for held-out in-distribution data, `shift=<m>` for shifted sets.
    pub name: String,
    pub shift: Option<f64>,
    pub x: Tensor,
    pub targets: Targets,
    pub is_ood: bool,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub train_x: Tensor,
    pub train_targets: Targets,
    pub eval: Vec<EvalSet>,
}

/// Training counts per toy region after density weighting.
pub fn toy_counts(cfg: &ExperimentConfig, n: usize) -> Vec<usize> {
    let regions = cfg.task.toy_kind().map_or(0, |k| k.regions().len());
    if cfg.data.density.is_empty() {
        return vec![n; regions];
    }
    cfg.data
        .density
        .iter()
        .map(|w| ((n as f64 * w).round() as usize).max(1))
        .collect()
}

/// Raw samples behind [`prepare_data`]: `(train, eval sets)`.
pub enum RawData {
    Regression {
        train: Vec<data::RegressionSample>,
        test: Vec<data::RegressionSample>,
    },
    Classification {
        train: Vec<ClassificationSample>,
        eval: Vec<(String, Option<f64>, Vec<ClassificationSample>)>,
    },
}

pub fn generate_data(cfg: &ExperimentConfig, seed: u64) -> Result<RawData> {
    let d = &cfg.data;
    if let Some(kind) = cfg.task.toy_kind() {
        let train = data::gen_toy_with_counts(kind, &toy_counts(cfg, d.n_per_region), derive_seed(seed, TAG_DATA))?;
        let test = data::gen_toy(kind, d.n_test_per_region, derive_seed(seed, TAG_TEST))?;
        return Ok(RawData::Regression { train, test });
    }
    let all = data::gen_blobs(&d.blobs, derive_seed(seed, TAG_DATA))?;
    let (mut train, test) = data::train_test_split(&all, d.train_fraction, derive_seed(seed, TAG_DATA));
    if d.label_noise > 0.0 {
        data::inject_label_noise(&mut train, d.blobs.classes, d.label_noise, derive_seed(seed, TAG_NOISE));
    }
    let mut eval = vec![("test".to_string(), None, test)];
    if cfg.task == Task::Ood {
        let per_class = ((d.blobs.n_per_class as f64 * (1.0 - d.train_fraction)).round() as usize).max(1);
        let shifted_cfg = data::BlobConfig { n_per_class: per_class, ..d.blobs };
        for (i, &shift) in d.ood_shifts.iter().enumerate() {
            let samples = data::gen_ood_shift(&shifted_cfg, shift, derive_seed(seed, TAG_SHIFT + i as u64))?;
            eval.push((format!("shift={shift}"), Some(shift), samples));
        }
    }
    Ok(RawData::Classification { train, eval })
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<TaskData> {
    match generate_data(cfg, seed)? {
        RawData::Regression { train, test } => {
            let (train_x, train_targets) = data::regression_tensors(&train);
            let (x, targets) = data::regression_tensors(&test);
            Ok(TaskData {
                train_x,
                train_targets,
                eval: vec![EvalSet { name: "test".into(), shift: None, x, targets, is_ood: false }],
            })
        }
        RawData::Classification { train, eval } => {
            let (train_x, train_targets) = data::classification_tensors(&train)?;
            let eval = eval
                .into_iter()
                .map(|(name, shift, samples)| {
                    let (x, targets) = data::classification_tensors(&samples)?;
                    Ok(EvalSet { name, shift, x, targets, is_ood: shift.is_some() })
                })
                .collect::<Result<_>>()?;
            Ok(TaskData { train_x, train_targets, eval })
        }
    }
}

/// Builds, standardizes inputs for, and trains the base network.
pub fn train_base(cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> Result<(Mlp, Vec<f64>)> {
    let mut net = Mlp::build(cfg.mlp_spec(), derive_seed(seed, TAG_BASE_INIT))?;
    net.set_input_scaling(Some(InputScaling::fit(&data.train_x)));
    let curve = net.train(&data.train_x, &data.train_targets, &cfg.base, derive_seed(seed, TAG_BASE_TRAIN))?;
    Ok((net, curve))
}

/// Which CUPID objective a run uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub epis_mode: EpisMode,
    /// Train the reconstruction and uncertainty branches as two separate
    /// modules, each on its own loss term.
    pub separate: bool,
}

impl Variant {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            epis_mode: if cfg.ablations.no_max { EpisMode::NoMax } else { EpisMode::Max },
            separate: cfg.ablations.separate_branches,
        }
    }

    pub fn name(&self) -> String {
        let mode = match self.epis_mode {
            EpisMode::Max => "max",
            EpisMode::NoMax => "no-max",
        };
        let training = if self.separate { "separate" } else { "joint" };
        format!("{training}/{mode}")
    }
}

/// Trained plug-in state: one module, or one per branch when trained separately.
#[derive(Debug, Clone)]
pub struct TrainedCupid {
    pub epis: CupidModule,
    pub alea: Option<CupidModule>,
    pub curves: Vec<Vec<f64>>,
}

impl TrainedCupid {
    /// `(reconstruction source, uncertainty source)`.
    pub fn modules(&self) -> (&CupidModule, &CupidModule) {
        (&self.epis, self.alea.as_ref().unwrap_or(&self.epis))
    }
}

pub fn train_cupid(
    cfg: &ExperimentConfig,
    split: &SplitNetwork,
    data: &TaskData,
    variant: Variant,
    seed: u64,
) -> Result<TrainedCupid> {
    let opts = |objective| CupidTraining {
        hyper: cfg.cupid,
        weights: cfg.weights,
        epis_mode: variant.epis_mode,
        objective,
    };
    let train = |objective, init_tag, train_tag| -> Result<(CupidModule, Vec<f64>)> {
        let mut module = CupidModule::for_split(split, cfg.trunk_depth, derive_seed(seed, init_tag))?;
        let curve = module.train(split, &data.train_x, &data.train_targets, &opts(objective), derive_seed(seed, train_tag))?;
        Ok((module, curve))
    };
    if variant.separate {
        let (epis, c1) = train(Objective::EpisOnly, TAG_CUPID_INIT, TAG_CUPID_TRAIN)?;
        let (alea, c2) = train(Objective::AleaOnly, TAG_ALEA_INIT, TAG_ALEA_TRAIN)?;
        Ok(TrainedCupid { epis, alea: Some(alea), curves: vec![c1, c2] })
    } else {
        let (epis, c) = train(Objective::Joint, TAG_CUPID_INIT, TAG_CUPID_TRAIN)?;
        Ok(TrainedCupid { epis, alea: None, curves: vec![c] })
    }
}

/// Records of every evaluation set, tagged with the set they belong to.
#[derive(Debug, Clone)]
pub struct SetRecords {
    pub set: String,
    pub shift: Option<f64>,
    pub is_ood: bool,
    pub records: Vec<UncertaintyRecord>,
    pub mc_dropout: Option<Vec<f64>>,
}

pub fn estimate_sets(
    cfg: &ExperimentConfig,
    split: &SplitNetwork,
    cupid: &TrainedCupid,
    data: &TaskData,
    seed: u64,
) -> Result<Vec<SetRecords>> {
    let mut next_id = 0;
    let mut out = Vec::with_capacity(data.eval.len());
    for (i, set) in data.eval.iter().enumerate() {
        let mut records = uncertainty::estimate(split, &cupid.epis, &set.x, Some(&set.targets), next_id)?;
        if let Some(alea) = &cupid.alea {
            let aleatoric = uncertainty::estimate(split, alea, &set.x, None, next_id)?;
            for (r, a) in records.iter_mut().zip(aleatoric) {
                r.u_alea = a.u_alea;
            }
        }
        let mc_dropout = if cfg.ablations.mc_dropout_baseline {
            let passes = cfg.data.mc_dropout_passes;
            Some(uncertainty::mc_dropout_estimate(
                split.network(),
                &set.x,
                passes,
                derive_seed(seed, TAG_MC + i as u64),
            )?)
        } else {
            None
        };
        next_id += records.len();
        out.push(SetRecords { set: set.name.clone(), shift: set.shift, is_ood: set.is_ood, records, mc_dropout });
    }
    Ok(out)
}

fn scores(set: &SetRecords, score: ScoreType) -> Vec<f64> {
    match score {
        ScoreType::UAlea => set.records.iter().map(|r| r.u_alea).collect(),
        ScoreType::UEpis => set.records.iter().map(|r| r.u_epis).collect(),
        ScoreType::McDropout => set.mc_dropout.clone().unwrap_or_default(),
    }
}

fn score_types(cfg: &ExperimentConfig) -> Vec<ScoreType> {
    let mut s = vec![ScoreType::UAlea, ScoreType::UEpis];
    if cfg.ablations.mc_dropout_baseline {
        s.push(ScoreType::McDropout);
    }
    s
}

type MetricFn = fn(&[ScoredSample]) -> Result<f64>;

/// The task's metric suite over the estimated sets. Metrics that are
/// undefined for a seed (for example AUC with no misclassified input) are
/// left out rather than reported as a number.
pub fn score_sets(cfg: &ExperimentConfig, seed: u64, sets: &[SetRecords]) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let mut push = |score: ScoreType, name: &str, samples: &[ScoredSample], params: String, f: &dyn Fn(&[ScoredSample]) -> Result<f64>| -> Result<()> {
        match f(samples) {
            Ok(value) => {
                rows.push(MetricRow { seed, score_type: score, metric: name.to_string(), value, n: samples.len(), params });
                Ok(())
            }
            Err(Error::InvalidArgument(_)) => Ok(()),
            Err(e) => Err(e),
        }
    };
    let errors = |set: &SetRecords| -> Vec<f64> { set.records.iter().map(|r| r.error.unwrap_or(0.0)).collect() };
    let test = &sets[0];
    for score in score_types(cfg) {
        match cfg.task {
            Task::Toy1 | Task::Toy2 => {
                let samples: Vec<ScoredSample> = scores(test, score)
                    .into_iter()
                    .zip(errors(test))
                    .map(|(s, e)| ScoredSample::with_error(s, e))
                    .collect();
                push(score, "pearson", &samples, String::new(), &metrics::pearson)?;
                push(score, "ause", &samples, format!("steps={AUSE_STEPS}"), &|s| metrics::ause(s, AUSE_STEPS))?;
                push(score, "uce", &samples, format!("bins={UCE_BINS}"), &|s| metrics::uce(s, UCE_BINS))?;
            }
            Task::Tabular | Task::Misclass => {
                let samples: Vec<ScoredSample> = scores(test, score)
                    .into_iter()
                    .zip(errors(test))
                    .map(|(s, e)| ScoredSample::labeled(s, e > 0.0))
                    .collect();
                let suite: [(&str, MetricFn); 3] =
                    [("roc_auc", metrics::roc_auc), ("aurc", metrics::aurc), ("spearman", metrics::spearman)];
                for (name, f) in suite {
                    push(score, name, &samples, String::new(), &f)?;
                }
            }
            Task::Ood => {
                let id_scores = scores(test, score);
                for shifted in &sets[1..] {
                    let samples: Vec<ScoredSample> = id_scores
                        .iter()
                        .map(|&s| ScoredSample::labeled(s, false))
                        .chain(scores(shifted, score).into_iter().map(|s| ScoredSample::labeled(s, true)))
                        .collect();
                    let params = format!("shift={}", shifted.shift.unwrap_or(0.0));
                    push(score, "roc_auc", &samples, params.clone(), &metrics::roc_auc)?;
                    push(score, "aupr", &samples, params, &metrics::aupr)?;
                }
            }
        }
    }
    Ok(rows)
}

/// SHA-256 over the bit patterns of a parameter set.
pub fn params_hash(params: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for p in params {
        for &dim in p.shape() {
            h.update((dim as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything one seed produced for one (layer, variant) arm.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub insertion_layer: usize,
    pub variant: Variant,
    pub cupid: TrainedCupid,
    pub sets: Vec<SetRecords>,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub base: Mlp,
    pub base_curve: Vec<f64>,
    /// Base parameter hash, checked unchanged after every CUPID run.
    pub theta_hash: String,
    pub arms: Vec<ArmOutcome>,
}

/// One seed: data, one base model, then a CUPID run per `(layer, variant)` arm.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, arms: &[(usize, Variant)]) -> Result<SeedOutcome> {
    let data = prepare_data(cfg, seed)?;
    let (base, base_curve) = train_base(cfg, &data, seed)?;
    let theta_hash = params_hash(base.params());
    let mut outcomes = Vec::with_capacity(arms.len());
    for &(l, variant) in arms {
        let split = base.split_at(l)?;
        let cupid = train_cupid(cfg, &split, &data, variant, seed)?;
        if params_hash(split.network().params()) != theta_hash {
            return Err(Error::invalid("base parameters changed during CUPID training"));
        }
        let sets = estimate_sets(cfg, &split, &cupid, &data, seed)?;
        let rows = score_sets(cfg, seed, &sets)?;
        outcomes.push(ArmOutcome { insertion_layer: l, variant, cupid, sets, rows });
    }
    Ok(SeedOutcome { seed, base, base_curve, theta_hash, arms: outcomes })
}

/// Per-seed outcomes in seed-list order.
pub type SeedResults = Vec<(u64, Result<SeedOutcome>)>;

/// Runs every seed concurrently; results come back in seed-list order.
pub fn run_seeds(cfg: &ExperimentConfig, arms: &[(usize, Variant)]) -> Result<SeedResults> {
    cfg.validate()?;
    for &(l, _) in arms {
        let mut c = cfg.clone();
        c.insertion_layer = l;
        c.validate()?;
    }
    Ok(cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(cfg, seed, arms)))
        .collect())
}

fn arm_reports(cfg: &ExperimentConfig, arms: &[(usize, Variant)], results: &[(u64, Result<SeedOutcome>)]) -> Vec<ExperimentReport> {
    arms.iter()
        .enumerate()
        .map(|(a, &(l, variant))| {
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            for (seed, result) in results {
                match result {
                    Ok(outcome) => rows.extend(outcome.arms[a].rows.iter().cloned()),
                    Err(e) => failures.push(SeedFailure { seed: *seed, kind: e.kind().to_string(), message: e.to_string() }),
                }
            }
            let mut arm_cfg = cfg.clone();
            arm_cfg.insertion_layer = l;
            ExperimentReport::assemble(&arm_cfg, format!("l={l} {}", variant.name()), rows, failures)
        })
        .collect()
}

/// Full pipeline for every seed of the configuration.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(run_detailed(cfg)?.0)
}

/// [`run`] plus the per-seed artifacts.
pub fn run_detailed(cfg: &ExperimentConfig) -> Result<(ExperimentReport, SeedResults)> {
    let arms = [(cfg.insertion_layer, Variant::from_config(cfg))];
    let results = run_seeds(cfg, &arms)?;
    let report = arm_reports(cfg, &arms, &results).remove(0);
    Ok((report, results))
}

/// One report per insertion layer; each seed shares its base model across layers.
pub fn sweep_placement(cfg: &ExperimentConfig, layers: &[usize]) -> Result<Vec<(usize, ExperimentReport)>> {
    if layers.is_empty() {
        return Err(Error::invalid("sweep needs at least one layer"));
    }
    let variant = Variant::from_config(cfg);
    let arms: Vec<(usize, Variant)> = layers.iter().map(|&l| (l, variant)).collect();
    let results = run_seeds(cfg, &arms)?;
    Ok(layers.iter().copied().zip(arm_reports(cfg, &arms, &results)).collect())
}

/// Default (joint, max) against the variant selected by the ablation flags,
/// on identical seeds and base models.
pub fn ablate(cfg: &ExperimentConfig) -> Result<(ExperimentReport, ExperimentReport)> {
    let flagged = Variant::from_config(cfg);
    if flagged == Variant::default() {
        return Err(Error::invalid("ablate needs no_max or separate_branches set"));
    }
    let arms = [(cfg.insertion_layer, Variant::default()), (cfg.insertion_layer, flagged)];
    let results = run_seeds(cfg, &arms)?;
    let mut reports = arm_reports(cfg, &arms, &results);
    let variant = reports.pop().expect("two arms");
    Ok((reports.pop().expect("two arms"), variant))
}

/// One row of a plotting grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridRow {
    pub x: f64,
    pub y_hat: f64,
    pub u_alea: f64,
    pub u_epis: f64,
}

pub const GRID_START: f64 = 4.5;
pub const GRID_STEP: f64 = 0.01;
pub const GRID_POINTS: usize = 1001;

/// Estimates on `x_i = 4.5 + 0.01 i`, `i = 0..=1000`.
pub fn plot_grid(split: &SplitNetwork, cupid: &TrainedCupid) -> Result<Vec<GridRow>> {
    if split.network().spec().input_width() != 1 || split.output_width() != 1 {
        return Err(Error::invalid("plot grids need a scalar-input, scalar-output model"));
    }
    let xs: Vec<f64> = (0..GRID_POINTS).map(|i| GRID_START + i as f64 * GRID_STEP).collect();
    let x = Tensor::new(vec![xs.len(), 1], xs.clone())?;
    let records = uncertainty::estimate(split, &cupid.epis, &x, None, 0)?;
    let alea = match &cupid.alea {
        Some(m) => uncertainty::estimate(split, m, &x, None, 0)?,
        None => records.clone(),
    };
    Ok(xs
        .iter()
        .zip(records.iter().zip(&alea))
        .map(|(&x, (r, a))| GridRow { x, y_hat: r.y_hat[0], u_alea: a.u_alea, u_epis: r.u_epis })
        .collect())
}
