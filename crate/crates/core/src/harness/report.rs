use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::pipeline::hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreType {
    #[serde(rename = "u_alea")]
    UAlea,
    #[serde(rename = "u_epis")]
    UEpis,
    #[serde(rename = "mc_dropout")]
    McDropout,
}

impl ScoreType {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreType::UAlea => "u_alea",
            ScoreType::UEpis => "u_epis",
            ScoreType::McDropout => "mc_dropout",
        }
    }
}

/// One metric value from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub score_type: ScoreType,
    pub metric: String,
    pub value: f64,
    /// Number of samples the metric was computed on.
    pub n: usize,
    pub params: String,
}

/// Aggregate of one `(score_type, metric, params)` across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub score_type: ScoreType,
    pub metric: String,
    pub params: String,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the configuration's canonical JSON.
    pub config_hash: String,
    pub version: String,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        let json = serde_json::to_vec(cfg).expect("configs serialize");
        Self {
            config_hash: hex(&Sha256::digest(&json)),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<SeedFailure>,
    pub provenance: Provenance,
}

impl ExperimentReport {
    pub fn assemble(cfg: &ExperimentConfig, label: String, rows: Vec<MetricRow>, failures: Vec<SeedFailure>) -> Self {
        Self {
            label,
            seeds: cfg.seeds.clone(),
            summary: summarize(&rows),
            rows,
            failures,
            provenance: Provenance::of(cfg),
        }
    }

    pub fn summary_for(&self, score: ScoreType, metric: &str, params: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.score_type == score && s.metric == metric && s.params == params)
    }

    /// Per-seed values of one metric, in seed order.
    pub fn values(&self, score: ScoreType, metric: &str, params: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.score_type == score && r.metric == metric && r.params == params)
            .map(|r| (r.seed, r.value))
            .collect()
    }
}

/// Groups rows by `(score_type, metric, params)` in first-appearance order.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(ScoreType, &str, &str)> = Vec::new();
    for r in rows {
        let key = (r.score_type, r.metric.as_str(), r.params.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(score_type, metric, params)| {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.score_type == score_type && r.metric == metric && r.params == params)
                .map(|r| r.value)
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.len() >= 2)
                .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            SummaryRow {
                score_type,
                metric: metric.to_string(),
                params: params.to_string(),
                mean,
                std,
                n_seeds: values.len(),
            }
        })
        .collect()
}
