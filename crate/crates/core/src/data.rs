//! Deterministic synthetic datasets.
//!
//! Two piecewise-sine regression sets with region-dependent noise, Gaussian
//! class blobs, and translated copies of the blobs for distribution shift.
//! Every generator is a pure function of its parameters and seed.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::Targets;
use crate::rng::SplitMix64;

const TAG_TOY: u64 = 0x4001;
const TAG_BLOBS: u64 = 0x4002;
const TAG_LABEL_NOISE: u64 = 0x4003;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSample {
    pub x: f64,
    pub y: f64,
    pub region: usize,
}

/// One interval of a piecewise toy function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyRegion {
    pub lo: f64,
    pub hi: f64,
    pub offset: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// `3 sin(0.8x) + c`; noisy on the outer intervals, quiet in the middle.
    Toy1,
    /// `3 sin(0.8x) + sin(2x) + c` with no data on `[9, 11)`.
    Toy2,
}

impl ToyKind {
    pub fn regions(self) -> &'static [ToyRegion] {
        const TOY1: [ToyRegion; 3] = [
            ToyRegion { lo: 5.0, hi: 8.0, offset: 5.3, noise_std: 0.7 },
            ToyRegion { lo: 8.0, hi: 12.0, offset: 5.7, noise_std: 0.3 },
            ToyRegion { lo: 12.0, hi: 14.0, offset: 5.3, noise_std: 0.7 },
        ];
        const TOY2: [ToyRegion; 2] = [
            ToyRegion { lo: 5.0, hi: 9.0, offset: 1.3, noise_std: 0.7 },
            ToyRegion { lo: 11.0, hi: 13.0, offset: 1.8, noise_std: 0.2 },
        ];
        match self {
            ToyKind::Toy1 => &TOY1,
            ToyKind::Toy2 => &TOY2,
        }
    }

    /// Noise-free target for a sample in `region`.
    pub fn mean(self, x: f64, region: usize) -> f64 {
        let offset = self.regions()[region].offset;
        match self {
            ToyKind::Toy1 => 3.0 * (0.8 * x).sin() + offset,
            ToyKind::Toy2 => 3.0 * (0.8 * x).sin() + (2.0 * x).sin() + offset,
        }
    }

    /// Region containing `x`, if any.
    pub fn region_of(self, x: f64) -> Option<usize> {
        self.regions().iter().position(|r| (r.lo..r.hi).contains(&x))
    }
}

/// Draws `counts[r]` samples from region `r`, regions in order. Within a
/// region each sample consumes one uniform for `x` then two for the noise.
pub fn gen_toy_with_counts(kind: ToyKind, counts: &[usize], seed: u64) -> Result<Vec<RegressionSample>> {
    let regions = kind.regions();
    if counts.len() != regions.len() {
        return Err(Error::invalid(format!(
            "{kind:?} has {} regions, got {} counts",
            regions.len(),
            counts.len()
        )));
    }
    let mut rng = SplitMix64::stream(seed, TAG_TOY);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (region, (r, &count)) in regions.iter().zip(counts).enumerate() {
        for _ in 0..count {
            let x = rng.uniform(r.lo, r.hi);
            let y = kind.mean(x, region) + r.noise_std * rng.normal();
            out.push(RegressionSample { x, y, region });
        }
    }
    Ok(out)
}

pub fn gen_toy(kind: ToyKind, n_per_region: usize, seed: u64) -> Result<Vec<RegressionSample>> {
    if n_per_region == 0 {
        return Err(Error::invalid("n_per_region must be at least 1"));
    }
    gen_toy_with_counts(kind, &vec![n_per_region; kind.regions().len()], seed)
}

pub fn gen_toy1(n_per_region: usize, seed: u64) -> Result<Vec<RegressionSample>> {
    gen_toy(ToyKind::Toy1, n_per_region, seed)
}

pub fn gen_toy2(n_per_region: usize, seed: u64) -> Result<Vec<RegressionSample>> {
    gen_toy(ToyKind::Toy2, n_per_region, seed)
}

/// `([n, 1]` inputs, `[n, 1]` targets).
pub fn regression_tensors(samples: &[RegressionSample]) -> (Tensor, Targets) {
    let n = samples.len();
    let x = Tensor::new(vec![n, 1], samples.iter().map(|s| s.x).collect()).expect("sized");
    let y = Tensor::new(vec![n, 1], samples.iter().map(|s| s.y).collect()).expect("sized");
    (x, Targets::Regression(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSample {
    pub features: Vec<f64>,
    pub class: usize,
    pub is_ood: bool,
}

/// Gaussian class clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    /// Per-feature standard deviation around each center.
    pub spread: f64,
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("blobs need at least 2 classes"));
        }
        if self.dim == 0 || self.classes > 2 * self.dim {
            return Err(Error::invalid(format!(
                "{} classes do not fit on the +/- axes of dimension {}",
                self.classes, self.dim
            )));
        }
        if !(self.spread >= 0.0) {
            return Err(Error::invalid("spread must be non-negative"));
        }
        Ok(())
    }

    /// Class `c` sits at unit distance along axis `c mod dim`, on the
    /// positive side for `c < dim` and the negative side otherwise.
    pub fn center(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        c[class % self.dim] = if class < self.dim { 1.0 } else { -1.0 };
        c
    }

    /// Unit direction along which distribution shift translates centers.
    pub fn shift_direction(&self) -> Vec<f64> {
        vec![1.0 / (self.dim as f64).sqrt(); self.dim]
    }
}

fn blobs_with_offset(cfg: &BlobConfig, offset: &[f64], is_ood: bool, seed: u64) -> Result<Vec<ClassificationSample>> {
    cfg.validate()?;
    let mut rng = SplitMix64::stream(seed, TAG_BLOBS);
    let mut out = Vec::with_capacity(cfg.classes * cfg.n_per_class);
    for class in 0..cfg.classes {
        let center = cfg.center(class);
        for _ in 0..cfg.n_per_class {
            let features = center
                .iter()
                .zip(offset)
                .map(|(c, o)| c + o + cfg.spread * rng.normal())
                .collect();
            out.push(ClassificationSample { features, class, is_ood });
        }
    }
    Ok(out)
}

pub fn gen_blobs(cfg: &BlobConfig, seed: u64) -> Result<Vec<ClassificationSample>> {
    blobs_with_offset(cfg, &vec![0.0; cfg.dim], false, seed)
}

/// The blob generator with every center moved by `magnitude` along
/// [`BlobConfig::shift_direction`]. All samples are flagged out-of-distribution.
pub fn gen_ood_shift(cfg: &BlobConfig, magnitude: f64, seed: u64) -> Result<Vec<ClassificationSample>> {
    if !(magnitude >= 0.0) {
        return Err(Error::invalid("shift magnitude must be non-negative"));
    }
    cfg.validate()?;
    let offset: Vec<f64> = cfg.shift_direction().iter().map(|d| d * magnitude).collect();
    blobs_with_offset(cfg, &offset, true, seed)
}

/// Replaces each label, with probability `rate`, by a uniformly drawn
/// different class.
pub fn inject_label_noise(samples: &mut [ClassificationSample], classes: usize, rate: f64, seed: u64) {
    let mut rng = SplitMix64::stream(seed, TAG_LABEL_NOISE);
    for s in samples.iter_mut() {
        if rng.bernoulli(rate) {
            let other = rng.below(classes - 1);
            s.class = if other >= s.class { other + 1 } else { other };
        }
    }
}

pub fn classification_tensors(samples: &[ClassificationSample]) -> Result<(Tensor, Targets)> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    let x = Tensor::from_rows(&rows)?;
    Ok((x, Targets::Classes(samples.iter().map(|s| s.class).collect())))
}

/// Deterministic split into `(train, test)` with `train_fraction` of the
/// samples (after a seeded shuffle) in the training part.
pub fn train_test_split<T: Clone>(samples: &[T], train_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    SplitMix64::stream(seed, 0x4004).shuffle(&mut idx);
    let cut = (samples.len() as f64 * train_fraction).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}
