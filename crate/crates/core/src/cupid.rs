//! The plug-in uncertainty module.
//!
//! A shared trunk of dense blocks feeds two heads:
//!
//! * the reconstruction branch emits a residual `r` that is added to the host
//!   layer's pre-activation, so `m' = act(z + r)` where `m = act(z)`;
//! * the uncertainty branch emits the log-variance `s` (width `k`).
//!
//! The reconstruction head starts at ~1e-9 scale and the uncertainty head at
//! exactly zero, so a fresh module is (numerically) the identity with unit
//! variance.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, EpisMode, LossWeights};
use crate::nn::{xavier_uniform, Activation, Feature, Head, SplitNetwork, Targets, TrainHyper, LEAKY_SLOPE};
use crate::rng::SplitMix64;

const TAG_INIT: u64 = 0x2001;
const TAG_SHUFFLE: u64 = 0x2002;

/// Scale of the reconstruction head's initial weights relative to Xavier.
const RECON_HEAD_INIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Trunk,
    Reconstruction,
    Uncertainty,
}

/// Which loss drives training and, implicitly, which branches move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `L_epis + lambda2 L_alea` over all parameters.
    #[default]
    Joint,
    /// `L_epis` only; the uncertainty branch is left untouched.
    EpisOnly,
    /// `L_alea` only; the reconstruction branch is left untouched.
    AleaOnly,
}

impl Objective {
    fn trains(self, branch: Branch) -> bool {
        !matches!(
            (self, branch),
            (Objective::EpisOnly, Branch::Uncertainty) | (Objective::AleaOnly, Branch::Reconstruction)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CupidModule {
    d: usize,
    k: usize,
    trunk_depth: usize,
    insertion_layer: usize,
    host_activation: Activation,
    head: Head,
    seed: u64,
    /// Trunk blocks, then reconstruction (2 layers), then uncertainty
    /// (2 layers); each layer contributes `[w, b]`.
    params: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CupidOutput {
    pub m_prime: Tensor,
    /// Log-variance, `[n, k]`.
    pub s: Tensor,
}

/// Everything the module produces for a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub y_hat: Tensor,
    pub y_hat_prime: Tensor,
    pub s: Tensor,
    pub m: Feature,
    pub m_prime: Tensor,
}

struct Recorded {
    m_prime: Var,
    s: Var,
}

impl CupidModule {
    /// Builds a module matching `split`: feature width, output width, host
    /// activation, and insertion layer are taken from the split.
    pub fn for_split(split: &SplitNetwork, trunk_depth: usize, seed: u64) -> Result<Self> {
        let mut module = Self::build(split.feature_width(), split.output_width(), trunk_depth, seed)?;
        module.insertion_layer = split.insertion_layer();
        module.host_activation = split.feature_activation();
        module.head = split.head();
        Ok(module)
    }

    /// A free-standing module with a linear host activation at layer 1.
    pub fn build(d: usize, k: usize, trunk_depth: usize, seed: u64) -> Result<Self> {
        if d == 0 || k == 0 || trunk_depth == 0 {
            return Err(Error::invalid(format!(
                "module needs d, k, trunk depth >= 1 (got {d}, {k}, {trunk_depth})"
            )));
        }
        let mut rng = SplitMix64::stream(seed, TAG_INIT);
        let mut params = Vec::new();
        for _ in 0..trunk_depth {
            params.push(xavier_uniform(&mut rng, d, d));
            params.push(Tensor::zeros(&[1, d]));
        }
        params.push(xavier_uniform(&mut rng, d, d));
        params.push(Tensor::zeros(&[1, d]));
        params.push(xavier_uniform(&mut rng, d, d).map(|v| v * RECON_HEAD_INIT));
        params.push(Tensor::zeros(&[1, d]));
        params.push(xavier_uniform(&mut rng, d, d));
        params.push(Tensor::zeros(&[1, d]));
        params.push(Tensor::zeros(&[d, k]));
        params.push(Tensor::zeros(&[1, k]));
        Ok(Self {
            d,
            k,
            trunk_depth,
            insertion_layer: 1,
            host_activation: Activation::None,
            head: Head::Regression,
            seed,
            params,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.d
    }

    pub fn output_width(&self) -> usize {
        self.k
    }

    pub fn trunk_depth(&self) -> usize {
        self.trunk_depth
    }

    pub fn insertion_layer(&self) -> usize {
        self.insertion_layer
    }

    pub fn host_activation(&self) -> Activation {
        self.host_activation
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Indices into [`CupidModule::params`] owned by `branch`.
    pub fn branch_params(&self, branch: Branch) -> Range<usize> {
        let t = 2 * self.trunk_depth;
        match branch {
            Branch::Trunk => 0..t,
            Branch::Reconstruction => t..t + 4,
            Branch::Uncertainty => t + 4..t + 8,
        }
    }

    fn branch_of(&self, idx: usize) -> Branch {
        [Branch::Trunk, Branch::Reconstruction, Branch::Uncertainty]
            .into_iter()
            .find(|&b| self.branch_params(b).contains(&idx))
            .expect("index within params")
    }

    fn record(&self, tape: &mut Tape, params: &[Var], m_pre: Var, m_post: Var) -> Result<Recorded> {
        let mut h = m_post;
        for i in 0..self.trunk_depth {
            let z = tape.affine(h, params[2 * i], params[2 * i + 1])?;
            h = tape.leaky_relu(z, LEAKY_SLOPE)?;
        }
        let r = self.branch_params(Branch::Reconstruction).start;
        let z = tape.affine(h, params[r], params[r + 1])?;
        let z = tape.leaky_relu(z, LEAKY_SLOPE)?;
        let residual = tape.affine(z, params[r + 2], params[r + 3])?;
        let shifted = tape.add(m_pre, residual)?;
        let m_prime = self.host_activation.record(tape, shifted)?;

        let u = self.branch_params(Branch::Uncertainty).start;
        let z = tape.affine(h, params[u], params[u + 1])?;
        let z = tape.relu(z)?;
        let s = tape.affine(z, params[u + 2], params[u + 3])?;
        Ok(Recorded { m_prime, s })
    }

    fn check_feature(&self, m: &Feature) -> Result<()> {
        for t in [&m.pre, &m.post] {
            if t.shape().len() != 2 || t.cols() != self.d {
                return Err(Error::ShapeMismatch {
                    op: "cupid_forward",
                    left: vec![t.rows(), self.d],
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `(m', s) = C(m)` for a batch of host features.
    pub fn forward(&self, m: &Feature) -> Result<CupidOutput> {
        self.check_feature(m)?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let pre = tape.constant(m.pre.clone());
        let post = tape.constant(m.post.clone());
        let out = self.record(&mut tape, &params, pre, post)?;
        Ok(CupidOutput {
            m_prime: tape.value(out.m_prime).clone(),
            s: tape.value(out.s).clone(),
        })
    }

    /// Runs `x` through the host with and without the module in place.
    pub fn perturbed_predict(&self, split: &SplitNetwork, x: &Tensor) -> Result<Perturbed> {
        self.check_split(split)?;
        let m = split.prefix(x)?;
        let out = self.forward(&m)?;
        let y_hat = split.suffix(&m.post)?;
        let y_hat_prime = split.suffix(&out.m_prime)?;
        Ok(Perturbed {
            y_hat,
            y_hat_prime,
            s: out.s,
            m,
            m_prime: out.m_prime,
        })
    }

    pub fn check_split(&self, split: &SplitNetwork) -> Result<()> {
        if split.insertion_layer() != self.insertion_layer {
            return Err(Error::invalid(format!(
                "module built for layer {} but split is at layer {}",
                self.insertion_layer,
                split.insertion_layer()
            )));
        }
        if split.feature_width() != self.d || split.output_width() != self.k {
            return Err(Error::ShapeMismatch {
                op: "cupid_split",
                left: vec![self.d, self.k],
                right: vec![split.feature_width(), split.output_width()],
            });
        }
        Ok(())
    }

    /// Trains `ω` on `(x, targets)` with the host frozen. Returns the mean
    /// training loss per epoch.
    pub fn train(
        &mut self,
        split: &SplitNetwork,
        x: &Tensor,
        targets: &Targets,
        opts: &CupidTraining,
        seed: u64,
    ) -> Result<Vec<f64>> {
        self.check_split(split)?;
        opts.weights.validate()?;
        let n = x.rows();
        if n == 0 || targets.len() != n || opts.hyper.batch_size == 0 {
            return Err(Error::invalid("CUPID training needs a nonempty, aligned dataset"));
        }
        let features = split.prefix(x)?;
        let y_hat = split.suffix(&features.post)?;
        let y_dense = targets.dense(self.k);

        let trainable: Vec<usize> = (0..self.params.len())
            .filter(|&i| opts.objective.trains(self.branch_of(i)))
            .collect();
        let mut adam = Adam::new(&trainable.iter().map(|&i| self.params[i].clone()).collect::<Vec<_>>());
        let mut rng = SplitMix64::stream(seed, TAG_SHUFFLE);
        let mut order: Vec<usize> = (0..n).collect();
        let mut curve = Vec::with_capacity(opts.hyper.epochs);
        for epoch in 0..opts.hyper.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for batch in order.chunks(opts.hyper.batch_size) {
                let mut tape = Tape::new();
                let vars: Vec<Var> = self
                    .params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        if opts.objective.trains(self.branch_of(i)) {
                            tape.param(p.clone())
                        } else {
                            tape.constant(p.clone())
                        }
                    })
                    .collect();
                let batch_loss = self.record_objective(
                    &mut tape,
                    &vars,
                    split,
                    &BatchData {
                        pre: features.pre.select_rows(batch),
                        post: features.post.select_rows(batch),
                        y_hat: y_hat.select_rows(batch),
                        y: y_dense.select_rows(batch),
                    },
                    opts,
                );
                let loss = batch_loss.map_err(|e| match e {
                    Error::NonFinite { op } => {
                        Error::Diverged(format!("CUPID epoch {epoch}: non-finite value in {op}"))
                    }
                    other => other,
                })?;
                total += tape.value(loss).item() * batch.len() as f64;
                let grads = tape.backward(loss)?;
                let grads: Vec<Tensor> = trainable.iter().map(|&i| grads.get(vars[i])).collect();
                let mut current: Vec<Tensor> = trainable.iter().map(|&i| self.params[i].clone()).collect();
                adam.step(&mut current, &grads, opts.hyper.lr)?;
                for (&i, p) in trainable.iter().zip(current) {
                    self.params[i] = p;
                }
            }
            curve.push(total / n as f64);
        }
        Ok(curve)
    }

    /// Full-batch training objective and its gradient with respect to every
    /// parameter in `ω` (in [`CupidModule::params`] order).
    pub fn objective(
        &self,
        split: &SplitNetwork,
        x: &Tensor,
        targets: &Targets,
        opts: &CupidTraining,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check_split(split)?;
        if targets.len() != x.rows() {
            return Err(Error::invalid("objective needs one target per input"));
        }
        let features = split.prefix(x)?;
        let batch = BatchData {
            y_hat: split.suffix(&features.post)?,
            y: targets.dense(self.k),
            pre: features.pre,
            post: features.post,
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = self.record_objective(&mut tape, &vars, split, &batch, opts)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), vars.iter().map(|&v| grads.get(v)).collect()))
    }

    fn record_objective(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        split: &SplitNetwork,
        batch: &BatchData,
        opts: &CupidTraining,
    ) -> Result<Var> {
        let pre = tape.constant(batch.pre.clone());
        let post = tape.constant(batch.post.clone());
        let out = self.record(tape, vars, pre, post)?;
        let y_hat_prime = split.record_suffix(tape, out.m_prime)?;
        let y_hat = tape.constant(batch.y_hat.clone());
        let y = tape.constant(batch.y.clone());
        match opts.objective {
            Objective::Joint => {
                let epis = losses::epis_loss(tape, y_hat, y_hat_prime, post, out.m_prime, opts.weights.lambda1, opts.epis_mode)?;
                let alea = losses::alea_loss(tape, y, y_hat_prime, out.s)?;
                losses::total_loss(tape, epis, alea, opts.weights.lambda2)
            }
            Objective::EpisOnly => {
                losses::epis_loss(tape, y_hat, y_hat_prime, post, out.m_prime, opts.weights.lambda1, opts.epis_mode)
            }
            Objective::AleaOnly => losses::alea_loss(tape, y, y_hat_prime, out.s),
        }
    }

    pub fn to_checkpoint(&self) -> CupidCheckpoint {
        CupidCheckpoint {
            d: self.d,
            k: self.k,
            trunk_depth: self.trunk_depth,
            insertion_layer: self.insertion_layer,
            host_activation: self.host_activation,
            head: self.head,
            seed: self.seed,
            omega: self
                .params
                .iter()
                .map(|p| OmegaEntry {
                    shape: p.shape().to_vec(),
                    values: p.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: CupidCheckpoint) -> Result<Self> {
        let mut module = Self::build(ckpt.d, ckpt.k, ckpt.trunk_depth, ckpt.seed)?;
        if ckpt.omega.len() != module.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, module needs {}",
                ckpt.omega.len(),
                module.params.len()
            )));
        }
        for (slot, entry) in module.params.iter_mut().zip(ckpt.omega) {
            if entry.shape != slot.shape() {
                return Err(Error::ShapeMismatch {
                    op: "cupid_checkpoint",
                    left: slot.shape().to_vec(),
                    right: entry.shape,
                });
            }
            *slot = Tensor::new(entry.shape, entry.values)?;
        }
        module.insertion_layer = ckpt.insertion_layer;
        module.host_activation = ckpt.host_activation;
        module.head = ckpt.head;
        Ok(module)
    }
}

struct BatchData {
    pre: Tensor,
    post: Tensor,
    y_hat: Tensor,
    y: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CupidTraining {
    pub hyper: TrainHyper,
    pub weights: LossWeights,
    #[serde(default)]
    pub epis_mode: EpisMode,
    #[serde(default)]
    pub objective: Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON checkpoint of a [`CupidModule`]; parameters live under `omega`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CupidCheckpoint {
    pub d: usize,
    pub k: usize,
    pub trunk_depth: usize,
    pub insertion_layer: usize,
    pub host_activation: Activation,
    pub head: Head,
    pub seed: u64,
    pub omega: Vec<OmegaEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mlp, MlpSpec};

    fn toy_split(l: usize) -> SplitNetwork {
        let spec = MlpSpec::new(vec![1, 64, 64, 1], Activation::Sigmoid, Head::Regression);
        Mlp::build(spec, 1).unwrap().split_at(l).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::new(vec![n, 1], (0..n).map(|_| rng.uniform(-4.0, 4.0)).collect()).unwrap()
    }

    #[test]
    fn fresh_module_is_near_identity() {
        let split = toy_split(2);
        let module = CupidModule::for_split(&split, 2, 3).unwrap();
        let m = split.prefix(&inputs(50, 1)).unwrap();
        let out = module.forward(&m).unwrap();
        assert!(out.m_prime.max_abs_diff(&m.post) < 1e-6);
        assert!(out.s.data().iter().all(|s| (0.9..1.1).contains(&s.exp())));
    }

    #[test]
    fn fresh_linear_host_module_is_near_identity() {
        let module = CupidModule::build(16, 2, 3, 9).unwrap();
        let mut rng = SplitMix64::new(4);
        let m = Tensor::new(vec![10, 16], (0..160).map(|_| rng.uniform(-5.0, 5.0)).collect()).unwrap();
        let out = module.forward(&Feature { pre: m.clone(), post: m.clone() }).unwrap();
        assert!(out.m_prime.max_abs_diff(&m) < 1e-6);
    }

    #[test]
    fn param_count_matches_shapes() {
        let module = CupidModule::build(64, 1, 2, 0).unwrap();
        let dense = |i: usize, o: usize| i * o + o;
        let expected = 2 * dense(64, 64) + 2 * dense(64, 64) + dense(64, 64) + dense(64, 1);
        assert_eq!(module.param_count(), expected);
    }

    #[test]
    fn width_mismatch_rejected() {
        let module = CupidModule::build(64, 1, 2, 0).unwrap();
        let m = Tensor::zeros(&[1, 32]);
        assert!(module.forward(&Feature { pre: m.clone(), post: m }).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let split = toy_split(2);
        let module = CupidModule::for_split(&split, 2, 3).unwrap();
        let m = split.prefix(&inputs(5, 2)).unwrap();
        assert_eq!(module.forward(&m).unwrap(), module.forward(&m).unwrap());
    }

    #[test]
    fn shape_preserved_for_all_depths() {
        let split = toy_split(1);
        for depth in 1..=4 {
            let module = CupidModule::for_split(&split, depth, 0).unwrap();
            let m = split.prefix(&inputs(3, 0)).unwrap();
            assert_eq!(module.forward(&m).unwrap().m_prime.shape(), &[3, 64]);
        }
    }

    #[test]
    fn identity_module_preserves_prediction() {
        let split = toy_split(2);
        let module = CupidModule::for_split(&split, 2, 3).unwrap();
        let x = Tensor::new(vec![1, 1], vec![10.0]).unwrap();
        let p = module.perturbed_predict(&split, &x).unwrap();
        assert!(p.y_hat.max_abs_diff(&p.y_hat_prime) < 1e-6);
        assert_eq!(p.y_hat, split.network().forward(&x).unwrap());
    }

    #[test]
    fn classification_outputs_are_distributions() {
        let spec = MlpSpec::new(vec![3, 16, 16, 4], Activation::Sigmoid, Head::SoftmaxClassification);
        let split = Mlp::build(spec, 2).unwrap().split_at(2).unwrap();
        let mut module = CupidModule::for_split(&split, 2, 5).unwrap();
        // Move away from the identity so y' differs from y.
        let mut rng = SplitMix64::new(1);
        for p in module.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.3, 0.3));
        }
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, -1.0, 2.0, -0.3, 0.7]).unwrap();
        let p = module.perturbed_predict(&split, &x).unwrap();
        for r in 0..2 {
            assert!((p.y_hat.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((p.y_hat_prime.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn insertion_mismatch_rejected() {
        let module = CupidModule::for_split(&toy_split(2), 2, 0).unwrap();
        let x = inputs(1, 0);
        assert!(module.perturbed_predict(&toy_split(1), &x).is_err());
    }

    #[test]
    fn branch_freezing_follows_objective() {
        let split = toy_split(2);
        let x = inputs(32, 7);
        let y = Targets::Regression(x.map(|v| v.sin()));
        let base = CupidModule::for_split(&split, 2, 11).unwrap();
        let opts = |objective| CupidTraining {
            hyper: TrainHyper { epochs: 2, batch_size: 8, lr: 1e-3 },
            weights: LossWeights::new(0.001, 0.01).unwrap(),
            epis_mode: EpisMode::Max,
            objective,
        };
        for (objective, frozen, moved) in [
            (Objective::EpisOnly, Branch::Uncertainty, Branch::Reconstruction),
            (Objective::AleaOnly, Branch::Reconstruction, Branch::Uncertainty),
        ] {
            let mut module = base.clone();
            module.train(&split, &x, &y, &opts(objective), 1).unwrap();
            let fr = module.branch_params(frozen);
            assert_eq!(&module.params()[fr.clone()], &base.params()[fr]);
            let mv = module.branch_params(moved);
            assert_ne!(&module.params()[mv.clone()], &base.params()[mv]);
        }
    }

    #[test]
    fn training_leaves_host_untouched_and_moves_off_identity() {
        let split = toy_split(2);
        let before = split.network().params().to_vec();
        let x = inputs(64, 3);
        let y = Targets::Regression(x.map(|v| v.sin()));
        let mut module = CupidModule::for_split(&split, 2, 1).unwrap();
        let opts = CupidTraining {
            hyper: TrainHyper { epochs: 3, batch_size: 8, lr: 1e-3 },
            weights: LossWeights::new(0.001, 0.01).unwrap(),
            epis_mode: EpisMode::Max,
            objective: Objective::Joint,
        };
        let curve = module.train(&split, &x, &y, &opts, 2).unwrap();
        assert_eq!(curve.len(), 3);
        assert_eq!(split.network().params(), &before[..]);
        let held_out = split.prefix(&inputs(20, 99)).unwrap();
        let out = module.forward(&held_out).unwrap();
        let l1: f64 = out.m_prime.data().iter().zip(held_out.post.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 > 0.0);
    }

    #[test]
    fn checkpoint_round_trips() {
        let split = toy_split(2);
        let module = CupidModule::for_split(&split, 2, 4).unwrap();
        let json = serde_json::to_string(&module.to_checkpoint()).unwrap();
        assert!(json.contains("\"omega\""));
        let back = CupidModule::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, module);
    }
}
