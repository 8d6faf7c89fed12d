//! Dense MLPs that can be factored at any hidden layer into a prefix
//! `B_l` and a suffix `F_l` with `M(x) = F_l(B_l(x))`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const LEAKY_SLOPE: f64 = 0.01;

const TAG_INIT: u64 = 0x1001;
const TAG_SHUFFLE: u64 = 0x1002;
const TAG_DROPOUT: u64 = 0x1003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Sigmoid,
    Relu,
    LeakyRelu,
    None,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Sigmoid => ops::sigmoid(x),
            Activation::Relu => ops::relu(x),
            Activation::LeakyRelu => ops::leaky_relu(x, LEAKY_SLOPE),
            Activation::None => x.clone(),
        }
    }

    pub fn record(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::None => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Regression,
    /// Softmax over the final layer's logits.
    SoftmaxClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by each weight layer's output width.
    pub widths: Vec<usize>,
    /// One per weight layer; the last must be `None`.
    pub activations: Vec<Activation>,
    /// Optional dropout after each weight layer's activation. `Some(0.0)` is
    /// a dropout layer that never drops.
    pub dropout: Vec<Option<f64>>,
    pub head: Head,
}

impl MlpSpec {
    /// Same activation on every hidden layer, linear output, no dropout.
    pub fn new(widths: Vec<usize>, hidden: Activation, head: Head) -> Self {
        let layers = widths.len().saturating_sub(1);
        let mut activations = vec![hidden; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::None;
        }
        Self {
            widths,
            activations,
            dropout: vec![None; layers],
            head,
        }
    }

    /// Puts a dropout layer of `rate` after every hidden layer.
    pub fn with_hidden_dropout(mut self, rate: f64) -> Self {
        let layers = self.num_layers();
        for (i, d) in self.dropout.iter_mut().enumerate() {
            if i + 1 < layers {
                *d = Some(rate);
            }
        }
        self
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::invalid("MLP needs at least an input width"));
        }
        let layers = self.num_layers();
        if layers < 2 {
            return Err(Error::invalid("an MLP needs at least 2 weight layers"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.activations.len() != layers || self.dropout.len() != layers {
            return Err(Error::invalid(format!(
                "expected {layers} activations and dropout entries"
            )));
        }
        if self.activations[layers - 1] != Activation::None {
            return Err(Error::invalid("final layer must be linear"));
        }
        if self.dropout[layers - 1].is_some() {
            return Err(Error::invalid("dropout after the output layer is not supported"));
        }
        for rate in self.dropout.iter().flatten() {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        if self.head == Head::SoftmaxClassification && self.output_width() < 2 {
            return Err(Error::invalid("classification head needs at least 2 outputs"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Per-feature affine input normalization applied before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScaling {
    /// Column means and (population) standard deviations of `x`.
    pub fn fit(x: &Tensor) -> Self {
        let (n, c) = (x.rows(), x.cols());
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut std = vec![0.0; c];
        for i in 0..n {
            for ((s, v), m) in std.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Pre- and post-activation values of one layer for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub pre: Tensor,
    pub post: Tensor,
}

impl Feature {
    pub fn width(&self) -> usize {
        self.post.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    seed: u64,
    /// `[w0, b0, w1, b1, ...]`; weights are `[in, out]`, biases `[1, out]`.
    params: Vec<Tensor>,
    scaling: Option<InputScaling>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Supervision targets for a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `[n, k]` real-valued targets.
    Regression(Tensor),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(t) => t.rows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(t) => Targets::Regression(t.select_rows(idx)),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Targets as a dense `[n, k]` tensor: one-hot rows for classes.
    pub fn dense(&self, k: usize) -> Tensor {
        match self {
            Targets::Regression(t) => t.clone(),
            Targets::Classes(c) => {
                let mut out = Tensor::zeros(&[c.len(), k]);
                for (i, &cls) in c.iter().enumerate() {
                    out.data_mut()[i * k + cls] = 1.0;
                }
                out
            }
        }
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn build(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::stream(seed, TAG_INIT);
        let mut params = Vec::with_capacity(2 * spec.num_layers());
        for w in spec.widths.windows(2) {
            params.push(xavier_uniform(&mut rng, w[0], w[1]));
            params.push(Tensor::zeros(&[1, w[1]]));
        }
        Ok(Self {
            spec,
            seed,
            params,
            scaling: None,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
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

    pub fn num_layers(&self) -> usize {
        self.spec.num_layers()
    }

    pub fn input_scaling(&self) -> Option<&InputScaling> {
        self.scaling.as_ref()
    }

    pub fn set_input_scaling(&mut self, scaling: Option<InputScaling>) {
        self.scaling = scaling;
    }

    pub fn has_dropout(&self) -> bool {
        self.spec.dropout.iter().any(Option::is_some)
    }

    fn scaled(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_width() {
            return Err(Error::ShapeMismatch {
                op: "mlp_input",
                left: x.shape().to_vec(),
                right: vec![x.rows(), self.spec.input_width()],
            });
        }
        Ok(match &self.scaling {
            Some(s) => s.apply(x),
            None => x.clone(),
        })
    }

    /// Runs weight layers `layers` on `input` (already scaled) without dropout.
    pub fn run_layers(&self, input: &Tensor, layers: Range<usize>) -> Result<Feature> {
        let mut feature = Feature {
            pre: input.clone(),
            post: input.clone(),
        };
        for i in layers {
            let pre = self.layer_pre(i, &feature.post)?;
            let post = self.spec.activations[i].apply(&pre);
            feature = Feature { pre, post };
        }
        Ok(feature)
    }

    fn layer_pre(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let (w, b) = (&self.params[2 * i], &self.params[2 * i + 1]);
        let xw = ops::matmul(x, w)?;
        ops::add(&xw, &ops::tile_rows(b, x.rows())?)
    }

    fn head(&self, logits: Tensor) -> Tensor {
        match self.spec.head {
            Head::Regression => logits,
            Head::SoftmaxClassification => ops::softmax(&logits),
        }
    }

    /// Final-layer outputs before the head.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.scaled(x)?;
        Ok(self.run_layers(&x, 0..self.num_layers())?.post)
    }

    /// `M(x)` with dropout disabled; probabilities for classification.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        self.head(logits).check_finite("mlp_forward")
    }

    /// Forward pass with dropout active; masks are drawn from `rng`.
    pub fn forward_stochastic(&self, x: &Tensor, rng: &mut SplitMix64) -> Result<Tensor> {
        let mut h = self.scaled(x)?;
        for i in 0..self.num_layers() {
            let pre = self.layer_pre(i, &h)?;
            h = self.spec.activations[i].apply(&pre);
            if let Some(rate) = self.spec.dropout[i] {
                h = ops::mul(&h, &dropout_mask(rng, h.shape(), rate))?;
            }
        }
        Ok(self.head(h))
    }

    /// Records weight layers `layers` on `tape`. `params` holds the weight and
    /// bias handles of those layers only, starting at `layers.start`.
    pub fn record_layers(
        &self,
        tape: &mut Tape,
        params: &[Var],
        mut h: Var,
        layers: Range<usize>,
        mut dropout_rng: Option<&mut SplitMix64>,
    ) -> Result<Var> {
        let start = layers.start;
        for i in layers {
            let j = 2 * (i - start);
            let pre = tape.affine(h, params[j], params[j + 1])?;
            h = self.spec.activations[i].record(tape, pre)?;
            if let (Some(rate), Some(rng)) = (self.spec.dropout[i], dropout_rng.as_deref_mut()) {
                let mask = dropout_mask(rng, tape.value(h).shape(), rate);
                let mask = tape.constant(mask);
                h = tape.mul(h, mask)?;
            }
        }
        Ok(h)
    }

    /// Supervised training with Adam. Returns the mean training loss per epoch.
    pub fn train(&mut self, x: &Tensor, targets: &Targets, hyper: &TrainHyper, seed: u64) -> Result<Vec<f64>> {
        let n = x.rows();
        if n == 0 || targets.len() != n {
            return Err(Error::invalid(format!(
                "training needs a nonempty dataset with matching targets ({} inputs, {} targets)",
                n,
                targets.len()
            )));
        }
        if hyper.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let x = self.scaled(x)?;
        let k = self.spec.output_width();
        let mut shuffle_rng = SplitMix64::stream(seed, TAG_SHUFFLE);
        let mut dropout_rng = SplitMix64::stream(seed, TAG_DROPOUT);
        let mut adam = Adam::new(&self.params);
        let mut order: Vec<usize> = (0..n).collect();
        let mut curve = Vec::with_capacity(hyper.epochs);
        for epoch in 0..hyper.epochs {
            shuffle_rng.shuffle(&mut order);
            let mut total = 0.0;
            for batch in order.chunks(hyper.batch_size) {
                let xb = x.select_rows(batch);
                let yb = targets.select(batch).dense(k);
                let mut tape = Tape::new();
                let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
                let loss = self
                    .record_loss(&mut tape, &vars, xb, yb, &mut dropout_rng)
                    .map_err(|e| diverged(epoch, e))?;
                let value = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
                adam.step(&mut self.params, &grads, hyper.lr)?;
                total += value * batch.len() as f64;
            }
            let mean = total / n as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}: loss {mean}")));
            }
            curve.push(mean);
        }
        Ok(curve)
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        xb: Tensor,
        yb: Tensor,
        dropout_rng: &mut SplitMix64,
    ) -> Result<Var> {
        let rows = xb.rows();
        let input = tape.constant(xb);
        let logits = self.record_layers(tape, vars, input, 0..self.num_layers(), Some(dropout_rng))?;
        let y = tape.constant(yb);
        match self.spec.head {
            Head::Regression => {
                let count = tape.value(logits).len() as f64;
                let diff = tape.sub(logits, y)?;
                let sq = tape.squared_l2(diff)?;
                tape.scale(sq, 1.0 / count)
            }
            Head::SoftmaxClassification => {
                let logp = tape.log_softmax(logits)?;
                let picked = tape.mul(logp, y)?;
                let total = tape.sum(picked)?;
                tape.scale(total, -1.0 / rows as f64)
            }
        }
    }

    /// Factors the network at layer `l` (1 <= l < number of layers).
    pub fn split_at(&self, l: usize) -> Result<SplitNetwork> {
        if l == 0 || l >= self.num_layers() {
            return Err(Error::invalid(format!(
                "insertion layer {l} outside 1..{}",
                self.num_layers()
            )));
        }
        Ok(SplitNetwork { net: self.clone(), l })
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        let layers = (0..self.num_layers())
            .map(|i| {
                (
                    i.to_string(),
                    LayerParams {
                        weights: self.params[2 * i].data().to_vec(),
                        bias: self.params[2 * i + 1].data().to_vec(),
                    },
                )
            })
            .collect();
        MlpCheckpoint {
            spec: self.spec.clone(),
            seed: self.seed,
            layers,
            input_scaling: self.scaling.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: MlpCheckpoint) -> Result<Self> {
        let mut net = Mlp::build(ckpt.spec, ckpt.seed)?;
        for i in 0..net.num_layers() {
            let layer = ckpt
                .layers
                .get(&i.to_string())
                .ok_or_else(|| Error::invalid(format!("checkpoint missing layer {i}")))?;
            let (fan_in, fan_out) = (net.spec.widths[i], net.spec.widths[i + 1]);
            net.params[2 * i] = Tensor::new(vec![fan_in, fan_out], layer.weights.clone())?;
            net.params[2 * i + 1] = Tensor::new(vec![1, fan_out], layer.bias.clone())?;
        }
        net.scaling = ckpt.input_scaling;
        Ok(net)
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!("epoch {epoch}: non-finite value in {op}")),
        other => other,
    }
}

pub(crate) fn xavier_uniform(rng: &mut SplitMix64, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction")
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
pub fn dropout_mask(rng: &mut SplitMix64, shape: &[usize], rate: f64) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(shape);
    for v in mask.data_mut() {
        *v = if rng.bernoulli(rate) { 0.0 } else { keep };
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// JSON checkpoint of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub spec: MlpSpec,
    pub seed: u64,
    pub layers: BTreeMap<String, LayerParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scaling: Option<InputScaling>,
}

/// A trained network viewed as prefix `B_l` (layers `0..l`) and suffix `F_l`
/// (layers `l..`). The parameters are never modified through this view.
#[derive(Debug, Clone)]
pub struct SplitNetwork {
    net: Mlp,
    l: usize,
}

impl SplitNetwork {
    pub fn insertion_layer(&self) -> usize {
        self.l
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    /// Feature width `d` at the split.
    pub fn feature_width(&self) -> usize {
        self.net.spec.widths[self.l]
    }

    pub fn output_width(&self) -> usize {
        self.net.spec.output_width()
    }

    /// Activation of the host layer that produces the split feature.
    pub fn feature_activation(&self) -> Activation {
        self.net.spec.activations[self.l - 1]
    }

    pub fn head(&self) -> Head {
        self.net.spec.head
    }

    /// `m_l = B_l(x)`, with its pre-activation.
    pub fn prefix(&self, x: &Tensor) -> Result<Feature> {
        let x = self.net.scaled(x)?;
        self.net.run_layers(&x, 0..self.l)
    }

    /// `F_l(m)`: probabilities for classification heads.
    pub fn suffix(&self, m: &Tensor) -> Result<Tensor> {
        if m.shape().len() != 2 || m.cols() != self.feature_width() {
            return Err(Error::ShapeMismatch {
                op: "suffix_input",
                left: m.shape().to_vec(),
                right: vec![m.rows(), self.feature_width()],
            });
        }
        let logits = self.net.run_layers(m, self.l..self.net.num_layers())?.post;
        self.net.head(logits).check_finite("suffix")
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.prefix(x)?;
        self.suffix(&m.post)
    }

    /// Records `F_l(m)` on `tape` with the host parameters as constants.
    pub fn record_suffix(&self, tape: &mut Tape, m: Var) -> Result<Var> {
        let vars: Vec<Var> = self.net.params[2 * self.l..]
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let logits = self
            .net
            .record_layers(tape, &vars, m, self.l..self.net.num_layers(), None)?;
        match self.net.spec.head {
            Head::Regression => Ok(logits),
            Head::SoftmaxClassification => tape.softmax(logits),
        }
    }
}
