//! Small feed-forward networks with hand-written reverse mode.
//!
//! Layers are dense, batch-norm or element-wise activations. Parameters are
//! exposed as flat `f64` slices in a fixed order so optimizers and soft
//! target updates can walk them without knowing the layer structure.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// `scale · tanh(x)`.
    ScaledTanh(f64),
}

impl Activation {
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        match *self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.mapv(|v| v.max(0.0)),
            Activation::Tanh => x.mapv(f64::tanh),
            Activation::ScaledTanh(s) => x.mapv(|v| s * v.tanh()),
        }
    }

    fn backward(&self, input: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        match *self {
            Activation::Identity => grad.clone(),
            Activation::Relu => {
                let mut g = grad.clone();
                g.zip_mut_with(input, |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            Activation::Tanh => {
                let mut g = grad.clone();
                g.zip_mut_with(input, |g, &x| {
                    let t = x.tanh();
                    *g *= 1.0 - t * t
                });
                g
            }
            Activation::ScaledTanh(s) => {
                let mut g = grad.clone();
                g.zip_mut_with(input, |g, &x| {
                    let t = x.tanh();
                    *g *= s * (1.0 - t * t)
                });
                g
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Weight of the old running statistics in each update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense {
        /// `inputs × outputs`; forward is `x · W + b`.
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    BatchNorm(BatchNorm),
    Activation(Activation),
}

impl Layer {
    pub fn dense<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        Layer::Dense {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || {
                rng.gen_range(-bound..=bound)
            }),
            bias: Array1::from_shape_simple_fn(outputs, || rng.gen_range(-bound..=bound)),
        }
    }

    fn output_width(&self, input: usize) -> usize {
        match self {
            Layer::Dense { weight, .. } => weight.ncols(),
            _ => input,
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Dense {
        input: Array2<f64>,
    },
    BatchNorm {
        normalized: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Activation {
        input: Array2<f64>,
    },
}

/// Gradients in the same order as [`DenseNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    inputs: usize,
    #[serde(skip)]
    cache: Option<Vec<Cache>>,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.inputs == other.inputs && self.layers == other.layers
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    net: DenseNet,
}

impl DenseNet {
    pub fn new(inputs: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut width = inputs;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense { weight, bias } => {
                    if weight.nrows() != width || bias.len() != weight.ncols() {
                        return Err(Error::Shape(format!(
                            "layer {i}: dense {}x{} (bias {}) after width {width}",
                            weight.nrows(),
                            weight.ncols(),
                            bias.len()
                        )));
                    }
                }
                Layer::BatchNorm(bn) => {
                    if bn.gamma.len() != width {
                        return Err(Error::Shape(format!(
                            "layer {i}: batch norm over {} features after width {width}",
                            bn.gamma.len()
                        )));
                    }
                }
                Layer::Activation(_) => {}
            }
            width = layer.output_width(width);
        }
        Ok(Self {
            layers,
            inputs,
            cache: None,
        })
    }

    /// Dense → [batch norm] → activation for every hidden width, then a dense
    /// output layer followed by `output_activation`.
    pub fn mlp<R: Rng>(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        batch_norm: bool,
        output_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(Layer::dense(width, h, rng));
            if batch_norm {
                layers.push(Layer::BatchNorm(BatchNorm::new(h)));
            }
            layers.push(Layer::Activation(Activation::Relu));
            width = h;
        }
        layers.push(Layer::dense(width, outputs, rng));
        if output_activation != Activation::Identity {
            layers.push(Layer::Activation(output_activation));
        }
        Self::new(inputs, layers).expect("mlp shapes chain by construction")
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers
            .iter()
            .fold(self.inputs, |w, l| l.output_width(w))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.inputs {
            return Err(Error::Shape(format!(
                "network expects {} inputs, batch has {}",
                self.inputs,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass: batch norm uses running statistics.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { weight, bias } => h.dot(weight) + bias,
                Layer::BatchNorm(bn) => {
                    let inv = bn.running_var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                    (h - &bn.running_mean) * &(inv * &bn.gamma) + &bn.beta
                }
                Layer::Activation(a) => a.apply(&h),
            };
        }
        Ok(h)
    }

    /// Training-mode forward pass: batch norm normalizes with batch statistics
    /// and updates its running statistics. Caches what [`Self::backward`]
    /// needs.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let has_bn = self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)));
        if has_bn && x.nrows() < 2 {
            return Err(Error::invalid(
                "batch norm in training mode needs a batch of at least 2",
            ));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dense { weight, bias } => {
                    let out = h.dot(weight) + &*bias;
                    caches.push(Cache::Dense { input: h });
                    out
                }
                Layer::BatchNorm(bn) => {
                    let n = h.nrows() as f64;
                    let mean = h.mean_axis(Axis(0)).expect("non-empty batch");
                    let centered = &h - &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                    let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                    let normalized = centered * &inv_std;
                    let out = &normalized * &bn.gamma + &bn.beta;
                    let m = bn.momentum;
                    bn.running_mean = &bn.running_mean * m + &(mean * (1.0 - m));
                    bn.running_var = &bn.running_var * m + &(var * (n / (n - 1.0) * (1.0 - m)));
                    caches.push(Cache::BatchNorm {
                        normalized,
                        inv_std,
                    });
                    out
                }
                Layer::Activation(a) => {
                    let out = a.apply(&h);
                    caches.push(Cache::Activation { input: h });
                    out
                }
            };
        }
        self.cache = Some(caches);
        Ok(h)
    }

    /// Back-propagates `grad_output` (∂loss/∂output) through the last
    /// training-mode forward pass. Returns parameter gradients and ∂loss/∂input.
    pub fn backward(&mut self, grad_output: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let caches = self.cache.take().ok_or_else(|| {
            Error::State("backward called without a training-mode forward pass".into())
        })?;
        let mut grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.clone();
        for (layer, cache) in self.layers.iter().zip(&caches).rev() {
            match (layer, cache) {
                (Layer::Dense { weight, .. }, Cache::Dense { input }) => {
                    if g.ncols() != weight.ncols() || g.nrows() != input.nrows() {
                        return Err(Error::Shape(format!(
                            "gradient {}x{} for dense output {}x{}",
                            g.nrows(),
                            g.ncols(),
                            input.nrows(),
                            weight.ncols()
                        )));
                    }
                    let dw = input.t().dot(&g);
                    let db = g.sum_axis(Axis(0));
                    let dx = g.dot(&weight.t());
                    grads.push(vec![dw.iter().copied().collect(), db.to_vec()]);
                    g = dx;
                }
                (
                    Layer::BatchNorm(bn),
                    Cache::BatchNorm {
                        normalized,
                        inv_std,
                    },
                ) => {
                    let n = g.nrows() as f64;
                    let dgamma = (&g * normalized).sum_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0));
                    let dnorm = &g * &bn.gamma;
                    let sum_dnorm = dnorm.sum_axis(Axis(0));
                    let sum_dnorm_x = (&dnorm * normalized).sum_axis(Axis(0));
                    let dx =
                        (dnorm * n - &sum_dnorm - &(normalized * &sum_dnorm_x)) * &(inv_std / n);
                    grads.push(vec![dgamma.to_vec(), dbeta.to_vec()]);
                    g = dx;
                }
                (Layer::Activation(a), Cache::Activation { input }) => {
                    g = a.backward(input, &g);
                    grads.push(Vec::new());
                }
                _ => return Err(Error::State("forward cache does not match layers".into())),
            }
        }
        grads.reverse();
        Ok((Gradients(grads.into_iter().flatten().collect()), g))
    }

    /// Parameter tensors, flattened row-major: per dense layer weight then
    /// bias, per batch norm gamma then beta.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    out.push(weight.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice().expect("standard layout"));
                    out.push(bn.beta.as_slice().expect("standard layout"));
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    out.push(weight.as_slice_mut().expect("standard layout"));
                    out.push(bias.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                    out.push(bn.beta.as_slice_mut().expect("standard layout"));
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// `θ ← τ·θ_source + (1-τ)·θ`, including batch-norm running statistics.
    pub fn soft_update_from(&mut self, source: &DenseNet, tau: f64) -> Result<()> {
        if self.layers.len() != source.layers.len() {
            return Err(Error::Shape(
                "soft update between different architectures".into(),
            ));
        }
        let blend = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        };
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            match (dst, src) {
                (
                    Layer::Dense { weight, bias },
                    Layer::Dense {
                        weight: sw,
                        bias: sb,
                    },
                ) => {
                    if weight.dim() != sw.dim() {
                        return Err(Error::Shape(
                            "soft update between different architectures".into(),
                        ));
                    }
                    blend(weight.as_slice_mut().unwrap(), sw.as_slice().unwrap());
                    blend(bias.as_slice_mut().unwrap(), sb.as_slice().unwrap());
                }
                (Layer::BatchNorm(d), Layer::BatchNorm(s)) => {
                    if d.gamma.len() != s.gamma.len() {
                        return Err(Error::Shape(
                            "soft update between different architectures".into(),
                        ));
                    }
                    blend(d.gamma.as_slice_mut().unwrap(), s.gamma.as_slice().unwrap());
                    blend(d.beta.as_slice_mut().unwrap(), s.beta.as_slice().unwrap());
                    blend(
                        d.running_mean.as_slice_mut().unwrap(),
                        s.running_mean.as_slice().unwrap(),
                    );
                    blend(
                        d.running_var.as_slice_mut().unwrap(),
                        s.running_var.as_slice().unwrap(),
                    );
                }
                (Layer::Activation(_), Layer::Activation(_)) => {}
                _ => {
                    return Err(Error::Shape(
                        "soft update between different architectures".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format_version: CHECKPOINT_VERSION,
            net: self.clone(),
        })?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(vec![format!(
                "format_version: expected {CHECKPOINT_VERSION}, got {}",
                ck.format_version
            )]));
        }
        let net = ck.net;
        // Re-run shape validation on untrusted input.
        DenseNet::new(net.inputs, net.layers)
    }
}

/// Multiply the learning rate by `factor` once the schedule clock reaches each
/// milestone.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self {
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn multistep(factor: f64, milestones: &[usize]) -> Self {
        Self {
            milestones: milestones.to_vec(),
            factor,
        }
    }

    /// Rate after `completed` steps or epochs.
    pub fn rate(&self, base: f64, completed: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| completed >= m).count();
        base * self.factor.powi(hits as i32)
    }
}

/// What advances the schedule clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleUnit {
    Step,
    Epoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    pub unit: ScheduleUnit,
    clock: usize,
}

impl AdamState {
    pub fn new(shapes: &[usize], learning_rate: f64) -> Self {
        Self {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::constant(),
            unit: ScheduleUnit::Step,
            clock: 0,
        }
    }

    pub fn for_net(net: &DenseNet, learning_rate: f64) -> Self {
        let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        Self::new(&shapes, learning_rate)
    }

    pub fn with_schedule(mut self, schedule: LrSchedule, unit: ScheduleUnit) -> Self {
        self.schedule = schedule;
        self.unit = unit;
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.rate(self.learning_rate, self.clock)
    }

    /// Advances an epoch-based schedule.
    pub fn end_epoch(&mut self) {
        if self.unit == ScheduleUnit::Epoch {
            self.clock += 1;
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &Gradients) -> Result<()> {
        if params.len() != self.first.len() || grads.0.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.0.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads.0).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: optimizer size {}, parameter {}, gradient {}",
                    self.first[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        let lr = self.current_lr();
        self.steps += 1;
        if self.unit == ScheduleUnit::Step {
            self.clock += 1;
        }
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(&grads.0)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Mean squared error and its gradient with respect to `prediction`.
pub fn mse_loss(prediction: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if prediction.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.dim(),
            target.dim()
        )));
    }
    let n = prediction.len() as f64;
    let diff = prediction - target;
    let loss = diff.mapv(|d| d * d).sum() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// Central finite-difference check of `loss = Σ c ⊙ net(x)` in training
/// mode. Returns the worst relative error over parameters and inputs.
/// Coordinates whose central differences at `h` and `h/2` disagree straddle
/// a ReLU kink and are skipped; more than 5% skipped is an error.
pub fn gradient_check<R: Rng>(net: &mut DenseNet, x: &Array2<f64>, rng: &mut R) -> Result<f64> {
    let h = 2e-5;
    let out = net.forward_train(x)?;
    let coeffs = Array2::from_shape_simple_fn(out.dim(), || rng.gen_range(-1.0..1.0));
    let (grads, dx) = net.backward(&coeffs)?;
    let loss = |net: &mut DenseNet, x: &Array2<f64>| -> Result<f64> {
        Ok((net.forward_train(x)? * &coeffs).sum())
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    // Central differences of `f` at steps h and h/2.
    let diffs = |f: &mut dyn FnMut(f64) -> Result<f64>| -> Result<(f64, f64)> {
        let wide = (f(h)? - f(-h)?) / (2.0 * h);
        let narrow = (f(h / 2.0)? - f(-h / 2.0)?) / h;
        Ok((wide, narrow))
    };
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    let mut score = |analytic: f64, (wide, narrow): (f64, f64)| {
        if (wide - narrow).abs() > 1e-6 * wide.abs().max(narrow.abs()).max(1e-4) {
            skipped += 1;
        } else {
            checked += 1;
            worst = worst.max(rel(analytic, wide));
        }
    };
    let counts: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    for (t, &len) in counts.iter().enumerate() {
        for j in 0..len {
            let orig = net.params()[t][j];
            let d = diffs(&mut |dh| {
                net.params_mut()[t][j] = orig + dh;
                let l = loss(net, x);
                net.params_mut()[t][j] = orig;
                l
            })?;
            score(grads.0[t][j], d);
        }
    }
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        let d = diffs(&mut |dh| {
            xp[[r, c]] = orig + dh;
            let l = loss(net, &xp);
            xp[[r, c]] = orig;
            l
        })?;
        score(dx[[r, c]], d);
    }
    if skipped * 20 > checked + skipped {
        return Err(Error::State(format!(
            "gradient check skipped {skipped} of {} non-smooth coordinates",
            checked + skipped
        )));
    }
    log::debug!(
        "gradient check: {checked} coordinates, {skipped} skipped at kinks, worst {worst:e}"
    );
    Ok(worst)
}
