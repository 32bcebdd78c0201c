//! Learned stand-ins for the two power readings.
//!
//! Two predictors are trained from logged `(w, power)` pairs: one for the
//! interference-plus-noise reading and one for the signal power. The
//! model-based form mirrors the true structure `w^H A w` with a low-rank PSD
//! factor, `‖Q^H w‖² + b`; the FC form is a plain regression network. Either
//! pair can then answer the agent in place of the radio, and the switching
//! controller decides when real measurements are worth spending.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, Axis};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, BestBeam, StepSource, TrajectoryRow};
use crate::array::{Combiner, PhaseCodebook, PhaseVector};
use crate::channel::Scenario;
use crate::environment::{estimate_sinr, ActualEnvironment, Environment, PowerMeasurement};
use crate::error::{Error, Result};
use crate::neuralnet::{
    mse_loss, Activation, AdamState, DenseNet, Layer, LrSchedule, ScheduleUnit,
};

/// Floor on a predicted interference-plus-noise power so the SINR estimate
/// stays defined.
pub const MIN_PREDICTED_POWER: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerKind {
    /// `P_{I+N}`.
    Interference,
    /// `P_S`.
    Signal,
}

/// Logged combiners with the power read for each.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateDataset {
    kind: PowerKind,
    antennas: usize,
    samples: Vec<(Combiner, f64)>,
}

impl SurrogateDataset {
    pub fn new(kind: PowerKind, antennas: usize) -> Self {
        Self {
            kind,
            antennas,
            samples: Vec::new(),
        }
    }

    pub fn kind(&self) -> PowerKind {
        self.kind
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(Combiner, f64)] {
        &self.samples
    }

    pub fn push(&mut self, w: Combiner, power: f64) -> Result<()> {
        if w.len() != self.antennas {
            return Err(Error::Shape(format!(
                "combiner has {} weights, dataset expects {}",
                w.len(),
                self.antennas
            )));
        }
        if !(power >= 0.0 && power.is_finite()) {
            return Err(Error::invalid(format!(
                "power must be finite and >= 0, got {power}"
            )));
        }
        self.samples.push((w, power));
        Ok(())
    }

    pub fn extend(&mut self, other: &SurrogateDataset) -> Result<()> {
        if other.antennas != self.antennas || other.kind != self.kind {
            return Err(Error::invalid("datasets differ in kind or antenna count"));
        }
        self.samples.extend(other.samples.iter().cloned());
        Ok(())
    }

    /// Splits off the last `fraction` of samples.
    pub fn split(&self, fraction: f64) -> (SurrogateDataset, SurrogateDataset) {
        let held = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - held.min(self.len());
        let mut head = SurrogateDataset::new(self.kind, self.antennas);
        let mut tail = SurrogateDataset::new(self.kind, self.antennas);
        head.samples = self.samples[..cut].to_vec();
        tail.samples = self.samples[cut..].to_vec();
        (head, tail)
    }

    pub fn targets(&self) -> Array1<f64> {
        self.samples.iter().map(|(_, p)| *p).collect()
    }

    /// Real parts then imaginary parts, one row per sample.
    fn cartesian(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let m = self.antennas;
        let mut x = Array2::zeros((rows.len(), m));
        let mut y = Array2::zeros((rows.len(), m));
        for (r, &i) in rows.iter().enumerate() {
            for (j, v) in self.samples[i].0.weights().iter().enumerate() {
                x[[r, j]] = v.re;
                y[[r, j]] = v.im;
            }
        }
        (x, y)
    }

    /// Sample order that depends only on the content, so training does not
    /// care in which order samples were appended.
    fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            let (wa, pa) = &self.samples[a];
            let (wb, pb) = &self.samples[b];
            pa.total_cmp(pb).then_with(|| {
                wa.weights()
                    .iter()
                    .zip(wb.weights())
                    .map(|(u, v)| u.re.total_cmp(&v.re).then(u.im.total_cmp(&v.im)))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        idx
    }

    pub fn csv_header(antennas: usize) -> String {
        let mut cols: Vec<String> = (1..=antennas).map(|i| format!("re_{i}")).collect();
        cols.extend((1..=antennas).map(|i| format!("im_{i}")));
        cols.push("power_linear".into());
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::csv_header(self.antennas))?;
        for (w, p) in &self.samples {
            let mut cols: Vec<String> = w.weights().iter().map(|v| v.re.to_string()).collect();
            cols.extend(w.weights().iter().map(|v| v.im.to_string()));
            cols.push(p.to_string());
            writeln!(out, "{}", cols.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, kind: PowerKind) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Csv("empty dataset file".into()))?
            .map_err(|e| Error::Csv(e.to_string()))?;
        let cols = header.trim().split(',').count();
        if cols < 3 || cols % 2 == 0 {
            return Err(Error::Csv(format!(
                "header has {cols} columns, expected 2M+1"
            )));
        }
        let m = (cols - 1) / 2;
        if header.trim() != Self::csv_header(m) {
            return Err(Error::Csv(format!("unexpected header `{}`", header.trim())));
        }
        let mut data = SurrogateDataset::new(kind, m);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Csv(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Csv(format!("line {}: {e}", n + 2)))?;
            if vals.len() != cols {
                return Err(Error::Csv(format!(
                    "line {}: {} columns, expected {cols}",
                    n + 2,
                    vals.len()
                )));
            }
            let w = (0..m)
                .map(|j| Complex64::new(vals[j], vals[m + j]))
                .collect();
            data.push(Combiner::from_weights(w), vals[2 * m])
                .map_err(|e| Error::Csv(format!("line {}: {e}", n + 2)))?;
        }
        Ok(data)
    }
}

/// `‖Q^H w‖² + c²`, with `Q = A + jB` stored as two real matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBasedPredictor {
    a: Array2<f64>,
    b: Array2<f64>,
    /// Square root of the noise offset; `None` is the literal form without
    /// an offset.
    c: Option<f64>,
}

impl ModelBasedPredictor {
    /// Random factor sized so a unit-norm `w` predicts about 1.
    pub fn new<R: Rng>(antennas: usize, rank: usize, offset: bool, rng: &mut R) -> Result<Self> {
        if antennas == 0 || rank == 0 {
            return Err(Error::invalid(
                "model-based predictor needs M >= 1 and rank >= 1",
            ));
        }
        let normal = Normal::new(0.0, (0.5 / rank as f64).sqrt()).expect("positive std");
        let a = Array2::from_shape_simple_fn((antennas, rank), || normal.sample(rng));
        let b = Array2::from_shape_simple_fn((antennas, rank), || normal.sample(rng));
        Ok(Self {
            a,
            b,
            c: offset.then_some(0.3),
        })
    }

    /// From an explicit complex factor and optional offset `b ≥ 0`.
    pub fn from_factor(q: &Array2<Complex64>, offset: Option<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::invalid("empty factor"));
        }
        if let Some(b) = offset {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::invalid(format!("offset must be >= 0, got {b}")));
            }
        }
        Ok(Self {
            a: q.mapv(|v| v.re),
            b: q.mapv(|v| v.im),
            c: offset.map(f64::sqrt),
        })
    }

    pub fn antennas(&self) -> usize {
        self.a.nrows()
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn factor(&self) -> Array2<Complex64> {
        let mut q = Array2::zeros(self.a.dim());
        ndarray::Zip::from(&mut q)
            .and(&self.a)
            .and(&self.b)
            .for_each(|q, &re, &im| *q = Complex64::new(re, im));
        q
    }

    pub fn offset(&self) -> Option<f64> {
        self.c.map(|c| c * c)
    }

    pub fn predict(&self, w: &Combiner) -> f64 {
        let q = self.factor();
        let quad: f64 = q
            .columns()
            .into_iter()
            .map(|col| {
                let z: Complex64 = col
                    .iter()
                    .zip(w.weights())
                    .map(|(qm, wm)| qm.conj() * wm)
                    .sum();
                z.norm_sqr()
            })
            .sum();
        quad + self.offset().unwrap_or(0.0)
    }

    /// Batch prediction with the intermediate `Re`, `Im` of `Q^H w`.
    fn forward(&self, x: &Array2<f64>, y: &Array2<f64>) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
        let re = x.dot(&self.a) + y.dot(&self.b);
        let im = y.dot(&self.a) - x.dot(&self.b);
        let c2 = self.c.map_or(0.0, |c| c * c);
        let pred = (&re * &re + &im * &im).sum_axis(Axis(1)) + c2;
        (pred, re, im)
    }

    /// Gradients of `Σ g_n · pred_n` with respect to `(A, B, c)`.
    fn gradients(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        re: &Array2<f64>,
        im: &Array2<f64>,
        g: &Array1<f64>,
    ) -> (Array2<f64>, Array2<f64>, f64) {
        let gcol = g.view().insert_axis(Axis(1));
        let g_re = re * &gcol;
        let g_im = im * &gcol;
        let da = (x.t().dot(&g_re) + y.t().dot(&g_im)) * 2.0;
        let db = (y.t().dot(&g_re) - x.t().dot(&g_im)) * 2.0;
        let dc = self.c.map_or(0.0, |c| 2.0 * c * g.sum());
        (da, db, dc)
    }

    /// Worst relative error between the analytic and central-difference
    /// gradients of the mean squared error on `data`.
    pub fn gradient_check(&mut self, data: &SurrogateDataset) -> Result<f64> {
        if data.is_empty() || data.antennas() != self.antennas() {
            return Err(Error::Shape(format!(
                "{} samples for {} antennas against a predictor for {}",
                data.len(),
                data.antennas(),
                self.antennas()
            )));
        }
        let rows: Vec<usize> = (0..data.len()).collect();
        let (x, y) = data.cartesian(&rows);
        let t = data.targets();
        let loss = |p: &ModelBasedPredictor| {
            let (pred, _, _) = p.forward(&x, &y);
            (&pred - &t).mapv(|d| d * d).mean().unwrap_or(0.0)
        };
        let (pred, re, im) = self.forward(&x, &y);
        let g = (&pred - &t) * (2.0 / t.len() as f64);
        let (da, db, dc) = self.gradients(&x, &y, &re, &im, &g);
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (which, analytic) in [(0, &da), (1, &db)] {
            for (idx, &a) in analytic.indexed_iter() {
                let set = |p: &mut ModelBasedPredictor, v: f64| {
                    if which == 0 {
                        p.a[idx] = v
                    } else {
                        p.b[idx] = v
                    }
                };
                let orig = if which == 0 { self.a[idx] } else { self.b[idx] };
                set(self, orig + h);
                let up = loss(self);
                set(self, orig - h);
                let down = loss(self);
                set(self, orig);
                worst = worst.max(rel(a, (up - down) / (2.0 * h)));
            }
        }
        if let Some(c) = self.c {
            self.c = Some(c + h);
            let up = loss(self);
            self.c = Some(c - h);
            let down = loss(self);
            self.c = Some(c);
            worst = worst.max(rel(dc, (up - down) / (2.0 * h)));
        }
        Ok(worst)
    }

    fn rescale(&mut self, power_factor: f64) {
        let amp = power_factor.sqrt();
        self.a *= amp;
        self.b *= amp;
        if let Some(c) = self.c.as_mut() {
            *c *= amp;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcEncoding {
    /// `[Re(w), Im(w)]`, 2M inputs.
    #[default]
    Cartesian,
    /// `arg(w)`, M inputs.
    Phase,
}

/// Regression network on an encoding of `w`; outputs are in units of
/// `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcPredictor {
    net: DenseNet,
    encoding: FcEncoding,
    antennas: usize,
    scale: f64,
}

impl FcPredictor {
    pub fn new<R: Rng>(
        antennas: usize,
        hidden: usize,
        encoding: FcEncoding,
        rng: &mut R,
    ) -> Result<Self> {
        if antennas == 0 || hidden == 0 {
            return Err(Error::invalid(
                "FC predictor needs M >= 1 and a positive hidden width",
            ));
        }
        let inputs = match encoding {
            FcEncoding::Cartesian => 2 * antennas,
            FcEncoding::Phase => antennas,
        };
        Ok(Self {
            net: DenseNet::mlp(
                inputs,
                &[hidden, hidden],
                1,
                true,
                Activation::Identity,
                rng,
            ),
            encoding,
            antennas,
            scale: 1.0,
        })
    }

    /// Worst relative error between backpropagated and central-difference
    /// gradients on the encoded `data`.
    pub fn gradient_check<R: Rng>(&mut self, data: &SurrogateDataset, rng: &mut R) -> Result<f64> {
        if data.is_empty() || data.antennas() != self.antennas {
            return Err(Error::Shape(format!(
                "{} samples for {} antennas against a predictor for {}",
                data.len(),
                data.antennas(),
                self.antennas
            )));
        }
        let rows: Vec<usize> = (0..data.len()).collect();
        let (x, y) = data.cartesian(&rows);
        let input = self.encode(&x, &y);
        crate::neuralnet::gradient_check(&mut self.net, &input, rng)
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn encoding(&self) -> FcEncoding {
        self.encoding
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn encode(&self, x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        match self.encoding {
            FcEncoding::Cartesian => {
                ndarray::concatenate(Axis(1), &[x.view(), y.view()]).expect("same rows")
            }
            FcEncoding::Phase => {
                let mut out = x.clone();
                ndarray::Zip::from(&mut out)
                    .and(y)
                    .for_each(|o, &im| *o = im.atan2(*o));
                out
            }
        }
    }

    /// Raw network output in watts; may be negative.
    pub fn predict(&self, w: &Combiner) -> f64 {
        let x = Array2::from_shape_fn((1, self.antennas), |(_, j)| w.weights()[j].re);
        let y = Array2::from_shape_fn((1, self.antennas), |(_, j)| w.weights()[j].im);
        let out = self
            .net
            .forward(&self.encode(&x, &y))
            .expect("encoding matches the input layer");
        out[[0, 0]] * self.scale
    }

    /// Changes the output unit, keeping predictions unchanged.
    fn set_scale(&mut self, scale: f64) {
        let ratio = self.scale / scale;
        if let Some(Layer::Dense { weight, bias }) = self
            .net
            .layers_mut()
            .iter_mut()
            .rev()
            .find(|l| matches!(l, Layer::Dense { .. }))
        {
            *weight *= ratio;
            *bias *= ratio;
        }
        self.scale = scale;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    ModelBased(ModelBasedPredictor),
    Fc(FcPredictor),
}

impl Predictor {
    pub fn antennas(&self) -> usize {
        match self {
            Predictor::ModelBased(p) => p.antennas(),
            Predictor::Fc(p) => p.antennas,
        }
    }

    /// Predicted power in watts. Model-based predictions are never negative;
    /// FC outputs are returned as-is.
    pub fn predict(&self, w: &Combiner) -> f64 {
        match self {
            Predictor::ModelBased(p) => p.predict(w),
            Predictor::Fc(p) => p.predict(w),
        }
    }

    /// Predictions for every sample of a dataset.
    pub fn predict_dataset(&self, data: &SurrogateDataset) -> Array1<f64> {
        data.samples()
            .iter()
            .map(|(w, _)| self.predict(w))
            .collect()
    }
}

/// `Σ (P̂ − P)² / Σ P²` over a dataset.
pub fn nmse(p: &Predictor, data: &SurrogateDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("NMSE of an empty dataset"));
    }
    let truth = data.targets();
    let energy: f64 = truth.iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::invalid("NMSE undefined for an all-zero dataset"));
    }
    let err: f64 = p
        .predict_dataset(data)
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(err / energy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    ModelBased,
    Fc,
}

impl Architecture {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Architecture::ModelBased => 1e-1,
            Architecture::Fc => 1e-2,
        }
    }

    pub fn default_milestones(self) -> Vec<usize> {
        match self {
            Architecture::ModelBased => vec![50, 300, 400],
            Architecture::Fc => vec![100, 300, 400],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Architecture default when absent.
    pub learning_rate: Option<f64>,
    /// Epochs after which the rate is multiplied by `lr_factor`; architecture
    /// default when absent.
    pub milestones: Option<Vec<usize>>,
    pub lr_factor: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 512,
            learning_rate: None,
            milestones: None,
            lr_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs: must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size: must be >= 1".to_string());
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                problems.push(format!("learning_rate: must be > 0, got {lr}"));
            }
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            problems.push(format!("lr_factor: must be > 0, got {}", self.lr_factor));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean normalized batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Training-set MSE in watts² after the last epoch.
    pub final_mse: f64,
    /// Dataset mean used to normalize targets.
    pub scale: f64,
}

/// Index batches of at most `size`; a trailing single sample joins the
/// previous batch so batch-norm always sees two or more rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - size - 1;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

/// Fits a predictor to a dataset with Adam on the MSE of mean-normalized
/// targets, starting from the predictor's current parameters.
pub fn train_surrogate(
    p: &mut Predictor,
    data: &SurrogateDataset,
    cfg: &TrainingConfig,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if data.antennas() != p.antennas() {
        return Err(Error::Shape(format!(
            "dataset has {} antennas, predictor {}",
            data.antennas(),
            p.antennas()
        )));
    }
    let arch = match p {
        Predictor::ModelBased(_) => Architecture::ModelBased,
        Predictor::Fc(_) => Architecture::Fc,
    };
    if arch == Architecture::Fc && data.len() < 2 {
        return Err(Error::invalid(
            "the FC predictor needs at least two samples",
        ));
    }
    let lr = cfg
        .learning_rate
        .unwrap_or_else(|| arch.default_learning_rate());
    let milestones = cfg
        .milestones
        .clone()
        .unwrap_or_else(|| arch.default_milestones());
    let schedule = LrSchedule::multistep(cfg.lr_factor, &milestones);

    let targets = data.targets();
    let mean = targets.mean().unwrap_or(0.0);
    let scale = if mean > 0.0 { mean } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = data.canonical_order();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    match p {
        Predictor::ModelBased(mb) => {
            mb.rescale(1.0 / scale);
            let (m, r) = mb.a.dim();
            let mut opt =
                AdamState::new(&[m * r, m * r, 1], lr).with_schedule(schedule, ScheduleUnit::Epoch);
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                let parts = batches(&order, cfg.batch_size);
                for batch in &parts {
                    let (x, y) = data.cartesian(batch);
                    let t: Array1<f64> = batch.iter().map(|&i| targets[i] / scale).collect();
                    let (pred, re, im) = mb.forward(&x, &y);
                    let diff = &pred - &t;
                    total += diff.mapv(|d| d * d).mean().unwrap_or(0.0);
                    let g = diff * (2.0 / batch.len() as f64);
                    let (da, db, dc) = mb.gradients(&x, &y, &re, &im, &g);
                    let grads = crate::neuralnet::Gradients(vec![
                        da.iter().copied().collect(),
                        db.iter().copied().collect(),
                        vec![dc],
                    ]);
                    let mut c = mb.c.unwrap_or(0.0);
                    opt.step(
                        vec![
                            mb.a.as_slice_mut().expect("standard layout"),
                            mb.b.as_slice_mut().expect("standard layout"),
                            std::slice::from_mut(&mut c),
                        ],
                        &grads,
                    )?;
                    if mb.c.is_some() {
                        mb.c = Some(c);
                    }
                }
                epoch_losses.push(total / parts.len() as f64);
                opt.end_epoch();
            }
            mb.rescale(scale);
        }
        Predictor::Fc(fc) => {
            fc.set_scale(scale);
            let mut opt =
                AdamState::for_net(&fc.net, lr).with_schedule(schedule, ScheduleUnit::Epoch);
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                let parts = batches(&order, cfg.batch_size);
                for batch in &parts {
                    let (x, y) = data.cartesian(batch);
                    let input = fc.encode(&x, &y);
                    let t =
                        Array2::from_shape_fn((batch.len(), 1), |(i, _)| targets[batch[i]] / scale);
                    let out = fc.net.forward_train(&input)?;
                    let (loss, grad) = mse_loss(&out, &t)?;
                    total += loss;
                    let (grads, _) = fc.net.backward(&grad)?;
                    opt.step(fc.net.params_mut(), &grads)?;
                }
                epoch_losses.push(total / parts.len() as f64);
                opt.end_epoch();
            }
        }
    }

    let final_mse = p
        .predict_dataset(data)
        .iter()
        .zip(&targets)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / data.len() as f64;
    Ok(TrainingReport {
        epoch_losses,
        final_mse,
        scale,
    })
}

/// Predictor settings shared by the interference and signal models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub architecture: Architecture,
    /// Rank of the interference factor; `K + 2` when absent.
    pub interference_rank: Option<usize>,
    pub signal_rank: usize,
    /// Drop the learned noise offset and use `‖Q^H w‖²` alone.
    pub literal: bool,
    /// Hidden width `M′` of the FC predictor.
    pub fc_hidden: usize,
    pub fc_encoding: FcEncoding,
    pub training: TrainingConfig,
    pub switch: SwitchConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::ModelBased,
            interference_rank: None,
            signal_rank: 2,
            literal: false,
            fc_hidden: 64,
            fc_encoding: FcEncoding::Cartesian,
            training: TrainingConfig::default(),
            switch: SwitchConfig::default(),
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.interference_rank == Some(0) {
            problems.push("interference_rank: must be >= 1".to_string());
        }
        if self.signal_rank == 0 {
            problems.push("signal_rank: must be >= 1".to_string());
        }
        if self.fc_hidden == 0 {
            problems.push("fc_hidden: must be >= 1".to_string());
        }
        for r in [self.training.validate(), self.switch.validate()] {
            if let Err(e) = r {
                match e {
                    Error::Config(p) => problems.extend(p),
                    other => problems.push(other.to_string()),
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// A fresh predictor for one of the two readings. `interferers` sets the
    /// default interference rank.
    pub fn build<R: Rng>(
        &self,
        kind: PowerKind,
        antennas: usize,
        interferers: usize,
        rng: &mut R,
    ) -> Result<Predictor> {
        match self.architecture {
            Architecture::ModelBased => {
                let (rank, offset) = match kind {
                    PowerKind::Interference => (
                        self.interference_rank.unwrap_or(interferers + 2),
                        !self.literal,
                    ),
                    PowerKind::Signal => (self.signal_rank, false),
                };
                Ok(Predictor::ModelBased(ModelBasedPredictor::new(
                    antennas, rank, offset, rng,
                )?))
            }
            Architecture::Fc => Ok(Predictor::Fc(FcPredictor::new(
                antennas,
                self.fc_hidden,
                self.fc_encoding,
                rng,
            )?)),
        }
    }
}

/// Answers the agent from a pair of trained predictors instead of the radio.
#[derive(Debug, Clone)]
pub struct SurrogateEnvironment {
    signal: Predictor,
    interference: Predictor,
    codebook: PhaseCodebook,
    queries: usize,
}

impl SurrogateEnvironment {
    pub fn new(
        signal: Predictor,
        interference: Predictor,
        codebook: PhaseCodebook,
    ) -> Result<Self> {
        if signal.antennas() != interference.antennas() {
            return Err(Error::Shape(
                "signal and interference predictors differ in M".into(),
            ));
        }
        Ok(Self {
            signal,
            interference,
            codebook,
            queries: 0,
        })
    }

    pub fn signal(&self) -> &Predictor {
        &self.signal
    }

    pub fn interference(&self) -> &Predictor {
        &self.interference
    }

    /// Virtual measurement pairs answered so far.
    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn predicted_sinr(&self, w: &Combiner) -> f64 {
        let p_in = self.interference.predict(w).max(MIN_PREDICTED_POWER);
        self.signal.predict(w).max(0.0) / p_in
    }
}

impl Environment for SurrogateEnvironment {
    fn codebook(&self) -> &PhaseCodebook {
        &self.codebook
    }

    fn antennas(&self) -> usize {
        self.signal.antennas()
    }

    fn measure(&mut self, w: &Combiner) -> Result<PowerMeasurement> {
        if w.len() != self.antennas() {
            return Err(Error::Shape(format!(
                "combiner has {} weights for {} antennas",
                w.len(),
                self.antennas()
            )));
        }
        self.queries += 1;
        let p_in = self.interference.predict(w).max(MIN_PREDICTED_POWER);
        let p_s = self.signal.predict(w).max(0.0);
        Ok(PowerMeasurement {
            signal_interference_noise: p_s + p_in,
            interference_noise: p_in,
        })
    }
}

/// When to trust the surrogate and when to go back to the radio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchConfig {
    /// Real interactions per round.
    pub real_steps: usize,
    pub rounds: usize,
    /// Retraining is skipped when both predictors already reach this NMSE on
    /// the round's fresh measurements.
    pub nmse_threshold: f64,
    /// Virtual phase ends once the best virtual SINR has not improved for
    /// this many iterations.
    pub stagnation_window: usize,
    /// Hard cap on virtual iterations per round; 0 disables the surrogate.
    pub max_virtual_steps: usize,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            real_steps: 250,
            rounds: 4,
            nmse_threshold: 0.05,
            stagnation_window: 500,
            max_virtual_steps: 1000,
        }
    }
}

impl SwitchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.real_steps == 0 {
            problems.push("real_steps: must be >= 1".to_string());
        }
        if self.rounds == 0 {
            problems.push("rounds: must be >= 1".to_string());
        }
        if !(self.nmse_threshold >= 0.0 && self.nmse_threshold.is_finite()) {
            problems.push(format!(
                "nmse_threshold: must be >= 0, got {}",
                self.nmse_threshold
            ));
        }
        if self.stagnation_window == 0 {
            problems.push("stagnation_window: must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchPhase {
    Real,
    Virtual,
}

/// Protocol state: which environment answers the agent and how much real
/// budget each round has left.
#[derive(Debug, Clone)]
pub struct SwitchController {
    config: SwitchConfig,
    phase: SwitchPhase,
    round: usize,
    real_left: usize,
}

impl SwitchController {
    pub fn new(config: SwitchConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            real_left: config.real_steps,
            config,
            phase: SwitchPhase::Real,
            round: 0,
        })
    }

    pub fn config(&self) -> &SwitchConfig {
        &self.config
    }

    pub fn phase(&self) -> SwitchPhase {
        self.phase
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn finished(&self) -> bool {
        self.round >= self.config.rounds
    }

    /// Records one real interaction; returns true when the round's real
    /// budget is spent.
    fn real_step_done(&mut self) -> bool {
        self.real_left = self.real_left.saturating_sub(1);
        self.real_left == 0
    }

    fn enter_virtual(&mut self) {
        self.phase = SwitchPhase::Virtual;
    }

    fn end_round(&mut self) {
        self.round += 1;
        self.phase = SwitchPhase::Real;
        self.real_left = self.config.real_steps;
    }

    /// Whether the virtual phase should stop after `steps` virtual
    /// iterations, the last improvement of the best virtual SINR having been
    /// at `last_improvement`.
    fn virtual_done(&self, steps: usize, last_improvement: usize) -> bool {
        steps >= self.config.max_virtual_steps
            || steps - last_improvement >= self.config.stagnation_window
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub real_steps: usize,
    pub retrained: bool,
    /// NMSE of the previous predictors on this round's measurements, when
    /// there were previous predictors.
    pub interference_nmse: Option<f64>,
    pub signal_nmse: Option<f64>,
    pub virtual_steps: usize,
    /// Best beam of the virtual phase, re-measured on the radio.
    pub validated_sinr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AssistedOutcome {
    pub best: PhaseVector,
    /// Measured on the actual environment.
    pub best_sinr: f64,
    pub trajectory: Vec<TrajectoryRow>,
    pub rounds: Vec<RoundReport>,
    /// Real on/off measurement pairs spent.
    pub real_measurements: usize,
    pub virtual_steps: usize,
    pub interference_data: SurrogateDataset,
    pub signal_data: SurrogateDataset,
    pub signal_model: Option<Predictor>,
    pub interference_model: Option<Predictor>,
}

fn record(
    d_in: &mut SurrogateDataset,
    d_s: &mut SurrogateDataset,
    action: &PhaseVector,
    m: &PowerMeasurement,
) -> Result<()> {
    let w = action.to_combiner();
    d_in.push(w.clone(), m.interference_noise.max(0.0))?;
    d_s.push(w, m.signal().max(0.0))
}

/// Learning that alternates between the radio and a surrogate trained on
/// everything the radio has answered so far. The reported beam is the best
/// one actually measured.
pub fn run_assisted_learning(
    agent: &mut Agent,
    env: &mut ActualEnvironment,
    cfg: &SurrogateConfig,
    monitor: Option<&Scenario>,
) -> Result<AssistedOutcome> {
    cfg.validate()?;
    let m = env.antennas();
    let k = env.scenario().interferers.len();
    let mut controller = SwitchController::new(cfg.switch.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed ^ 0x5eed_5a11);
    let readings_before = env.readings();
    let mut d_in = SurrogateDataset::new(PowerKind::Interference, m);
    let mut d_s = SurrogateDataset::new(PowerKind::Signal, m);
    let mut models: Option<(Predictor, Predictor)> = None;
    let mut rounds = Vec::new();
    let mut best = BestBeam::default();
    let mut virtual_total = 0;

    let mut session = agent.begin(env)?;
    while !controller.finished() {
        let round = controller.round();
        let mut fresh_in = SurrogateDataset::new(PowerKind::Interference, m);
        let mut fresh_s = SurrogateDataset::new(PowerKind::Signal, m);
        let mut real_steps = 0;
        loop {
            let rec = agent.iterate(&mut session, env, monitor, StepSource::Real)?;
            record(
                &mut fresh_in,
                &mut fresh_s,
                &rec.action,
                &rec.outcome.measurement,
            )?;
            best.offer(&rec.action, rec.outcome.sinr);
            real_steps += 1;
            if controller.real_step_done() {
                break;
            }
        }
        d_in.extend(&fresh_in)?;
        d_s.extend(&fresh_s)?;

        let mut report = RoundReport {
            round,
            real_steps,
            retrained: false,
            interference_nmse: None,
            signal_nmse: None,
            virtual_steps: 0,
            validated_sinr: None,
        };
        if cfg.switch.max_virtual_steps == 0 {
            rounds.push(report);
            controller.end_round();
            continue;
        }

        let stale = match &models {
            None => true,
            Some((sig, inter)) => {
                let e_in = nmse(inter, &fresh_in).unwrap_or(f64::INFINITY);
                let e_s = nmse(sig, &fresh_s).unwrap_or(f64::INFINITY);
                report.interference_nmse = Some(e_in);
                report.signal_nmse = Some(e_s);
                e_in >= cfg.switch.nmse_threshold || e_s >= cfg.switch.nmse_threshold
            }
        };
        if stale {
            let (mut sig, mut inter) = match models.take() {
                Some(pair) => pair,
                None => (
                    cfg.build(PowerKind::Signal, m, k, &mut rng)?,
                    cfg.build(PowerKind::Interference, m, k, &mut rng)?,
                ),
            };
            let mut training = cfg.training.clone();
            training.seed = cfg.training.seed.wrapping_add(round as u64);
            train_surrogate(&mut inter, &d_in, &training)?;
            train_surrogate(&mut sig, &d_s, &training)?;
            models = Some((sig, inter));
            report.retrained = true;
        }

        controller.enter_virtual();
        let (sig, inter) = models.clone().expect("trained above");
        let mut virtual_env = SurrogateEnvironment::new(sig, inter, env.codebook().clone())?;
        session.prev_sinr = virtual_env.predicted_sinr(&session.state.to_combiner());
        let mut virtual_best = BestBeam::default();
        let (mut steps, mut last_improvement) = (0, 0);
        while !controller.virtual_done(steps, last_improvement) {
            let rec =
                agent.iterate(&mut session, &mut virtual_env, monitor, StepSource::Virtual)?;
            steps += 1;
            if virtual_best.offer(&rec.action, rec.outcome.sinr) {
                last_improvement = steps;
            }
        }
        virtual_total += steps;
        report.virtual_steps = steps;

        // Back on the radio, resume from the virtual phase's best beam.
        if let Some(beam) = virtual_best.beam.clone() {
            let measurement = env.measure(&beam.to_combiner())?;
            let sinr = estimate_sinr(&measurement)?;
            record(&mut d_in, &mut d_s, &beam, &measurement)?;
            best.offer(&beam, sinr);
            session.state = beam;
            session.prev_sinr = sinr;
            report.validated_sinr = Some(sinr);
        } else {
            let measurement = env.measure(&session.state.to_combiner())?;
            session.prev_sinr = estimate_sinr(&measurement)?;
        }
        rounds.push(report);
        controller.end_round();
    }

    let (signal_model, interference_model) = match models {
        Some((s, i)) => (Some(s), Some(i)),
        None => (None, None),
    };
    Ok(AssistedOutcome {
        best: best.beam.clone().expect("at least one real step"),
        best_sinr: best.sinr,
        trajectory: session.trajectory,
        rounds,
        real_measurements: (env.readings() - readings_before) / 2,
        virtual_steps: virtual_total,
        interference_data: d_in,
        signal_data: d_s,
        signal_model,
        interference_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{learn, ActorCriticConfig};
    use crate::array::ArrayGeometry;
    use crate::channel::{build_scenario, ScenarioConfig};
    use crate::environment::measure_interference_plus_noise;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_combiner<R: Rng>(m: usize, rng: &mut R) -> Combiner {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let v: Vec<Complex64> = (0..m)
            .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)))
            .collect();
        let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        Combiner::from_weights(v.into_iter().map(|z| z / n).collect())
    }

    fn random_factor<R: Rng>(m: usize, r: usize, rng: &mut R) -> Array2<Complex64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_simple_fn((m, r), || {
            Complex64::new(normal.sample(rng), normal.sample(rng))
        })
    }

    fn scenario_with_interferers(m: usize, k: usize, seed: u64) -> Scenario {
        let mut cfg = ScenarioConfig::new(m, 3);
        cfg.seed = seed;
        cfg.target.azimuth_deg = Some(5.0);
        cfg.interferers.count = k;
        cfg.interferers.azimuths_deg = Some((0..k).map(|i| -40.0 + 30.0 * i as f64).collect());
        build_scenario(&cfg).unwrap()
    }

    /// `[√P_x·H | σ·I]`: the exact factor of the interference-plus-noise
    /// quadratic form.
    fn exact_interference_factor(s: &Scenario) -> Array2<Complex64> {
        let m = s.antennas();
        let k = s.interferers.len();
        let mut q = Array2::zeros((m, k + m));
        for (j, h) in s.interferers.iter().enumerate() {
            for (i, v) in h.vector().iter().enumerate() {
                q[[i, j]] = v * s.transmit_power.sqrt();
            }
        }
        for i in 0..m {
            q[[i, k + i]] = Complex64::new(s.noise_power.sqrt(), 0.0);
        }
        q
    }

    fn exact_signal_factor(s: &Scenario) -> Array2<Complex64> {
        Array2::from_shape_fn((s.antennas(), 1), |(i, _)| {
            s.target.vector()[i] * s.transmit_power.sqrt()
        })
    }

    fn realizable_dataset(q: &Array2<Complex64>, n: usize, seed: u64) -> SurrogateDataset {
        let p = ModelBasedPredictor::from_factor(q, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = SurrogateDataset::new(PowerKind::Interference, q.nrows());
        for _ in 0..n {
            let w = random_combiner(q.nrows(), &mut rng);
            let v = p.predict(&w);
            d.push(w, v).unwrap();
        }
        d
    }

    #[test]
    fn identity_factor_predicts_unit_norm() {
        let q = Array2::from_shape_fn((5, 5), |(i, j)| {
            if i == j {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        let p = ModelBasedPredictor::from_factor(&q, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert!((p.predict(&random_combiner(5, &mut rng)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_factor_predicts_zero() {
        let p = ModelBasedPredictor::from_factor(&Array2::zeros((4, 2)), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            assert_eq!(p.predict(&random_combiner(4, &mut rng)), 0.0);
        }
    }

    #[test]
    fn exact_factor_reproduces_interference_plus_noise() {
        let s = scenario_with_interferers(8, 2, 3);
        let literal =
            ModelBasedPredictor::from_factor(&exact_interference_factor(&s), None).unwrap();
        let q_h = exact_interference_factor(&s)
            .slice(ndarray::s![.., ..2])
            .to_owned();
        let with_offset = ModelBasedPredictor::from_factor(&q_h, Some(s.noise_power)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let w = random_combiner(8, &mut rng);
            let truth = measure_interference_plus_noise(&s, &w);
            assert!((literal.predict(&w) - truth).abs() <= 1e-12 * truth.max(1.0));
            assert!((with_offset.predict(&w) - truth).abs() <= 1e-12 * truth.max(1.0));
        }
    }

    #[test]
    fn predictions_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelBasedPredictor::new(6, 3, true, &mut rng).unwrap();
        for _ in 0..10_000 {
            assert!(p.predict(&random_combiner(6, &mut rng)) >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn prediction_ignores_global_phase(seed in 0u64..1000, rot in -3.2f64..3.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ModelBasedPredictor::new(4, 2, true, &mut rng).unwrap();
            let w = random_combiner(4, &mut rng);
            let turned = Combiner::from_weights(w.weights().iter().map(|v| v * Complex64::from_polar(1.0, rot)).collect());
            let (a, b) = (p.predict(&w), p.predict(&turned));
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn prediction_matches_quadratic_form(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_factor(3, 2, &mut rng);
            let p = ModelBasedPredictor::from_factor(&q, Some(0.25)).unwrap();
            let w = random_combiner(3, &mut rng);
            // w^H (Q Q^H) w + b, summed element by element.
            let mut direct = Complex64::new(0.25, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let qq: Complex64 = (0..2).map(|c| q[[i, c]] * q[[j, c]].conj()).sum();
                    direct += w.weights()[i].conj() * qq * w.weights()[j];
                }
            }
            prop_assert!((p.predict(&w) - direct.re).abs() < 1e-10);
            prop_assert!(direct.im.abs() < 1e-10);
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for offset in [true, false] {
            let mut p = ModelBasedPredictor::new(4, 3, offset, &mut rng).unwrap();
            let mut data = SurrogateDataset::new(PowerKind::Interference, 4);
            for _ in 0..12 {
                let w = random_combiner(4, &mut rng);
                data.push(w, rng.gen_range(0.0..2.0)).unwrap();
            }
            let worst = p.gradient_check(&data).unwrap();
            assert!(
                worst < 1e-4,
                "offset {offset}: worst relative error {worst}"
            );
        }
    }

    #[test]
    fn fc_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for encoding in [FcEncoding::Cartesian, FcEncoding::Phase] {
            let mut fc = FcPredictor::new(4, 10, encoding, &mut rng).unwrap();
            let mut data = SurrogateDataset::new(PowerKind::Signal, 4);
            for _ in 0..6 {
                data.push(random_combiner(4, &mut rng), 1.0).unwrap();
            }
            let worst = fc.gradient_check(&data, &mut rng).unwrap();
            assert!(worst < 1e-4, "{encoding:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn rank_one_realizable_target_is_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_factor(6, 1, &mut rng);
        let data = realizable_dataset(&q, 200, 9);
        let mut p = Predictor::ModelBased(ModelBasedPredictor::new(6, 1, false, &mut rng).unwrap());
        let report = train_surrogate(&mut p, &data, &TrainingConfig::default()).unwrap();
        let mean_sq = data.targets().mapv(|v| v * v).mean().unwrap();
        assert!(
            report.final_mse < 1e-6 * mean_sq,
            "mse {} vs {}",
            report.final_mse,
            mean_sq
        );
        assert_eq!(report.epoch_losses.len(), 500);
    }

    #[test]
    fn held_out_error_falls_with_more_data() {
        let s = scenario_with_interferers(8, 2, 10);
        let q = exact_interference_factor(&s)
            .slice(ndarray::s![.., ..2])
            .to_owned();
        let truth = ModelBasedPredictor::from_factor(&q, Some(s.noise_power)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let mut d = SurrogateDataset::new(PowerKind::Interference, 8);
            for _ in 0..n {
                let w = random_combiner(8, rng);
                let v = truth.predict(&w);
                d.push(w, v).unwrap();
            }
            d
        };
        let test = make(500, &mut rng);
        let mut errors = Vec::new();
        for n in [50, 200, 1000] {
            let data = make(n, &mut rng);
            let mut p = SurrogateConfig::default()
                .build(PowerKind::Interference, 8, 2, &mut rng)
                .unwrap();
            train_surrogate(&mut p, &data, &TrainingConfig::default()).unwrap();
            errors.push(nmse(&p, &test).unwrap());
        }
        assert!(
            errors[0] >= errors[1] && errors[1] >= errors[2],
            "{errors:?}"
        );
        assert!(errors[2] < 1e-4, "{errors:?}");
    }

    #[test]
    fn batch_larger_than_dataset_trains_full_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random_factor(4, 1, &mut rng);
        let data = realizable_dataset(&q, 10, 13);
        for arch in [Architecture::ModelBased, Architecture::Fc] {
            let cfg = SurrogateConfig {
                architecture: arch,
                ..SurrogateConfig::default()
            };
            let mut p = cfg.build(PowerKind::Signal, 4, 0, &mut rng).unwrap();
            let training = TrainingConfig {
                epochs: 50,
                ..TrainingConfig::default()
            };
            let report = train_surrogate(&mut p, &data, &training).unwrap();
            assert_eq!(report.epoch_losses.len(), 50);
            assert!(report.epoch_losses[49] < report.epoch_losses[0], "{arch:?}");
        }
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![3, 3, 3]);
        let b = batches(&order[..1], 4);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn fc_rejects_a_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut d = SurrogateDataset::new(PowerKind::Signal, 3);
        d.push(random_combiner(3, &mut rng), 1.0).unwrap();
        let mut p = Predictor::Fc(FcPredictor::new(3, 8, FcEncoding::Cartesian, &mut rng).unwrap());
        assert!(train_surrogate(&mut p, &d, &TrainingConfig::default()).is_err());
        let empty = SurrogateDataset::new(PowerKind::Signal, 3);
        assert!(train_surrogate(&mut p, &empty, &TrainingConfig::default()).is_err());
    }

    #[test]
    fn training_ignores_append_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let q = random_factor(4, 2, &mut rng);
        let data = realizable_dataset(&q, 40, 16);
        let mut reversed = SurrogateDataset::new(PowerKind::Interference, 4);
        for (w, p) in data.samples().iter().rev() {
            reversed.push(w.clone(), *p).unwrap();
        }
        let cfg = TrainingConfig {
            epochs: 20,
            batch_size: 16,
            ..TrainingConfig::default()
        };
        for arch in [Architecture::ModelBased, Architecture::Fc] {
            let sc = SurrogateConfig {
                architecture: arch,
                ..SurrogateConfig::default()
            };
            let init = sc.build(PowerKind::Interference, 4, 1, &mut rng).unwrap();
            let (mut a, mut b) = (init.clone(), init);
            train_surrogate(&mut a, &data, &cfg).unwrap();
            train_surrogate(&mut b, &reversed, &cfg).unwrap();
            assert_eq!(a, b, "{arch:?}");
        }
    }

    #[test]
    fn fc_rescaling_keeps_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut fc = FcPredictor::new(4, 8, FcEncoding::Cartesian, &mut rng).unwrap();
        let w = random_combiner(4, &mut rng);
        let before = fc.predict(&w);
        fc.set_scale(37.0);
        assert!((fc.predict(&w) - before).abs() < 1e-12 * before.abs().max(1.0));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let q = random_factor(3, 1, &mut rng);
        let data = realizable_dataset(&q, 5, 19);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("re_1,re_2,re_3,im_1,im_2,im_3,power_linear\n"));
        let back = SurrogateDataset::read_csv(&buf[..], PowerKind::Interference).unwrap();
        assert_eq!(back, data);
        assert!(SurrogateDataset::read_csv(&b"a,b,c\n1,2,3\n"[..], PowerKind::Signal).is_err());
        assert!(SurrogateDataset::read_csv(
            &b"re_1,im_1,power_linear\n1,0,-1\n"[..],
            PowerKind::Signal
        )
        .is_err());
    }

    #[test]
    fn exact_surrogate_matches_the_radio() {
        let s = scenario_with_interferers(6, 2, 20);
        let inter = Predictor::ModelBased(
            ModelBasedPredictor::from_factor(&exact_interference_factor(&s), None).unwrap(),
        );
        let sig = Predictor::ModelBased(
            ModelBasedPredictor::from_factor(&exact_signal_factor(&s), None).unwrap(),
        );
        let mut virtual_env = SurrogateEnvironment::new(sig, inter, s.codebook.clone()).unwrap();
        let mut real = ActualEnvironment::new(s.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut prev = 0.0;
        for _ in 0..50 {
            let beam = PhaseVector(
                (0..6)
                    .map(|_| s.codebook.value(rng.gen_range(0..8)))
                    .collect(),
            );
            let a = virtual_env.step(prev, &beam).unwrap();
            let b = real.step(prev, &beam).unwrap();
            assert_eq!(a.reward, b.reward);
            assert!((a.sinr - b.sinr).abs() <= 1e-9 * b.sinr.max(1.0));
            let analytic = crate::environment::analytic_sinr(&s, &beam.to_combiner());
            assert!((a.sinr - analytic).abs() <= 1e-9 * analytic.max(1.0));
            prev = b.sinr;
        }
        assert_eq!(virtual_env.queries(), 50);
    }

    #[test]
    fn without_virtual_phases_assisted_learning_is_plain_learning() {
        let s = scenario_with_interferers(4, 1, 22);
        let agent_cfg = ActorCriticConfig {
            seed: 3,
            batch_size: 16,
            ..ActorCriticConfig::default()
        };
        let cfg = SurrogateConfig {
            switch: SwitchConfig {
                real_steps: 30,
                rounds: 2,
                max_virtual_steps: 0,
                ..SwitchConfig::default()
            },
            ..SurrogateConfig::default()
        };
        let mut a1 = Agent::new(4, s.codebook.clone(), agent_cfg.clone()).unwrap();
        let mut e1 = ActualEnvironment::new(s.clone());
        let assisted = run_assisted_learning(&mut a1, &mut e1, &cfg, None).unwrap();
        let mut a2 = Agent::new(4, s.codebook.clone(), agent_cfg).unwrap();
        let mut e2 = ActualEnvironment::new(s.clone());
        let plain = learn(&mut a2, &mut e2, 60, None).unwrap();
        assert_eq!(assisted.best, plain.best);
        assert_eq!(assisted.best_sinr, plain.best_sinr);
        assert_eq!(assisted.trajectory, plain.trajectory);
        assert_eq!(assisted.real_measurements, 61);
        assert_eq!(assisted.virtual_steps, 0);
    }

    #[test]
    fn real_measurements_are_bounded_by_the_round_budget() {
        let s = scenario_with_interferers(4, 1, 23);
        let agent_cfg = ActorCriticConfig {
            seed: 4,
            batch_size: 16,
            ..ActorCriticConfig::default()
        };
        let cfg = SurrogateConfig {
            training: TrainingConfig {
                epochs: 30,
                ..TrainingConfig::default()
            },
            switch: SwitchConfig {
                real_steps: 40,
                rounds: 3,
                stagnation_window: 50,
                max_virtual_steps: 200,
                ..SwitchConfig::default()
            },
            ..SurrogateConfig::default()
        };
        let mut agent = Agent::new(4, s.codebook.clone(), agent_cfg).unwrap();
        let mut env = ActualEnvironment::new(s.clone());
        let out = run_assisted_learning(&mut agent, &mut env, &cfg, Some(&s)).unwrap();
        assert!(
            out.real_measurements <= 1 + 3 * 40 + 3,
            "{}",
            out.real_measurements
        );
        assert!(out.virtual_steps > 0);
        assert_eq!(out.rounds.len(), 3);
        assert!(out.rounds[0].retrained);
        // The reported SINR is the radio's answer for the reported beam.
        let measured = crate::environment::analytic_sinr(&s, &out.best.to_combiner());
        assert!((out.best_sinr - measured).abs() <= 1e-9 * measured);
        assert!(out
            .trajectory
            .iter()
            .any(|r| r.source == StepSource::Virtual));
        let _ = ArrayGeometry::ula(4).unwrap();
    }
}
