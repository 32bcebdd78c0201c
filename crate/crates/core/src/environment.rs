//! The measured ("actual") environment.
//!
//! Only expected powers are simulated. A beam is evaluated with two readings:
//! interference plus noise while the target is silent, then signal plus
//! interference plus noise while it transmits. Their difference estimates the
//! signal power.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize, Serializer};

use crate::array::{Combiner, PhaseCodebook, PhaseVector};
use crate::channel::Scenario;
use crate::error::{Error, Result};

/// Cap applied to dB values when they are written out.
pub const DB_CAP: f64 = 200.0;

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn capped_db(x: f64) -> f64 {
    if x.is_nan() {
        x
    } else {
        x.clamp(-DB_CAP, DB_CAP)
    }
}

pub(crate) fn ser_capped<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(capped_db(*x))
}

pub(crate) fn ser_capped_vec<S: Serializer>(
    xs: &[f64],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(xs.iter().map(|x| capped_db(*x)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerMeasurement {
    /// `P_{S+I+N}`, linear watts.
    pub signal_interference_noise: f64,
    /// `P_{I+N}`, linear watts.
    pub interference_noise: f64,
}

impl PowerMeasurement {
    /// `P_S = P_{S+I+N} - P_{I+N}`.
    pub fn signal(&self) -> f64 {
        self.signal_interference_noise - self.interference_noise
    }
}

/// Received interference power `Σ_k |w^H h_k|² P_x` (no noise).
pub fn interference_power(s: &Scenario, w: &Combiner) -> f64 {
    s.interferers
        .iter()
        .map(|h| w.gain(h.vector()))
        .sum::<f64>()
        * s.transmit_power
}

pub fn signal_power(s: &Scenario, w: &Combiner) -> f64 {
    w.gain(s.target.vector()) * s.transmit_power
}

/// Noiseless `P_{I+N}`.
pub fn measure_interference_plus_noise(s: &Scenario, w: &Combiner) -> f64 {
    interference_power(s, w) + s.noise_power
}

/// Noiseless `P_{S+I+N}`.
pub fn measure_signal_plus_interference_plus_noise(s: &Scenario, w: &Combiner) -> f64 {
    signal_power(s, w) + interference_power(s, w) + s.noise_power
}

/// `max(0, P_{S+I+N} - P_{I+N}) / P_{I+N}`.
pub fn estimate_sinr(m: &PowerMeasurement) -> Result<f64> {
    if m.interference_noise.is_nan() || m.interference_noise <= 0.0 {
        return Err(Error::Measurement(format!(
            "interference-plus-noise reading must be positive, got {}",
            m.interference_noise
        )));
    }
    Ok(m.signal().max(0.0) / m.interference_noise)
}

/// The optimization objective evaluated directly from the channels.
pub fn analytic_sinr(s: &Scenario, w: &Combiner) -> f64 {
    signal_power(s, w) / (interference_power(s, w) + s.noise_power)
}

/// +1 when the SINR strictly improved, -1 otherwise.
pub fn reward(sinr: f64, prev_sinr: f64) -> i8 {
    if sinr > prev_sinr {
        1
    } else {
        -1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: PhaseVector,
    pub reward: i8,
    pub sinr: f64,
    pub measurement: PowerMeasurement,
}

/// Anything that answers a beam with an on/off power measurement pair.
pub trait Environment {
    fn codebook(&self) -> &PhaseCodebook;

    fn antennas(&self) -> usize;

    fn measure(&mut self, w: &Combiner) -> Result<PowerMeasurement>;

    /// Applies a quantized phase vector, measures it and scores it against the
    /// previous SINR estimate.
    fn step(&mut self, prev_sinr: f64, action: &PhaseVector) -> Result<StepOutcome> {
        if action.len() != self.antennas() {
            return Err(Error::invalid(format!(
                "action has {} phases for {} antennas",
                action.len(),
                self.antennas()
            )));
        }
        if !action.is_quantized(self.codebook()) {
            return Err(Error::invalid(
                "action contains phases outside the codebook",
            ));
        }
        let measurement = self.measure(&action.to_combiner())?;
        let sinr = estimate_sinr(&measurement)?;
        Ok(StepOutcome {
            next_state: action.clone(),
            reward: reward(sinr, prev_sinr),
            sinr,
            measurement,
        })
    }
}

/// The simulated radio: readings come from the scenario's channels, optionally
/// perturbed by independent log-normal noise.
#[derive(Debug, Clone)]
pub struct ActualEnvironment {
    scenario: Scenario,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    readings: usize,
}

impl ActualEnvironment {
    pub fn new(scenario: Scenario) -> Self {
        let seed = scenario.seed ^ 0x6d65_6173_7572_6521;
        Self::with_noise_seed(scenario, seed)
    }

    pub fn with_noise_seed(scenario: Scenario, seed: u64) -> Self {
        let noise = (scenario.measurement_noise_db > 0.0).then(|| {
            Normal::new(0.0, scenario.measurement_noise_db).expect("validated noise level")
        });
        Self {
            scenario,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            readings: 0,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Number of individual power readings taken so far.
    pub fn readings(&self) -> usize {
        self.readings
    }

    fn perturb(&mut self, power: f64) -> f64 {
        match &self.noise {
            Some(n) => power * 10f64.powf(n.sample(&mut self.rng) / 10.0),
            None => power,
        }
    }

    pub fn read_interference_plus_noise(&mut self, w: &Combiner) -> f64 {
        self.readings += 1;
        let p = measure_interference_plus_noise(&self.scenario, w);
        self.perturb(p)
    }

    pub fn read_signal_plus_interference_plus_noise(&mut self, w: &Combiner) -> f64 {
        self.readings += 1;
        let p = measure_signal_plus_interference_plus_noise(&self.scenario, w);
        self.perturb(p)
    }
}

impl Environment for ActualEnvironment {
    fn codebook(&self) -> &PhaseCodebook {
        &self.scenario.codebook
    }

    fn antennas(&self) -> usize {
        self.scenario.antennas()
    }

    fn measure(&mut self, w: &Combiner) -> Result<PowerMeasurement> {
        if w.len() != self.antennas() {
            return Err(Error::invalid(format!(
                "combiner has {} weights for {} antennas",
                w.len(),
                self.antennas()
            )));
        }
        let interference_noise = self.read_interference_plus_noise(w);
        let signal_interference_noise = self.read_signal_plus_interference_plus_noise(w);
        Ok(PowerMeasurement {
            signal_interference_noise,
            interference_noise,
        })
    }
}

/// Ground-truth link quality of a beam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `|w^H h|² / |w^H h_k|²` per interferer, dB.
    #[serde(serialize_with = "ser_capped_vec")]
    pub sir_db: Vec<f64>,
    #[serde(serialize_with = "ser_capped")]
    pub inr_db: f64,
    #[serde(serialize_with = "ser_capped")]
    pub snr_db: f64,
    #[serde(serialize_with = "ser_capped")]
    pub sinr_db: f64,
    /// `|w^H h|²`, linear.
    pub signal_gain: f64,
    /// `|w^H h_k|²` per interferer, linear.
    pub interference_gains: Vec<f64>,
    /// `log2(1 + SINR)`, bits/s/Hz.
    pub rate: f64,
}

pub fn full_metrics(s: &Scenario, w: &Combiner) -> Metrics {
    let signal_gain = w.gain(s.target.vector());
    let interference_gains: Vec<f64> = s.interferers.iter().map(|h| w.gain(h.vector())).collect();
    let sir_db = interference_gains
        .iter()
        .map(|&g| {
            if g > 0.0 {
                to_db(signal_gain / g)
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let interference = interference_gains.iter().sum::<f64>() * s.transmit_power;
    let signal = signal_gain * s.transmit_power;
    let sinr = signal / (interference + s.noise_power);
    Metrics {
        sir_db,
        inr_db: to_db(interference / s.noise_power),
        snr_db: to_db(signal / s.noise_power),
        sinr_db: to_db(sinr),
        signal_gain,
        interference_gains,
        rate: (1.0 + sinr).log2(),
    }
}

impl Metrics {
    pub fn sinr(&self) -> f64 {
        10f64.powf(self.sinr_db / 10.0)
    }

    /// Combined signal-to-interference ratio over all interferers, dB.
    pub fn overall_sir_db(&self) -> f64 {
        let total: f64 = self.interference_gains.iter().sum();
        if total > 0.0 {
            to_db(self.signal_gain / total)
        } else {
            f64::INFINITY
        }
    }
}

/// Header of the per-step CSV log for `k` interferers.
pub fn step_log_header(k: usize) -> String {
    let mut cols = vec!["iter".to_string(), "sinr_db".to_string()];
    cols.extend((1..=k).map(|i| format!("sir_db_{i}")));
    cols.extend(["inr_db", "signal_gain_linear", "reward"].map(String::from));
    cols.join(",")
}

/// One per-step CSV row; `sinr` is the estimate the learner saw, the other
/// columns are ground truth.
pub fn step_log_row(iter: usize, sinr: f64, metrics: &Metrics, reward: i8) -> String {
    let mut cols = vec![iter.to_string(), capped_db(to_db(sinr)).to_string()];
    cols.extend(metrics.sir_db.iter().map(|x| capped_db(*x).to_string()));
    cols.push(capped_db(metrics.inr_db).to_string());
    cols.push(metrics.signal_gain.to_string());
    cols.push(reward.to_string());
    cols.join(",")
}
