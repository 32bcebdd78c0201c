//! Geometric channels and scenario assembly.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, PhaseCodebook};
use crate::error::{Error, Result};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathComponent {
    /// Complex gain including path loss.
    pub gain: Complex64,
    pub azimuth: f64,
    #[serde(default)]
    pub elevation: f64,
}

impl PathComponent {
    pub fn new(gain: Complex64, azimuth: f64) -> Self {
        Self {
            gain,
            azimuth,
            elevation: 0.0,
        }
    }
}

/// Sum of `L` plane-wave paths seen by the array.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    paths: Vec<PathComponent>,
    vector: Vec<Complex64>,
}

impl Channel {
    pub fn paths(&self) -> &[PathComponent] {
        &self.paths
    }

    pub fn vector(&self) -> &[Complex64] {
        &self.vector
    }

    /// Azimuth of the strongest path.
    pub fn dominant_azimuth(&self) -> f64 {
        self.paths
            .iter()
            .max_by(|a, b| a.gain.norm_sqr().total_cmp(&b.gain.norm_sqr()))
            .map(|p| p.azimuth)
            .unwrap_or(0.0)
    }

    pub fn scaled(&self, alpha: Complex64) -> Channel {
        Channel {
            paths: self
                .paths
                .iter()
                .map(|p| PathComponent {
                    gain: p.gain * alpha,
                    ..*p
                })
                .collect(),
            vector: self.vector.iter().map(|x| x * alpha).collect(),
        }
    }
}

pub fn los_channel(g: &ArrayGeometry, gain: Complex64, azimuth: f64) -> Channel {
    let vector = g
        .response(azimuth, 0.0)
        .into_iter()
        .map(|a| a * gain)
        .collect();
    Channel {
        paths: vec![PathComponent::new(gain, azimuth)],
        vector,
    }
}

pub fn multipath_channel(g: &ArrayGeometry, paths: Vec<PathComponent>) -> Result<Channel> {
    if paths.is_empty() {
        return Err(Error::invalid("a channel needs at least one path"));
    }
    let mut vector = vec![Complex64::new(0.0, 0.0); g.antennas];
    for p in &paths {
        if !(p.gain.re.is_finite() && p.gain.im.is_finite()) {
            return Err(Error::invalid("path gain must be finite"));
        }
        for (h, a) in vector.iter_mut().zip(g.response(p.azimuth, p.elevation)) {
            *h += p.gain * a;
        }
    }
    Ok(Channel { paths, vector })
}

/// A full measurement setting: array, shifters, target and interferer
/// channels, and power levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioDoc", into = "ScenarioDoc")]
pub struct Scenario {
    pub geometry: ArrayGeometry,
    pub codebook: PhaseCodebook,
    pub target: Channel,
    pub interferers: Vec<Channel>,
    pub transmit_power: f64,
    pub noise_power: f64,
    /// Standard deviation (dB) of the log-normal perturbation on each power
    /// reading; zero means exact readings.
    pub measurement_noise_db: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ScenarioDoc {
    schema_version: u32,
    geometry: ArrayGeometry,
    bits: u32,
    target: Vec<PathComponent>,
    interferers: Vec<Vec<PathComponent>>,
    transmit_power: f64,
    noise_power: f64,
    #[serde(default)]
    measurement_noise_db: f64,
    seed: u64,
}

impl TryFrom<ScenarioDoc> for Scenario {
    type Error = Error;
    fn try_from(doc: ScenarioDoc) -> Result<Self> {
        if doc.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::Config(vec![format!(
                "schema_version: expected {SCENARIO_SCHEMA_VERSION}, got {}",
                doc.schema_version
            )]));
        }
        doc.geometry.validate()?;
        let scenario = Scenario {
            geometry: doc.geometry,
            codebook: PhaseCodebook::new(doc.bits)?,
            target: multipath_channel(&doc.geometry, doc.target)?,
            interferers: doc
                .interferers
                .into_iter()
                .map(|p| multipath_channel(&doc.geometry, p))
                .collect::<Result<_>>()?,
            transmit_power: doc.transmit_power,
            noise_power: doc.noise_power,
            measurement_noise_db: doc.measurement_noise_db,
            seed: doc.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

impl From<Scenario> for ScenarioDoc {
    fn from(s: Scenario) -> Self {
        ScenarioDoc {
            schema_version: SCENARIO_SCHEMA_VERSION,
            geometry: s.geometry,
            bits: s.codebook.bits(),
            target: s.target.paths,
            interferers: s.interferers.into_iter().map(|c| c.paths).collect(),
            transmit_power: s.transmit_power,
            noise_power: s.noise_power,
            measurement_noise_db: s.measurement_noise_db,
            seed: s.seed,
        }
    }
}

impl Scenario {
    pub fn antennas(&self) -> usize {
        self.geometry.antennas
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.transmit_power > 0.0 && self.transmit_power.is_finite()) {
            problems.push(format!(
                "transmit_power: must be > 0, got {}",
                self.transmit_power
            ));
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            problems.push(format!(
                "noise_power: must be > 0, got {}",
                self.noise_power
            ));
        }
        if !(self.measurement_noise_db >= 0.0 && self.measurement_noise_db.is_finite()) {
            problems.push(format!(
                "measurement_noise_db: must be >= 0, got {}",
                self.measurement_noise_db
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Same scenario with the interferers removed.
    pub fn without_interferers(&self) -> Scenario {
        Scenario {
            interferers: Vec::new(),
            ..self.clone()
        }
    }

    pub fn with_interferers(&self, interferers: Vec<Channel>) -> Scenario {
        Scenario {
            interferers,
            ..self.clone()
        }
    }

    pub fn interferer_azimuths(&self) -> Vec<f64> {
        self.interferers
            .iter()
            .map(Channel::dominant_azimuth)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// How the target is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// LOS direction; drawn uniformly from ±60° when absent.
    #[serde(default)]
    pub azimuth_deg: Option<f64>,
    /// LOS gain magnitude.
    #[serde(default = "one")]
    pub magnitude: f64,
    /// LOS gain phase; drawn uniformly when absent.
    #[serde(default)]
    pub phase: Option<f64>,
    /// Explicit multipath description; overrides the LOS fields.
    #[serde(default)]
    pub paths: Option<Vec<PathComponent>>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            azimuth_deg: None,
            magnitude: 1.0,
            phase: None,
            paths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfererConfig {
    /// Number of interferers `K`.
    #[serde(default)]
    pub count: usize,
    /// Explicit LOS directions. When absent the interferers are placed later,
    /// on the sidelobes of a learned beam.
    #[serde(default)]
    pub azimuths_deg: Option<Vec<f64>>,
    /// Per-interferer power relative to the target gain magnitude, in dB.
    /// Missing entries default to 0 dB (equal power).
    #[serde(default)]
    pub relative_power_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub antennas: usize,
    #[serde(default = "half")]
    pub spacing: f64,
    #[serde(default = "three")]
    pub bits: u32,
    #[serde(default)]
    pub target: TargetConfig,
    #[serde(default)]
    pub interferers: InterfererConfig,
    #[serde(default = "one")]
    pub transmit_power: f64,
    /// Per-antenna target SNR `|α|²P_x/σ²` used to derive the noise power
    /// when `noise_power` is absent.
    #[serde(default = "default_snr_db")]
    pub snr_db: f64,
    #[serde(default)]
    pub noise_power: Option<f64>,
    #[serde(default)]
    pub measurement_noise_db: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn three() -> u32 {
    3
}
pub fn default_snr_db() -> f64 {
    20.0
}

impl ScenarioConfig {
    pub fn new(antennas: usize, bits: u32) -> Self {
        Self {
            antennas,
            spacing: 0.5,
            bits,
            target: TargetConfig::default(),
            interferers: InterfererConfig::default(),
            transmit_power: 1.0,
            snr_db: default_snr_db(),
            noise_power: None,
            measurement_noise_db: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.antennas == 0 {
            problems.push("antennas: must be >= 1".to_string());
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            problems.push(format!("spacing: must be > 0, got {}", self.spacing));
        }
        if PhaseCodebook::new(self.bits).is_err() {
            problems.push(format!("bits: must be in 1..=16, got {}", self.bits));
        }
        if !(self.transmit_power > 0.0 && self.transmit_power.is_finite()) {
            problems.push(format!(
                "transmit_power: must be > 0, got {}",
                self.transmit_power
            ));
        }
        if let Some(n) = self.noise_power {
            if !(n > 0.0 && n.is_finite()) {
                problems.push(format!("noise_power: must be > 0, got {n}"));
            }
        } else if !self.snr_db.is_finite() {
            problems.push("snr_db: must be finite".to_string());
        }
        if !(self.target.magnitude > 0.0 && self.target.magnitude.is_finite()) {
            problems.push(format!(
                "target.magnitude: must be > 0, got {}",
                self.target.magnitude
            ));
        }
        if let Some(paths) = &self.target.paths {
            if paths.is_empty() {
                problems.push("target.paths: must not be empty".to_string());
            }
        }
        if let Some(az) = &self.interferers.azimuths_deg {
            if az.len() != self.interferers.count {
                problems.push(format!(
                    "interferers.azimuths_deg: {} angles for {} interferers",
                    az.len(),
                    self.interferers.count
                ));
            }
        }
        if self.interferers.relative_power_db.len() > self.interferers.count {
            problems
                .push("interferers.relative_power_db: more entries than interferers".to_string());
        }
        if !(self.measurement_noise_db >= 0.0 && self.measurement_noise_db.is_finite()) {
            problems.push(format!(
                "measurement_noise_db: must be >= 0, got {}",
                self.measurement_noise_db
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Magnitude of the target's dominant gain; the SNR reference.
    fn target_magnitude(&self) -> f64 {
        match &self.target.paths {
            Some(paths) => paths.iter().map(|p| p.gain.norm()).fold(0.0, f64::max),
            None => self.target.magnitude,
        }
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power.unwrap_or_else(|| {
            self.target_magnitude().powi(2) * self.transmit_power / 10f64.powf(self.snr_db / 10.0)
        })
    }

    /// LOS interferer channels at the given directions, with gains drawn from
    /// a stream that depends only on the seed.
    pub fn interferer_channels(&self, azimuths: &[f64]) -> Vec<Channel> {
        let geometry = ArrayGeometry {
            antennas: self.antennas,
            spacing: self.spacing,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1f2e_3d4c_5b6a_7988);
        let magnitude = self.target_magnitude();
        azimuths
            .iter()
            .enumerate()
            .map(|(k, &az)| {
                let rel = self
                    .interferers
                    .relative_power_db
                    .get(k)
                    .copied()
                    .unwrap_or(0.0);
                let mag = magnitude * 10f64.powf(rel / 20.0);
                let phase = rng.gen_range(-PI..PI);
                los_channel(&geometry, Complex64::from_polar(mag, phase), az)
            })
            .collect()
    }
}

/// Builds the scenario a config describes. Interferers without explicit
/// directions are left out; see [`crate::experiment::place_interferers`].
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let geometry = ArrayGeometry::new(cfg.antennas, cfg.spacing)?;
    let codebook = PhaseCodebook::new(cfg.bits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let az_draw = rng.gen_range(-PI / 3.0..PI / 3.0);
    let phase_draw = rng.gen_range(-PI..PI);
    let target = match &cfg.target.paths {
        Some(paths) => multipath_channel(&geometry, paths.clone())?,
        None => {
            let az = cfg
                .target
                .azimuth_deg
                .map(f64::to_radians)
                .unwrap_or(az_draw);
            let phase = cfg.target.phase.unwrap_or(phase_draw);
            los_channel(
                &geometry,
                Complex64::from_polar(cfg.target.magnitude, phase),
                az,
            )
        }
    };
    let interferers = match &cfg.interferers.azimuths_deg {
        Some(az) => {
            let rad: Vec<f64> = az.iter().map(|a| a.to_radians()).collect();
            cfg.interferer_channels(&rad)
        }
        None => Vec::new(),
    };
    let scenario = Scenario {
        geometry,
        codebook,
        target,
        interferers,
        transmit_power: cfg.transmit_power,
        noise_power: cfg.noise_power(),
        measurement_noise_db: cfg.measurement_noise_db,
        seed: cfg.seed,
    };
    scenario.validate()?;
    Ok(scenario)
}
