//! The end-to-end pipeline and its on-disk artifacts.
//!
//! One run learns an interference-unaware beam on the target alone, places
//! the interferers on that beam's strongest sidelobes (or at configured
//! directions), learns an interference-aware beam with them active, and
//! compares the two. Every run writes a self-contained directory with fixed
//! file names so downstream tools can work by convention.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{learn, write_trajectory_csv, ActorCriticConfig, Agent, TrajectoryRow};
use crate::array::{
    angle_grid, beam_pattern, find_sidelobe_peaks, write_pattern_csv, Combiner, PhaseVector,
};
use crate::channel::{build_scenario, Scenario, ScenarioConfig};
use crate::environment::{
    analytic_sinr, capped_db, full_metrics, ser_capped, ser_capped_vec, to_db, ActualEnvironment,
    Environment, Metrics,
};
use crate::error::{Error, Result};
use crate::surrogate::{
    nmse, run_assisted_learning, train_surrogate, Architecture, PowerKind, SurrogateConfig,
    SurrogateDataset,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Seed offset of the aware-stage agent, so the two stages never share an
/// exploration stream.
const AWARE_SEED_OFFSET: u64 = 1000;

/// Largest search space the exhaustive oracle will enumerate.
pub const MAX_ORACLE_BEAMS: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateMode {
    #[default]
    None,
    Model,
    Fc,
}

impl SurrogateMode {
    pub fn architecture(self) -> Option<Architecture> {
        match self {
            SurrogateMode::None => None,
            SurrogateMode::Model => Some(Architecture::ModelBased),
            SurrogateMode::Fc => Some(Architecture::Fc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageIterations {
    pub unaware: usize,
    /// Aware-stage budget for pure learning. Surrogate-assisted runs are
    /// budgeted by `surrogate.switch` instead.
    pub aware: usize,
}

impl Default for StageIterations {
    fn default() -> Self {
        Self {
            unaware: 2000,
            aware: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub agent: ActorCriticConfig,
    #[serde(default)]
    pub surrogate_mode: SurrogateMode,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub iterations: StageIterations,
    /// Each seed drives the scenario draw, both agents and surrogate
    /// training of one run.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Resolution of the pattern grid over [-90°, 90°].
    #[serde(default = "default_resolution")]
    pub angle_resolution_deg: f64,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_resolution() -> f64 {
    0.1
}

impl Default for ExperimentConfig {
    /// Eight antennas, 3-bit phases, two sidelobe-aligned interferers.
    fn default() -> Self {
        let mut scenario = ScenarioConfig::new(8, 3);
        scenario.interferers.count = 2;
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            scenario,
            agent: ActorCriticConfig::default(),
            surrogate_mode: SurrogateMode::None,
            surrogate: SurrogateConfig::default(),
            iterations: StageIterations::default(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            angle_resolution_deg: default_resolution(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::InvalidArgument(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            problems.push(format!(
                "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            problems.push("seeds: at least one seed is required".into());
        }
        if self.iterations.unaware == 0 {
            problems.push("iterations.unaware: must be >= 1".into());
        }
        if self.iterations.aware == 0 {
            problems.push("iterations.aware: must be >= 1".into());
        }
        if !(self.angle_resolution_deg > 0.0 && self.angle_resolution_deg <= 0.25) {
            problems.push(format!(
                "angle_resolution_deg: must be in (0, 0.25], got {}",
                self.angle_resolution_deg
            ));
        }
        for r in [
            self.scenario.validate(),
            self.agent.validate(),
            self.surrogate.validate(),
        ] {
            match r {
                Ok(()) => {}
                Err(Error::Config(p)) => problems.extend(p),
                Err(other) => problems.push(other.to_string()),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// The configuration of the run for one seed.
    pub fn resolved(&self, seed: u64) -> ExperimentConfig {
        let mut cfg = self.clone();
        cfg.seeds = vec![seed];
        cfg.scenario.seed = seed;
        cfg.agent.seed = seed;
        cfg.surrogate.training.seed = seed;
        if let Some(arch) = self.surrogate_mode.architecture() {
            cfg.surrogate.architecture = arch;
        }
        cfg
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }
}

/// Stable 64-bit FNV-1a digest of a scenario's JSON form.
pub fn scenario_fingerprint(s: &Scenario) -> Result<String> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in s.to_json()?.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

/// A beam as saved to disk: phases, codebook indices and ground truth in
/// the scenario it was evaluated in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamRecord {
    pub phases: Vec<f64>,
    pub indices: Vec<usize>,
    pub bits: u32,
    pub scenario_fingerprint: String,
    /// The SINR estimate the learner measured for this beam.
    #[serde(serialize_with = "ser_capped")]
    pub measured_sinr_db: f64,
    pub metrics: Metrics,
}

impl BeamRecord {
    pub fn new(s: &Scenario, beam: &PhaseVector, measured_sinr: f64) -> Result<Self> {
        if beam.len() != s.antennas() {
            return Err(Error::ScenarioMismatch(format!(
                "beam has {} phases, scenario {} antennas",
                beam.len(),
                s.antennas()
            )));
        }
        let indices = beam
            .indices(&s.codebook)
            .ok_or_else(|| Error::invalid("beam contains phases outside the codebook"))?;
        Ok(Self {
            phases: beam.0.clone(),
            indices,
            bits: s.codebook.bits(),
            scenario_fingerprint: scenario_fingerprint(s)?,
            measured_sinr_db: to_db(measured_sinr),
            metrics: full_metrics(s, &beam.to_combiner()),
        })
    }

    pub fn phase_vector(&self) -> PhaseVector {
        PhaseVector(self.phases.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Before/after comparison of the unaware and aware beams. All deltas are
/// "aware minus unaware" except the losses and reductions, which are
/// positive when the aware beam is worse or has less.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub scenario_fingerprint: String,
    pub antennas: usize,
    pub bits: u32,
    pub target_azimuth_deg: f64,
    pub interferer_azimuths_deg: Vec<f64>,
    pub noise_power: f64,
    pub transmit_power: f64,
    pub unaware: Metrics,
    pub aware: Metrics,
    #[serde(serialize_with = "ser_capped_vec")]
    pub sir_improvement_db: Vec<f64>,
    #[serde(serialize_with = "ser_capped")]
    pub inr_reduction_db: f64,
    #[serde(serialize_with = "ser_capped")]
    pub gain_loss_db: f64,
    /// Aware over unaware signal power, linear.
    pub signal_power_ratio: f64,
    #[serde(serialize_with = "ser_capped")]
    pub sinr_improvement_db: f64,
    pub rate_improvement: f64,
}

impl Summary {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The worst per-interferer SIR improvement; +∞ without interferers.
    pub fn min_sir_improvement_db(&self) -> f64 {
        self.sir_improvement_db
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

fn delta(after: f64, before: f64) -> f64 {
    if after == before {
        0.0
    } else {
        after - before
    }
}

/// Compares two beams recorded against the same scenario; every number is
/// recomputed from the phases.
pub fn summarize(s: &Scenario, unaware: &BeamRecord, aware: &BeamRecord) -> Result<Summary> {
    let fp = scenario_fingerprint(s)?;
    for (name, rec) in [("unaware", unaware), ("aware", aware)] {
        if rec.scenario_fingerprint != fp {
            return Err(Error::ScenarioMismatch(format!(
                "{name} beam was recorded against scenario {}, not {fp}",
                rec.scenario_fingerprint
            )));
        }
        if rec.phases.len() != s.antennas() || rec.bits != s.codebook.bits() {
            return Err(Error::ScenarioMismatch(format!(
                "{name} beam is {} phases at {} bits, scenario is {} antennas at {} bits",
                rec.phases.len(),
                rec.bits,
                s.antennas(),
                s.codebook.bits()
            )));
        }
    }
    let before = full_metrics(s, &unaware.phase_vector().to_combiner());
    let after = full_metrics(s, &aware.phase_vector().to_combiner());
    Ok(Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        scenario_fingerprint: fp,
        antennas: s.antennas(),
        bits: s.codebook.bits(),
        target_azimuth_deg: s.target.dominant_azimuth().to_degrees(),
        interferer_azimuths_deg: s
            .interferer_azimuths()
            .iter()
            .map(|a| a.to_degrees())
            .collect(),
        noise_power: s.noise_power,
        transmit_power: s.transmit_power,
        sir_improvement_db: after
            .sir_db
            .iter()
            .zip(&before.sir_db)
            .map(|(a, b)| delta(*a, *b))
            .collect(),
        inr_reduction_db: delta(before.inr_db, after.inr_db),
        gain_loss_db: delta(to_db(before.signal_gain), to_db(after.signal_gain)),
        signal_power_ratio: after.signal_gain / before.signal_gain,
        sinr_improvement_db: delta(after.sinr_db, before.sinr_db),
        rate_improvement: after.rate - before.rate,
        unaware: before,
        aware: after,
    })
}

/// Adds the configured interferers to a target-only scenario: at their
/// explicit directions when given, otherwise on the strongest sidelobes of
/// `beam` evaluated over `angles`.
pub fn place_interferers(
    cfg: &ScenarioConfig,
    base: &Scenario,
    beam: &Combiner,
    angles: &[f64],
) -> Result<Scenario> {
    let k = cfg.interferers.count;
    let azimuths: Vec<f64> = match &cfg.interferers.azimuths_deg {
        Some(az) => az.iter().map(|a| a.to_radians()).collect(),
        None if k == 0 => Vec::new(),
        None => {
            let pattern = beam_pattern(beam, angles, &base.geometry);
            let search = find_sidelobe_peaks(angles, &pattern, k)?;
            if search.incomplete {
                return Err(Error::invalid(format!(
                    "the unaware beam has {} sidelobes for {k} interferers",
                    search.peaks.len()
                )));
            }
            search.peaks.iter().map(|p| p.angle).collect()
        }
    };
    Ok(base.with_interferers(cfg.interferer_channels(&azimuths)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Scenario,
    Unaware,
    Placement,
    Aware,
    Summary,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Scenario => "scenario",
            Stage::Unaware => "unaware",
            Stage::Placement => "placement",
            Stage::Aware => "aware",
            Stage::Summary => "summary",
        }
    }
}

/// Written last into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub completed: Vec<Stage>,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub beam: BeamRecord,
    pub trajectory: Vec<TrajectoryRow>,
    /// Best measured SINR after each iteration.
    pub best_history: Vec<f64>,
    /// Gains over the run's angle grid.
    pub pattern: Vec<f64>,
    /// Real on/off measurement pairs spent.
    pub real_measurements: usize,
}

#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub config: ExperimentConfig,
    /// The full scenario, interferers included.
    pub scenario: Scenario,
    pub angles: Vec<f64>,
    pub unaware: StageResult,
    pub aware: StageResult,
    pub summary: Summary,
}

pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const SCENARIO: &str = "scenario.json";
    pub const STATUS: &str = "status.json";
    pub const SUMMARY: &str = "summary.json";
    pub const TRAJECTORY_UNAWARE: &str = "trajectory_unaware.csv";
    pub const TRAJECTORY_AWARE: &str = "trajectory_aware.csv";
    pub const BEAM_UNAWARE: &str = "beam_unaware.json";
    pub const BEAM_AWARE: &str = "beam_aware.json";
    pub const PATTERN_UNAWARE: &str = "pattern_unaware.csv";
    pub const PATTERN_AWARE: &str = "pattern_aware.csv";
}

/// Writes into a run directory when one was requested.
struct Sink<'a> {
    dir: Option<&'a Path>,
}

impl Sink<'_> {
    fn open(&self, name: &str) -> Result<Option<(PathBuf, BufWriter<fs::File>)>> {
        let Some(dir) = self.dir else { return Ok(None) };
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some((path, BufWriter::new(file))))
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        if let Some((path, mut w)) = self.open(name)? {
            w.write_all(body.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        if self.dir.is_none() {
            return Ok(());
        }
        self.text(name, &serde_json::to_string_pretty(value)?)
    }

    fn with<F>(&self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
    {
        if let Some((path, mut w)) = self.open(name)? {
            f(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn stage(&self, name: &str, rec: &StageResult, k: usize, angles: &[f64]) -> Result<()> {
        let (traj, beam, pattern) = match name {
            "unaware" => (
                files::TRAJECTORY_UNAWARE,
                files::BEAM_UNAWARE,
                files::PATTERN_UNAWARE,
            ),
            _ => (
                files::TRAJECTORY_AWARE,
                files::BEAM_AWARE,
                files::PATTERN_AWARE,
            ),
        };
        self.with(traj, |w| write_trajectory_csv(w, k, &rec.trajectory))?;
        self.json(beam, &rec.beam)?;
        self.with(pattern, |w| write_pattern_csv(w, angles, &rec.pattern))
    }
}

/// Runs the four-stage pipeline for one seed. With `out`, the run directory
/// is filled as stages complete; on failure it keeps whatever was produced
/// plus a `status.json` naming the failed stage.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunArtifact> {
    cfg.validate()?;
    let cfg = cfg.resolved(seed);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sink = Sink { dir: out };
    sink.text(files::CONFIG, &cfg.to_json()?)?;
    let mut status = RunStatus {
        completed: Vec::new(),
        failed_stage: None,
        error: None,
    };
    let result = pipeline_stages(&cfg, &sink, &mut status);
    if let Err(e) = &result {
        status.error = Some(e.to_string());
    }
    sink.json(files::STATUS, &status)?;
    result.map_err(|e| match status.failed_stage {
        Some(stage) => Error::Stage {
            stage: stage.as_str(),
            source: Box::new(e),
        },
        None => e,
    })
}

fn pipeline_stages(
    cfg: &ExperimentConfig,
    sink: &Sink,
    status: &mut RunStatus,
) -> Result<RunArtifact> {
    macro_rules! stage {
        ($stage:expr, $body:expr) => {{
            status.failed_stage = Some($stage);
            info!("seed {}: {} stage", cfg.scenario.seed, $stage.as_str());
            let value = $body?;
            status.failed_stage = None;
            status.completed.push($stage);
            value
        }};
    }

    let angles = angle_grid(cfg.angle_resolution_deg)?;
    let k = cfg.scenario.interferers.count;

    let base = stage!(Stage::Scenario, {
        let mut target_only = cfg.scenario.clone();
        target_only.interferers.azimuths_deg = None;
        build_scenario(&target_only).and_then(|s| {
            sink.text(files::SCENARIO, &s.to_json()?)?;
            Ok(s)
        })
    });

    let (unaware_best, unaware_sinr, mut unaware) = stage!(Stage::Unaware, {
        learn_stage(cfg, &base, cfg.agent.seed, cfg.iterations.unaware, &angles).and_then(
            |(best, sinr, rec)| {
                sink.stage("unaware", &rec, 0, &angles)?;
                Ok::<_, Error>((best, sinr, rec))
            },
        )
    });

    let scenario = stage!(Stage::Placement, {
        place_interferers(&cfg.scenario, &base, &unaware_best.to_combiner(), &angles).and_then(
            |s| {
                sink.text(files::SCENARIO, &s.to_json()?)?;
                // Re-record the unaware beam against the scenario it is judged in.
                unaware.beam = BeamRecord::new(&s, &unaware_best, unaware_sinr)?;
                sink.json(files::BEAM_UNAWARE, &unaware.beam)?;
                Ok::<_, Error>(s)
            },
        )
    });

    let aware = stage!(Stage::Aware, {
        // Without interferers the aware objective is the unaware one.
        let learned = if scenario.interferers.is_empty() {
            Ok(unaware.clone())
        } else {
            aware_stage(cfg, &scenario, &angles)
        };
        learned.and_then(|rec| {
            sink.stage("aware", &rec, k, &angles)?;
            Ok::<_, Error>(rec)
        })
    });

    let summary = stage!(Stage::Summary, {
        summarize(&scenario, &unaware.beam, &aware.beam).and_then(|s| {
            sink.json(files::SUMMARY, &s)?;
            Ok::<_, Error>(s)
        })
    });

    Ok(RunArtifact {
        config: cfg.clone(),
        scenario,
        angles,
        unaware,
        aware,
        summary,
    })
}

fn learn_stage(
    cfg: &ExperimentConfig,
    s: &Scenario,
    agent_seed: u64,
    iterations: usize,
    angles: &[f64],
) -> Result<(PhaseVector, f64, StageResult)> {
    let mut agent_cfg = cfg.agent.clone();
    agent_cfg.seed = agent_seed;
    let mut agent = Agent::new(s.antennas(), s.codebook.clone(), agent_cfg)?;
    let mut env = ActualEnvironment::with_noise_seed(s.clone(), agent_seed);
    let out = learn(&mut agent, &mut env, iterations, Some(s))?;
    let rec = StageResult {
        beam: BeamRecord::new(s, &out.best, out.best_sinr)?,
        pattern: beam_pattern(&out.best.to_combiner(), angles, &s.geometry),
        trajectory: out.trajectory,
        best_history: out.best_history,
        real_measurements: env.readings() / 2,
    };
    Ok((out.best, out.best_sinr, rec))
}

fn aware_stage(cfg: &ExperimentConfig, s: &Scenario, angles: &[f64]) -> Result<StageResult> {
    let seed = cfg.agent.seed.wrapping_add(AWARE_SEED_OFFSET);
    if cfg.surrogate_mode == SurrogateMode::None {
        return learn_stage(cfg, s, seed, cfg.iterations.aware, angles).map(|(_, _, rec)| rec);
    }
    let mut agent_cfg = cfg.agent.clone();
    agent_cfg.seed = seed;
    let mut agent = Agent::new(s.antennas(), s.codebook.clone(), agent_cfg)?;
    let mut env = ActualEnvironment::with_noise_seed(s.clone(), seed);
    let out = run_assisted_learning(&mut agent, &mut env, &cfg.surrogate, Some(s))?;
    let mut best = f64::NEG_INFINITY;
    let best_history = out
        .trajectory
        .iter()
        .filter(|r| r.source == crate::agent::StepSource::Real)
        .map(|r| {
            best = best.max(r.sinr);
            best
        })
        .collect();
    Ok(StageResult {
        beam: BeamRecord::new(s, &out.best, out.best_sinr)?,
        pattern: beam_pattern(&out.best.to_combiner(), angles, &s.geometry),
        trajectory: out.trajectory,
        best_history,
        real_measurements: out.real_measurements,
    })
}

/// Runs every configured seed into `<output_dir>/seed_<n>`, in parallel.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunArtifact>> {
    cfg.validate()?;
    cfg.seeds
        .par_iter()
        .map(|&seed| run_pipeline(cfg, seed, Some(&cfg.run_dir(seed))))
        .collect()
}

/// Single-beam learning against a scenario; the `learn` subcommand.
pub fn learn_beam(
    s: &Scenario,
    agent: &ActorCriticConfig,
    iterations: usize,
    angles: &[f64],
) -> Result<StageResult> {
    let cfg = ExperimentConfig {
        agent: agent.clone(),
        ..ExperimentConfig::default()
    };
    learn_stage(&cfg, s, agent.seed, iterations, angles).map(|(_, _, rec)| rec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub beam: PhaseVector,
    pub sinr: f64,
    /// Size of the enumerated space, `2^(rM)`.
    pub evaluated: u64,
}

/// Brute-force maximum of the noiseless SINR over every codebook beam.
/// Ties keep the first beam in enumeration order.
pub fn exhaustive_oracle(s: &Scenario) -> Result<OracleResult> {
    let m = s.antennas();
    let n = s.codebook.len() as u64;
    let total = (m as u32)
        .checked_mul(s.codebook.bits())
        .filter(|&b| b < 64)
        .map(|b| 1u64 << b)
        .filter(|&t| t <= MAX_ORACLE_BEAMS)
        .ok_or_else(|| {
            Error::invalid(format!(
                "exhaustive search over {m} antennas at {} bits exceeds {MAX_ORACLE_BEAMS} beams",
                s.codebook.bits()
            ))
        })?;
    // table[ch][m][v] = conj(w_m) h_ch,m for phase value v.
    let channels: Vec<&[Complex64]> = std::iter::once(s.target.vector())
        .chain(s.interferers.iter().map(|h| h.vector()))
        .collect();
    let norm = 1.0 / (m as f64).sqrt();
    let table: Vec<Vec<Vec<Complex64>>> = channels
        .iter()
        .map(|h| {
            (0..m)
                .map(|i| {
                    s.codebook
                        .values()
                        .iter()
                        .map(|&v| Complex64::from_polar(norm, -v) * h[i])
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut digits = vec![0usize; m];
    let mut best = (f64::NEG_INFINITY, digits.clone());
    for _ in 0..total {
        let gain = |c: usize| -> f64 {
            let z: Complex64 = digits
                .iter()
                .enumerate()
                .map(|(i, &d)| table[c][i][d])
                .sum();
            z.norm_sqr()
        };
        let signal = gain(0) * s.transmit_power;
        let interference: f64 = (1..channels.len()).map(gain).sum::<f64>() * s.transmit_power;
        let sinr = signal / (interference + s.noise_power);
        if sinr > best.0 {
            best = (sinr, digits.clone());
        }
        for d in digits.iter_mut() {
            *d += 1;
            if (*d as u64) < n {
                break;
            }
            *d = 0;
        }
    }
    let beam = PhaseVector(best.1.iter().map(|&d| s.codebook.value(d)).collect());
    Ok(OracleResult {
        sinr: analytic_sinr(s, &beam.to_combiner()),
        beam,
        evaluated: total,
    })
}

/// Prediction accuracy versus training-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub antennas: usize,
    pub bits: u32,
    pub interferers: usize,
    pub sample_sizes: Vec<usize>,
    pub architectures: Vec<Architecture>,
    pub kinds: Vec<PowerKind>,
    /// Independent scenario and dataset draws per point.
    pub draws: usize,
    pub test_samples: usize,
    pub snr_db: f64,
    pub surrogate: SurrogateConfig,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            antennas: 8,
            bits: 3,
            interferers: 2,
            sample_sizes: vec![50, 100, 200, 500, 1000, 2000, 5000, 10_000],
            architectures: vec![Architecture::ModelBased, Architecture::Fc],
            kinds: vec![PowerKind::Interference, PowerKind::Signal],
            draws: 5,
            test_samples: 2000,
            snr_db: crate::channel::default_snr_db(),
            surrogate: SurrogateConfig::default(),
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.antennas == 0 {
            problems.push("antennas: must be >= 1".to_string());
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            problems.push("sample_sizes: must be nonempty and positive".into());
        }
        if self.architectures.is_empty() || self.kinds.is_empty() {
            problems.push("architectures, kinds: must be nonempty".into());
        }
        if self.draws == 0 || self.test_samples == 0 {
            problems.push("draws, test_samples: must be >= 1".into());
        }
        if let Err(e) = self.surrogate.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub architecture: Architecture,
    pub kind: PowerKind,
    pub samples: usize,
    pub draw: usize,
    /// Held-out NMSE, linear.
    pub nmse: f64,
}

/// A scenario with `K` LOS interferers at uniform directions in ±60°.
pub fn sweep_scenario(cfg: &SweepConfig, draw: usize) -> Result<Scenario> {
    let mut sc = ScenarioConfig::new(cfg.antennas, cfg.bits);
    sc.seed = cfg.seed.wrapping_add(draw as u64);
    sc.snr_db = cfg.snr_db;
    sc.interferers.count = cfg.interferers;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x5eed_a21e);
    sc.interferers.azimuths_deg = Some(
        (0..cfg.interferers)
            .map(|_| rng.gen_range(-60.0..60.0))
            .collect(),
    );
    build_scenario(&sc)
}

/// Uniformly random codebook beams with both readings measured on `s`.
pub fn measured_datasets(
    s: &Scenario,
    n: usize,
    seed: u64,
) -> Result<(SurrogateDataset, SurrogateDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = ActualEnvironment::with_noise_seed(s.clone(), seed);
    let m = s.antennas();
    let mut d_in = SurrogateDataset::new(PowerKind::Interference, m);
    let mut d_s = SurrogateDataset::new(PowerKind::Signal, m);
    let cb = &s.codebook;
    for _ in 0..n {
        let beam = PhaseVector(
            (0..m)
                .map(|_| cb.value(rng.gen_range(0..cb.len())))
                .collect(),
        );
        let w = beam.to_combiner();
        let reading = env.measure(&w)?;
        d_in.push(w.clone(), reading.interference_noise.max(0.0))?;
        d_s.push(w, reading.signal().max(0.0))?;
    }
    Ok((d_in, d_s))
}

fn prefix(data: &SurrogateDataset, n: usize) -> Result<SurrogateDataset> {
    let mut out = SurrogateDataset::new(data.kind(), data.antennas());
    for (w, p) in data.samples().iter().take(n) {
        out.push(w.clone(), *p)?;
    }
    Ok(out)
}

/// Trains every (architecture, kind, size) combination on nested prefixes
/// of one measured pool per draw and scores it on a held-out set.
pub fn sweep_surrogate(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let largest = *cfg.sample_sizes.iter().max().expect("validated nonempty");
    let mut rows = Vec::new();
    for draw in 0..cfg.draws {
        let s = sweep_scenario(cfg, draw)?;
        let seed = cfg.seed.wrapping_add(draw as u64);
        let (train_in, train_s) = measured_datasets(&s, largest, seed)?;
        let (test_in, test_s) = measured_datasets(&s, cfg.test_samples, seed ^ 0x7e57)?;
        for &arch in &cfg.architectures {
            let mut sc = cfg.surrogate.clone();
            sc.architecture = arch;
            for &kind in &cfg.kinds {
                let (train, test) = match kind {
                    PowerKind::Interference => (&train_in, &test_in),
                    PowerKind::Signal => (&train_s, &test_s),
                };
                for &n in &cfg.sample_sizes {
                    if arch == Architecture::Fc && n < 2 {
                        continue;
                    }
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(n as u64));
                    let mut p = sc.build(kind, s.antennas(), cfg.interferers, &mut rng)?;
                    let mut training = sc.training.clone();
                    training.seed = seed;
                    train_surrogate(&mut p, &prefix(train, n)?, &training)?;
                    let e = nmse(&p, test)?;
                    info!("draw {draw} {arch:?} {kind:?} N={n}: NMSE {e:.3e}");
                    rows.push(SweepRow {
                        architecture: arch,
                        kind,
                        samples: n,
                        draw,
                        nmse: e,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "architecture,kind,samples,draw,nmse,nmse_db")?;
    for r in rows {
        let arch = match r.architecture {
            Architecture::ModelBased => "model_based",
            Architecture::Fc => "fc",
        };
        let kind = match r.kind {
            PowerKind::Interference => "interference",
            PowerKind::Signal => "signal",
        };
        writeln!(
            out,
            "{arch},{kind},{},{},{},{}",
            r.samples,
            r.draw,
            r.nmse,
            capped_db(to_db(r.nmse))
        )?;
    }
    Ok(())
}

/// Mean NMSE over draws for one curve point.
pub fn mean_nmse(
    rows: &[SweepRow],
    arch: Architecture,
    kind: PowerKind,
    samples: usize,
) -> Option<f64> {
    let hits: Vec<f64> = rows
        .iter()
        .filter(|r| r.architecture == arch && r.kind == kind && r.samples == samples)
        .map(|r| r.nmse)
        .collect();
    (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{ArrayGeometry, PhaseCodebook};
    use crate::channel::los_channel;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn quick_config(m: usize, bits: u32, k: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            scenario: ScenarioConfig::new(m, bits),
            ..ExperimentConfig::default()
        };
        cfg.scenario.interferers.count = k;
        cfg.iterations = StageIterations {
            unaware: 60,
            aware: 60,
        };
        cfg.agent.batch_size = 16;
        cfg.angle_resolution_deg = 0.25;
        cfg
    }

    /// Target at broadside, one interferer at 30°, M=2.
    fn toy_scenario() -> Scenario {
        let g = ArrayGeometry::ula(2).unwrap();
        Scenario {
            geometry: g,
            codebook: PhaseCodebook::new(2).unwrap(),
            target: los_channel(&g, Complex64::new(1.0, 0.0), 0.0),
            interferers: vec![los_channel(&g, Complex64::new(1.0, 0.0), PI / 6.0)],
            transmit_power: 1.0,
            noise_power: 0.01,
            measurement_noise_db: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn null_steering_toy_matches_hand_computation() {
        let s = toy_scenario();
        // Uniform beam: signal |1+1|²/2 = 2, interferer |1+j|²/2 = 1.
        let uniform = BeamRecord::new(&s, &PhaseVector(vec![0.0, 0.0]), 1.0).unwrap();
        // w = [1, -j]/√2 is orthogonal to [1, j]; signal |1+j|²/2 = 1.
        let null = BeamRecord::new(&s, &PhaseVector(vec![0.0, -PI / 2.0]), 1.0).unwrap();
        let sum = summarize(&s, &uniform, &null).unwrap();
        assert_abs_diff_eq!(sum.unaware.signal_gain, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sum.unaware.sir_db[0], 10.0 * 2f64.log10(), epsilon = 1e-9);
        assert_abs_diff_eq!(sum.aware.signal_gain, 1.0, epsilon = 1e-12);
        assert!(sum.aware.interference_gains[0] < 1e-30);
        assert_abs_diff_eq!(sum.gain_loss_db, 10.0 * 2f64.log10(), epsilon = 1e-9);
        assert_abs_diff_eq!(sum.signal_power_ratio, 0.5, epsilon = 1e-12);
        assert!(sum.sir_improvement_db[0] > 100.0);
        let before: f64 = 2.0 / (1.0 + 0.01);
        let after: f64 = 1.0 / 0.01;
        assert_abs_diff_eq!(
            sum.sinr_improvement_db,
            10.0 * (after / before).log10(),
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            sum.rate_improvement,
            (1.0 + after).log2() - (1.0 + before).log2(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn identical_beams_give_zero_deltas() {
        let s = toy_scenario();
        let b = BeamRecord::new(&s, &PhaseVector(vec![PI / 2.0, 0.0]), 3.0).unwrap();
        let sum = summarize(&s, &b, &b).unwrap();
        assert_eq!(sum.sir_improvement_db, vec![0.0]);
        assert_eq!(sum.inr_reduction_db, 0.0);
        assert_eq!(sum.gain_loss_db, 0.0);
        assert_eq!(sum.sinr_improvement_db, 0.0);
        assert_eq!(sum.rate_improvement, 0.0);
        assert_eq!(sum.signal_power_ratio, 1.0);
    }

    #[test]
    fn summary_round_trips_through_json() {
        let s = toy_scenario();
        let a = BeamRecord::new(&s, &PhaseVector(vec![0.0, 0.0]), 1.0).unwrap();
        let b = BeamRecord::new(&s, &PhaseVector(vec![0.0, PI / 2.0]), 1.0).unwrap();
        let sum = summarize(&s, &a, &b).unwrap();
        let text = serde_json::to_string(&sum).unwrap();
        assert_eq!(Summary::from_json(&text).unwrap(), sum);
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(BeamRecord::from_json(&text).unwrap(), a);
    }

    #[test]
    fn summarize_rejects_beams_from_another_scenario() {
        let s = toy_scenario();
        let mut other = toy_scenario();
        other.noise_power = 0.02;
        let a = BeamRecord::new(&s, &PhaseVector(vec![0.0, 0.0]), 1.0).unwrap();
        let b = BeamRecord::new(&other, &PhaseVector(vec![0.0, 0.0]), 1.0).unwrap();
        assert!(matches!(
            summarize(&s, &a, &b),
            Err(Error::ScenarioMismatch(_))
        ));
        assert!(matches!(
            BeamRecord::new(&s, &PhaseVector(vec![0.0; 3]), 1.0),
            Err(Error::ScenarioMismatch(_))
        ));
    }

    #[test]
    fn placed_interferers_sit_on_local_maxima_of_the_beam() {
        let mut cfg = ScenarioConfig::new(8, 3);
        cfg.interferers.count = 2;
        cfg.seed = 4;
        let base = build_scenario(&cfg).unwrap();
        let beam = PhaseVector(
            base.target
                .vector()
                .iter()
                .map(|h| h.arg())
                .collect::<Vec<_>>(),
        )
        .quantize(&base.codebook)
        .to_combiner();
        let angles = angle_grid(0.1).unwrap();
        let s = place_interferers(&cfg, &base, &beam, &angles).unwrap();
        assert_eq!(s.interferers.len(), 2);
        let pattern = beam_pattern(&beam, &angles, &s.geometry);
        let peak = pattern.iter().cloned().fold(0.0, f64::max);
        for az in s.interferer_azimuths() {
            let i = angles.iter().position(|a| (a - az).abs() < 1e-12).unwrap();
            assert!(pattern[i] >= pattern[i - 1] && pattern[i] >= pattern[i + 1]);
            assert!(pattern[i] < 0.5 * peak);
        }
    }

    #[test]
    fn explicit_directions_bypass_sidelobe_search() {
        let mut cfg = ScenarioConfig::new(4, 2);
        cfg.interferers.count = 1;
        cfg.interferers.azimuths_deg = Some(vec![25.0]);
        let mut base_cfg = cfg.clone();
        base_cfg.interferers.azimuths_deg = None;
        let base = build_scenario(&base_cfg).unwrap();
        let s =
            place_interferers(&cfg, &base, &PhaseVector::zeros(4).to_combiner(), &[0.0]).unwrap();
        assert_abs_diff_eq!(
            s.interferer_azimuths()[0],
            25f64.to_radians(),
            epsilon = 1e-12
        );
    }

    fn brute_force(s: &Scenario) -> f64 {
        let cb = &s.codebook;
        let m = s.antennas();
        let mut best = 0.0f64;
        for mut i in 0..cb.len().pow(m as u32) {
            let mut ph = Vec::new();
            for _ in 0..m {
                ph.push(cb.value(i % cb.len()));
                i /= cb.len();
            }
            best = best.max(analytic_sinr(s, &PhaseVector(ph).to_combiner()));
        }
        best
    }

    #[test]
    fn oracle_enumerates_the_whole_codebook() {
        for seed in 0..3 {
            let mut cfg = ScenarioConfig::new(4, 2);
            cfg.seed = seed;
            cfg.interferers.count = 1;
            cfg.interferers.azimuths_deg = Some(vec![20.0 * seed as f64 - 20.0]);
            let s = build_scenario(&cfg).unwrap();
            let o = exhaustive_oracle(&s).unwrap();
            assert_eq!(o.evaluated, 256);
            assert!(o.beam.is_quantized(&s.codebook));
            assert_abs_diff_eq!(o.sinr, brute_force(&s), epsilon = 1e-12 * o.sinr);
        }
    }

    #[test]
    fn oracle_refuses_huge_spaces() {
        let s = build_scenario(&ScenarioConfig::new(16, 3)).unwrap();
        assert!(exhaustive_oracle(&s).is_err());
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let mut cfg = ExperimentConfig {
            schema_version: 7,
            ..ExperimentConfig::default()
        };
        cfg.seeds.clear();
        cfg.angle_resolution_deg = 1.0;
        cfg.scenario.interferers.azimuths_deg = Some(vec![10.0]);
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 4, "{p:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn config_defaults_fill_a_minimal_document() {
        let cfg =
            ExperimentConfig::from_json(r#"{"schema_version": 1, "scenario": {"antennas": 8}}"#)
                .unwrap();
        assert_eq!(cfg.iterations, StageIterations::default());
        assert_eq!(cfg.surrogate_mode, SurrogateMode::None);
        assert_eq!(cfg.angle_resolution_deg, 0.1);
        assert_eq!(cfg.scenario.bits, 3);
        let text = cfg.to_json().unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_json(
            r#"{"schema_version": 1, "scenario": {"antennas": 8}, "bogus": 1}"#
        )
        .is_err());
    }

    #[test]
    fn no_interferers_means_no_change() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(4, 2, 0);
        let run = run_pipeline(&cfg, 3, Some(dir.path())).unwrap();
        let s = &run.summary;
        assert!(s.sir_improvement_db.is_empty());
        assert_eq!(s.gain_loss_db, 0.0);
        assert_eq!(s.inr_reduction_db, 0.0);
        assert_eq!(s.sinr_improvement_db, 0.0);
        assert_eq!(s.rate_improvement, 0.0);
        for name in [
            files::CONFIG,
            files::SCENARIO,
            files::STATUS,
            files::SUMMARY,
            files::TRAJECTORY_UNAWARE,
            files::TRAJECTORY_AWARE,
            files::BEAM_UNAWARE,
            files::BEAM_AWARE,
            files::PATTERN_UNAWARE,
            files::PATTERN_AWARE,
        ] {
            assert!(dir.path().join(name).is_file(), "missing {name}");
        }
        let status: RunStatus =
            serde_json::from_str(&fs::read_to_string(dir.path().join(files::STATUS)).unwrap())
                .unwrap();
        assert_eq!(status.completed.len(), 5);
        assert_eq!(status.failed_stage, None);
    }

    #[test]
    fn failed_stage_leaves_a_partial_artifact() {
        let dir = tempfile::tempdir().unwrap();
        // Two antennas have no sidelobes to place interferers on.
        let cfg = quick_config(2, 2, 2);
        let err = run_pipeline(&cfg, 0, Some(dir.path())).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Stage {
                    stage: "placement",
                    ..
                }
            ),
            "{err}"
        );
        let status: RunStatus =
            serde_json::from_str(&fs::read_to_string(dir.path().join(files::STATUS)).unwrap())
                .unwrap();
        assert_eq!(status.completed, vec![Stage::Scenario, Stage::Unaware]);
        assert_eq!(status.failed_stage, Some(Stage::Placement));
        assert!(status.error.unwrap().contains("sidelobes"));
        assert!(dir.path().join(files::BEAM_UNAWARE).is_file());
        assert!(!dir.path().join(files::SUMMARY).exists());
    }

    #[test]
    fn runs_are_reproducible_and_isolated() {
        let cfg = quick_config(4, 2, 1);
        let a = run_pipeline(&cfg, 5, None).unwrap();
        let b = run_pipeline(&cfg, 5, None).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.aware.trajectory, b.aware.trajectory);
        assert_eq!(a.unaware.beam, b.unaware.beam);
        let c = run_pipeline(&cfg, 6, None).unwrap();
        assert_ne!(a.scenario.target.vector(), c.scenario.target.vector());

        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cfg;
        cfg.seeds = vec![1, 2];
        cfg.output_dir = dir.path().to_path_buf();
        let runs = run_experiment(&cfg).unwrap();
        assert_eq!(runs.len(), 2);
        for seed in [1, 2] {
            let text = fs::read_to_string(cfg.run_dir(seed).join(files::CONFIG)).unwrap();
            let resolved = ExperimentConfig::from_json(&text).unwrap();
            assert_eq!(resolved.seeds, vec![seed]);
            assert_eq!(resolved.scenario.seed, seed);
        }
        // Re-running from the stored snapshot reproduces the summary.
        let snapshot = ExperimentConfig::from_json(
            &fs::read_to_string(cfg.run_dir(2).join(files::CONFIG)).unwrap(),
        )
        .unwrap();
        let again = run_pipeline(&snapshot, 2, None).unwrap();
        assert_eq!(again.summary, runs[1].summary);
    }

    #[test]
    fn surrogate_mode_limits_real_measurements() {
        let mut cfg = quick_config(4, 2, 1);
        cfg.surrogate_mode = SurrogateMode::Model;
        cfg.surrogate.training.epochs = 20;
        cfg.surrogate.switch.real_steps = 30;
        cfg.surrogate.switch.rounds = 2;
        cfg.surrogate.switch.stagnation_window = 20;
        cfg.surrogate.switch.max_virtual_steps = 50;
        let run = run_pipeline(&cfg, 0, None).unwrap();
        // begin + real steps + one validation per round.
        assert!(run.aware.real_measurements <= 1 + 60 + 2);
        assert!(run.aware.trajectory.len() > 60);
    }

    #[test]
    fn sweep_produces_one_row_per_point() {
        let cfg = SweepConfig {
            antennas: 4,
            interferers: 1,
            sample_sizes: vec![20, 40],
            draws: 2,
            test_samples: 50,
            surrogate: SurrogateConfig {
                training: crate::surrogate::TrainingConfig {
                    epochs: 5,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..SweepConfig::default()
        };
        let rows = sweep_surrogate(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2 * 2);
        assert!(rows.iter().all(|r| r.nmse.is_finite() && r.nmse >= 0.0));
        let mut csv = Vec::new();
        write_sweep_csv(&mut csv, &rows).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("architecture,kind,samples,draw,nmse,nmse_db\n"));
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert!(mean_nmse(&rows, Architecture::Fc, PowerKind::Signal, 40).is_some());
        assert!(mean_nmse(&rows, Architecture::Fc, PowerKind::Signal, 41).is_none());
    }
}
