use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use nullbeam::agent::write_trajectory_csv;
use nullbeam::array::{angle_grid, beam_pattern, gain_db, write_pattern_csv, ArrayGeometry};
use nullbeam::channel::{build_scenario, Scenario};
use nullbeam::environment::{full_metrics, to_db};
use nullbeam::experiment::{
    exhaustive_oracle, learn_beam, place_interferers, run_experiment, sweep_surrogate,
    write_sweep_csv, BeamRecord, ExperimentConfig, SurrogateMode, SweepConfig,
};
use nullbeam::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nullbeam",
    version,
    about = "Learn interference-nulling analog beams from power measurements"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: unaware beam, interferer placement, aware beam, summary.
    Run(Common),
    /// Learn one beam against a scenario with explicitly placed interferers.
    Learn(Common),
    /// Surrogate accuracy versus training-set size.
    SweepSurrogate(Common),
    /// Evaluate a saved beam over an angle grid.
    Pattern(PatternArgs),
    /// Exhaustive search over every codebook beam (small arrays only).
    Oracle(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    surrogate: Option<SurrogateArg>,
    #[arg(long)]
    antennas: Option<usize>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    interferers: Option<usize>,
    /// Learning iterations (the aware stage for `run`).
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct PatternArgs {
    /// Saved beam (`beam_*.json`).
    #[arg(long)]
    beam: PathBuf,
    /// Scenario the beam was learned in; reports target and interferer gains.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    resolution: f64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SurrogateArg {
    None,
    Model,
    Fc,
}

impl From<SurrogateArg> for SurrogateMode {
    fn from(a: SurrogateArg) -> Self {
        match a {
            SurrogateArg::None => SurrogateMode::None,
            SurrogateArg::Model => SurrogateMode::Model,
            SurrogateArg::Fc => SurrogateMode::Fc,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Learn(c) => cmd_learn(&c),
        Command::SweepSurrogate(c) => cmd_sweep(&c),
        Command::Pattern(p) => cmd_pattern(&p),
        Command::Oracle(c) => cmd_oracle(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn experiment_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
        cfg.scenario.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(mode) = c.surrogate {
        cfg.surrogate_mode = mode.into();
    }
    if let Some(m) = c.antennas {
        cfg.scenario.antennas = m;
    }
    if let Some(b) = c.bits {
        cfg.scenario.bits = b;
    }
    if let Some(k) = c.interferers {
        cfg.scenario.interferers.count = k;
        if cfg
            .scenario
            .interferers
            .azimuths_deg
            .as_ref()
            .is_some_and(|a| a.len() != k)
        {
            cfg.scenario.interferers.azimuths_deg = None;
        }
    }
    if let Some(n) = c.iterations {
        cfg.iterations.aware = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn cmd_run(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    let runs = run_experiment(&cfg)?;
    for run in &runs {
        let s = &run.summary;
        let seed = run.config.scenario.seed;
        println!(
            "seed {seed}: interferers at {:?} deg; SIR improvement {:?} dB; INR reduction {:.2} dB; gain loss {:.2} dB; SINR {:.2} -> {:.2} dB -> {}",
            round2(&s.interferer_azimuths_deg),
            round2(&s.sir_improvement_db),
            s.inr_reduction_db,
            s.gain_loss_db,
            s.unaware.sinr_db,
            s.aware.sinr_db,
            cfg.run_dir(seed).display()
        );
    }
    Ok(())
}

fn round2(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 100.0).round() / 100.0).collect()
}

fn cmd_learn(c: &Common) -> Result<()> {
    let mut cfg = experiment_config(c)?;
    if let Some(seed) = c.seed {
        cfg.agent.seed = seed;
    }
    let k = cfg.scenario.interferers.count;
    if k > 0 && cfg.scenario.interferers.azimuths_deg.is_none() {
        return Err(Error::invalid(
            "learn needs explicit interferer directions (scenario.interferers.azimuths_deg); use `run` for sidelobe placement",
        ));
    }
    let s = build_scenario(&cfg.scenario)?;
    let angles = angle_grid(cfg.angle_resolution_deg)?;
    let iterations = c.iterations.unwrap_or(cfg.iterations.aware);
    info!(
        "learning {iterations} iterations on {} antennas",
        s.antennas()
    );
    let rec = learn_beam(&s, &cfg.agent, iterations, &angles)?;
    if let Some(dir) = &c.out {
        create_dir(dir)?;
        let scenario_path = dir.join("scenario.json");
        fs::write(&scenario_path, s.to_json()?).map_err(|e| Error::io(&scenario_path, e))?;
        let beam_path = dir.join("beam.json");
        fs::write(&beam_path, serde_json::to_string_pretty(&rec.beam)?)
            .map_err(|e| Error::io(&beam_path, e))?;
        write_file(&dir.join("trajectory.csv"), |w| {
            write_trajectory_csv(w, k, &rec.trajectory)
        })?;
        write_file(&dir.join("pattern.csv"), |w| {
            write_pattern_csv(w, &angles, &rec.pattern)
        })?;
    }
    println!(
        "best SINR {:.2} dB (measured {:.2} dB); SIR {:?} dB; indices {:?}",
        rec.beam.metrics.sinr_db,
        rec.beam.measured_sinr_db,
        round2(&rec.beam.metrics.sir_db),
        rec.beam.indices
    );
    Ok(())
}

fn cmd_sweep(c: &Common) -> Result<()> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SweepConfig>(&text)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
        }
        None => SweepConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(m) = c.antennas {
        cfg.antennas = m;
    }
    if let Some(b) = c.bits {
        cfg.bits = b;
    }
    if let Some(k) = c.interferers {
        cfg.interferers = k;
    }
    if let Some(mode) = c.surrogate {
        match SurrogateMode::from(mode).architecture() {
            Some(arch) => cfg.architectures = vec![arch],
            None => {
                return Err(Error::invalid(
                    "--surrogate none selects no architecture to sweep",
                ))
            }
        }
    }
    if c.iterations.is_some() {
        return Err(Error::invalid(
            "--iterations does not apply to sweep-surrogate",
        ));
    }
    cfg.validate()?;
    let rows = sweep_surrogate(&cfg)?;
    match &c.out {
        Some(dir) => {
            create_dir(dir)?;
            let cfg_path = dir.join("sweep_config.json");
            fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?)
                .map_err(|e| Error::io(&cfg_path, e))?;
            write_file(&dir.join("sweep.csv"), |w| write_sweep_csv(w, &rows))?;
            println!("{} rows -> {}", rows.len(), dir.join("sweep.csv").display());
        }
        None => write_sweep_csv(io::stdout().lock(), &rows)
            .map_err(|e| Error::io(Path::new("<stdout>"), e))?,
    }
    Ok(())
}

fn cmd_pattern(p: &PatternArgs) -> Result<()> {
    let text = fs::read_to_string(&p.beam).map_err(|e| Error::io(&p.beam, e))?;
    let beam = BeamRecord::from_json(&text)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.beam.display())))?;
    let scenario = match &p.scenario {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(
                Scenario::from_json(&text)
                    .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let geometry = match &scenario {
        Some(s) => s.geometry,
        None => ArrayGeometry::ula(beam.phases.len())?,
    };
    if geometry.antennas != beam.phases.len() {
        return Err(Error::ScenarioMismatch(format!(
            "beam has {} phases, scenario {} antennas",
            beam.phases.len(),
            geometry.antennas
        )));
    }
    let angles = angle_grid(p.resolution)?;
    let w = beam.phase_vector().to_combiner();
    let gains = beam_pattern(&w, &angles, &geometry);
    match &p.out {
        Some(path) => write_file(path, |w| write_pattern_csv(w, &angles, &gains))?,
        None => write_pattern_csv(io::stdout().lock(), &angles, &gains)
            .map_err(|e| Error::io(Path::new("<stdout>"), e))?,
    }
    if let Some(s) = &scenario {
        let target = s.target.dominant_azimuth();
        let g_target = gain_db(w.gain(&geometry.response(target, 0.0)));
        eprintln!("target {:.2} deg: {g_target:.2} dB", target.to_degrees());
        for az in s.interferer_azimuths() {
            let g = gain_db(w.gain(&geometry.response(az, 0.0)));
            eprintln!(
                "interferer {:.2} deg: {g:.2} dB ({:.2} dB below target)",
                az.to_degrees(),
                g_target - g
            );
        }
    }
    Ok(())
}

fn cmd_oracle(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    let mut target_only = cfg.scenario.clone();
    target_only.interferers.azimuths_deg = None;
    let base = build_scenario(&target_only)?;
    let scenario = if cfg.scenario.interferers.count == 0 {
        base
    } else if cfg.scenario.interferers.azimuths_deg.is_some() {
        build_scenario(&cfg.scenario)?
    } else {
        // Mirror the pipeline: interferers on the sidelobes of the best unaware beam.
        let unaware = exhaustive_oracle(&base)?;
        let angles = angle_grid(cfg.angle_resolution_deg)?;
        place_interferers(&cfg.scenario, &base, &unaware.beam.to_combiner(), &angles)?
    };
    let result = exhaustive_oracle(&scenario)?;
    let rec = BeamRecord::new(&scenario, &result.beam, result.sinr)?;
    let metrics = full_metrics(&scenario, &result.beam.to_combiner());
    println!(
        "evaluated {} beams; max SINR {:.3} dB; indices {:?}; phases {:?}",
        result.evaluated,
        to_db(result.sinr),
        rec.indices,
        round2(&rec.phases)
    );
    println!(
        "SIR {:?} dB; INR {:.2} dB",
        round2(&metrics.sir_db),
        metrics.inr_db
    );
    if let Some(dir) = &c.out {
        create_dir(dir)?;
        let scenario_path = dir.join("scenario.json");
        fs::write(&scenario_path, scenario.to_json()?).map_err(|e| Error::io(&scenario_path, e))?;
        let beam_path = dir.join("beam_oracle.json");
        fs::write(&beam_path, serde_json::to_string_pretty(&rec)?)
            .map_err(|e| Error::io(&beam_path, e))?;
    }
    Ok(())
}
