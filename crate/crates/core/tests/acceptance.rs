//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs at full size by default (roughly 90 minutes on one core). The process
//! exits 0 after reporting; set `NULLBEAM_ACCEPTANCE_STRICT=1` to exit 1 when
//! any criterion fails. `NULLBEAM_ACCEPTANCE_ONLY=6,7` runs a subset.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nullbeam::agent::{learn, ActorCriticConfig, Agent};
use nullbeam::array::{PhaseCodebook, PhaseVector};
use nullbeam::channel::{build_scenario, Scenario, ScenarioConfig};
use nullbeam::environment::{
    analytic_sinr, estimate_sinr, measure_interference_plus_noise,
    measure_signal_plus_interference_plus_noise, to_db, ActualEnvironment, PowerMeasurement,
};
use nullbeam::experiment::{
    exhaustive_oracle, mean_nmse, run_pipeline, sweep_surrogate, ExperimentConfig, RunArtifact,
    SurrogateMode, SweepConfig,
};
use nullbeam::neuralnet::gradient_check;
use nullbeam::surrogate::{
    Architecture, FcEncoding, FcPredictor, ModelBasedPredictor, PowerKind, SurrogateDataset,
};

const SEEDS: u64 = 10;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, id: u32, pass: bool, text: String) {
        let line = format!("{} [{id}] {text}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn null_config(antennas: usize) -> ExperimentConfig {
    let mut scenario = ScenarioConfig::new(antennas, 3);
    scenario.interferers.count = 2;
    ExperimentConfig {
        scenario,
        ..ExperimentConfig::default()
    }
}

/// Sequential seeds, timed individually.
fn run_seeds(cfg: &ExperimentConfig, label: &str) -> Vec<(RunArtifact, Duration)> {
    (0..SEEDS)
        .map(|seed| {
            let t = Instant::now();
            let run = run_pipeline(cfg, seed, None).unwrap_or_else(|e| panic!("{label} seed {seed}: {e}"));
            let elapsed = t.elapsed();
            eprintln!(
                "  {label} seed {seed}: SIR +{:?} dB, loss {:.2} dB, SINR {:.2} dB, {} real pairs, {:.0?}",
                run.summary.sir_improvement_db.iter().map(|x| (x * 10.0).round() / 10.0).collect::<Vec<_>>(),
                run.summary.gain_loss_db,
                run.summary.aware.sinr_db,
                run.aware.real_measurements,
                elapsed
            );
            (run, elapsed)
        })
        .collect()
}

fn criterion_1(report: &mut Report, runs: &[(usize, Vec<(RunArtifact, Duration)>)]) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (m, seeds) in runs {
        let sir = median(
            seeds
                .iter()
                .map(|(r, _)| r.summary.min_sir_improvement_db())
                .collect(),
        );
        let loss = median(seeds.iter().map(|(r, _)| r.summary.gain_loss_db).collect());
        let slowest = seeds.iter().map(|(_, d)| *d).max().unwrap_or_default();
        let ok = sir >= 10.0 && loss <= 3.0 && slowest <= Duration::from_secs(600);
        pass &= ok;
        parts.push(format!(
            "M={m}: median min SIR gain {sir:.2} dB (>= 10), median gain loss {loss:.2} dB (<= 3), slowest seed {:.0}s (<= 600)",
            slowest.as_secs_f64()
        ));
    }
    report.record(
        1,
        pass,
        format!("null shaping over {SEEDS} seeds; {}", parts.join("; ")),
    );
}

/// First aware-stage iteration whose applied beam reaches the overall SIR.
fn reach_iteration(run: &RunArtifact, threshold_db: f64) -> Option<usize> {
    run.aware
        .trajectory
        .iter()
        .find(|r| {
            r.metrics
                .as_ref()
                .is_some_and(|m| m.overall_sir_db() >= threshold_db)
        })
        .map(|r| r.iter)
}

fn criterion_2(report: &mut Report, runs: &[(usize, Vec<(RunArtifact, Duration)>)]) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (m, seeds) in runs {
        let hits = seeds
            .iter()
            .filter(|(r, _)| reach_iteration(r, 15.0).is_some_and(|i| i <= 2000))
            .count();
        let start = median(
            seeds
                .iter()
                .filter_map(|(r, _)| {
                    r.aware
                        .trajectory
                        .first()?
                        .metrics
                        .as_ref()
                        .map(|m| m.overall_sir_db())
                })
                .collect(),
        );
        let frac = hits as f64 / seeds.len() as f64;
        pass &= frac >= 0.7;
        parts.push(format!(
            "M={m}: {hits}/{} seeds reach overall SIR >= 15 dB within 2000 iterations (need >= 70%), median start {start:.1} dB",
            seeds.len()
        ));
    }
    report.record(2, pass, parts.join("; "));
}

fn criterion_3(report: &mut Report) {
    let seeds = 20u64;
    let mut within = 0;
    let mut gaps = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..seeds {
        let mut cfg = ScenarioConfig::new(4, 2);
        cfg.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c1e);
        cfg.interferers.count = 2;
        cfg.interferers.azimuths_deg = Some((0..2).map(|_| rng.gen_range(-60.0..60.0)).collect());
        let s = build_scenario(&cfg).expect("oracle scenario");
        let t = Instant::now();
        let oracle = exhaustive_oracle(&s).expect("256 beams");
        let agent_cfg = ActorCriticConfig {
            seed,
            ..ActorCriticConfig::default()
        };
        let mut agent = Agent::new(4, s.codebook.clone(), agent_cfg).expect("agent");
        let mut env = ActualEnvironment::new(s.clone());
        let out = learn(&mut agent, &mut env, 3000, None).expect("learning");
        slowest = slowest.max(t.elapsed());
        let gap = to_db(oracle.sinr) - to_db(analytic_sinr(&s, &out.best.to_combiner()));
        if gap <= 1.0 {
            within += 1;
        }
        gaps.push(gap);
    }
    let pass = within as f64 >= 0.8 * seeds as f64 && slowest <= Duration::from_secs(60);
    report.record(
        3,
        pass,
        format!(
            "M=4 r=2 K=2: {within}/{seeds} seeds within 1 dB of the exhaustive optimum after 3000 iterations (need >= 80%), median gap {:.2} dB, slowest seed {:.1}s (< 60)",
            median(gaps),
            slowest.as_secs_f64()
        ),
    );
}

fn criterion_4(report: &mut Report) {
    let cfg = SweepConfig {
        antennas: 8,
        sample_sizes: vec![50, 10_000],
        kinds: vec![PowerKind::Interference],
        draws: 5,
        ..SweepConfig::default()
    };
    let rows = sweep_surrogate(&cfg).expect("sweep");
    let model =
        mean_nmse(&rows, Architecture::ModelBased, PowerKind::Interference, 50).expect("model row");
    let fc = mean_nmse(&rows, Architecture::Fc, PowerKind::Interference, 10_000).expect("fc row");

    let large = SweepConfig {
        antennas: 32,
        sample_sizes: vec![50, 200, 1000],
        architectures: vec![Architecture::ModelBased],
        kinds: vec![PowerKind::Interference],
        draws: 5,
        ..SweepConfig::default()
    };
    let rows32 = sweep_surrogate(&large).expect("M=32 sweep");
    let curve: Vec<f64> = large
        .sample_sizes
        .iter()
        .map(|&n| {
            mean_nmse(
                &rows32,
                Architecture::ModelBased,
                PowerKind::Interference,
                n,
            )
            .expect("row")
        })
        .collect();
    let monotone = curve.windows(2).all(|w| w[1] <= w[0]);
    report.record(
        4,
        model <= fc && monotone,
        format!(
            "M=8 interference NMSE over 5 draws: model-based N=50 {model:.3e} vs FC N=10000 {fc:.3e} (need <=); M=32 model-based NMSE at N=50/200/1000 {:.3e}/{:.3e}/{:.3e} (need non-increasing)",
            curve[0], curve[1], curve[2]
        ),
    );
}

fn criterion_5(report: &mut Report, pure: &[(RunArtifact, Duration)]) {
    let mut cfg = null_config(8);
    cfg.surrogate_mode = SurrogateMode::Model;
    let assisted = run_seeds(&cfg, "M=8 assisted");
    let pure_sinr = median(pure.iter().map(|(r, _)| r.summary.aware.sinr_db).collect());
    let assisted_sinr = median(
        assisted
            .iter()
            .map(|(r, _)| r.summary.aware.sinr_db)
            .collect(),
    );
    let max_real = assisted
        .iter()
        .map(|(r, _)| r.aware.real_measurements)
        .max()
        .unwrap_or(0);
    let pure_real = median(
        pure.iter()
            .map(|(r, _)| r.aware.real_measurements as f64)
            .collect(),
    );
    let pass = assisted_sinr >= pure_sinr - 3.0 && max_real <= 1200;
    report.record(
        5,
        pass,
        format!(
            "M=8 median final SINR: assisted {assisted_sinr:.2} dB vs pure {pure_sinr:.2} dB (need within 3 dB); real pairs: assisted max {max_real} (<= 1200) vs pure median {pure_real:.0}"
        ),
    );
}

fn random_scenario(rng: &mut ChaCha8Rng) -> Scenario {
    let m = rng.gen_range(1..=16);
    let mut cfg = ScenarioConfig::new(m, rng.gen_range(1..=4));
    cfg.seed = rng.gen();
    cfg.snr_db = rng.gen_range(-10.0..30.0);
    let k = rng.gen_range(0..=3);
    cfg.interferers.count = k;
    cfg.interferers.azimuths_deg = Some((0..k).map(|_| rng.gen_range(-90.0..90.0)).collect());
    cfg.interferers.relative_power_db = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
    build_scenario(&cfg).expect("random scenario")
}

fn random_beam(s: &Scenario, rng: &mut ChaCha8Rng) -> PhaseVector {
    PhaseVector(
        (0..s.antennas())
            .map(|_| s.codebook.value(rng.gen_range(0..s.codebook.len())))
            .collect(),
    )
}

fn criterion_6(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Each exactness check is held to a forward rounding-error bound: machine
    // epsilon times the number of accumulated terms times the magnitude that
    // was rounded. Errors are reported as multiples of that bound.
    let eps = f64::EPSILON;
    let mut failures = Vec::new();

    let mut sinr_err: f64 = 0.0;
    let mut identity_err: f64 = 0.0;
    let mut norm_err: f64 = 0.0;
    for _ in 0..1000 {
        let s = random_scenario(&mut rng);
        let beam = random_beam(&s, &mut rng);
        let w = beam.to_combiner();
        let m = PowerMeasurement {
            signal_interference_noise: measure_signal_plus_interference_plus_noise(&s, &w),
            interference_noise: measure_interference_plus_noise(&s, &w),
        };
        let est = estimate_sinr(&m).expect("positive reading");
        let n = s.antennas();
        let terms = (n + s.interferers.len() + 2) as f64;
        // P_SIN − P_IN cancels when the signal is weak, so the bound scales
        // with P_SIN / P_IN = 1 + SINR.
        let obj = analytic_sinr(&s, &w);
        sinr_err = sinr_err.max((est - obj).abs() / (8.0 * terms * eps * (1.0 + obj)));

        // w^H (P_x H H^H + σ² I) w with H = [h_1 … h_K], as an explicit matrix.
        let mut r = vec![Complex64::new(0.0, 0.0); n * n];
        for h in &s.interferers {
            let v = h.vector();
            for i in 0..n {
                for j in 0..n {
                    r[i * n + j] += v[i] * v[j].conj() * s.transmit_power;
                }
            }
        }
        for i in 0..n {
            r[i * n + i] += s.noise_power;
        }
        let ww = w.weights();
        let mut quad = Complex64::new(0.0, 0.0);
        let mut magnitude = 0.0;
        for i in 0..n {
            for j in 0..n {
                let term = ww[i].conj() * r[i * n + j] * ww[j];
                quad += term;
                magnitude += term.norm();
            }
        }
        let bound = 8.0 * (2 * n) as f64 * eps * magnitude;
        identity_err = identity_err
            .max((quad.re - m.interference_noise).abs() / bound)
            .max(quad.im.abs() / bound);
        norm_err = norm_err.max((w.norm() - 1.0).abs() / (8.0 * n as f64 * eps));
    }
    for (name, err) in [
        ("SINR estimator vs objective", sinr_err),
        ("interference-plus-noise identity", identity_err),
        ("combiner norm", norm_err),
    ] {
        if err > 1.0 {
            failures.push(format!("{name} error {err:.2}x the rounding bound"));
        }
    }

    let mut quant_ok = true;
    for bits in 1..=6 {
        let cb = PhaseCodebook::new(bits).expect("codebook");
        for _ in 0..200 {
            let pv = PhaseVector((0..8).map(|_| rng.gen_range(-4.0 * PI..4.0 * PI)).collect());
            let q = pv.quantize(&cb);
            quant_ok &= q.is_quantized(&cb) && q.quantize(&cb) == q;
        }
    }
    if !quant_ok {
        failures.push("quantization not idempotent or off-codebook".into());
    }

    let mut nonneg = true;
    for _ in 0..200 {
        let m = rng.gen_range(1..12);
        let p = ModelBasedPredictor::new(m, rng.gen_range(1..4), rng.gen(), &mut rng)
            .expect("predictor");
        let phases = PhaseVector((0..m).map(|_| rng.gen_range(-PI..PI)).collect());
        nonneg &= p.predict(&phases.to_combiner()) >= 0.0;
    }
    if !nonneg {
        failures.push("model-based predictor produced a negative power".into());
    }

    let agent_cfg = ActorCriticConfig {
        seed: 3,
        ..ActorCriticConfig::default()
    };
    let mut agent =
        Agent::new(4, PhaseCodebook::new(3).expect("codebook"), agent_cfg).expect("agent");
    let states = ndarray::Array2::from_shape_fn((6, 4), |_| rng.gen_range(-PI..PI));
    let actions = ndarray::Array2::from_shape_fn((6, 4), |_| rng.gen_range(-PI..PI));
    let mut grads = vec![
        (
            "actor",
            gradient_check(&mut agent.actor().clone(), &states, &mut rng).expect("actor"),
        ),
        (
            "critic",
            gradient_check(
                &mut agent.critic().clone(),
                &agent.critic_input(&states, &actions),
                &mut rng,
            )
            .expect("critic"),
        ),
        (
            "policy gradient",
            agent.policy_gradient_check(&states).expect("policy"),
        ),
    ];
    let mut data = SurrogateDataset::new(PowerKind::Interference, 6);
    for _ in 0..16 {
        let beam = PhaseVector((0..6).map(|_| rng.gen_range(-PI..PI)).collect());
        data.push(beam.to_combiner(), rng.gen_range(0.1..2.0))
            .expect("sample");
    }
    let mut model = ModelBasedPredictor::new(6, 2, true, &mut rng).expect("model");
    grads.push(("model-based", model.gradient_check(&data).expect("model")));
    let mut fc = FcPredictor::new(6, 16, FcEncoding::Cartesian, &mut rng).expect("fc");
    grads.push((
        "fully connected",
        fc.gradient_check(&data, &mut rng).expect("fc"),
    ));
    for (name, worst) in &grads {
        if *worst >= 1e-4 {
            failures.push(format!("{name} gradient rel err {worst:.2e}"));
        }
    }

    let worst_grad = grads.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    report.record(
        6,
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "exactness over 1000 cases, worst error as a multiple of the epsilon rounding bound: SINR {sinr_err:.2}, identity {identity_err:.2}, norm {norm_err:.2} (<= 1); quantization, nonnegativity ok; worst gradient rel err {worst_grad:.1e} (< 1e-4)"
            )
        } else {
            format!("exactness: {}", failures.join("; "))
        },
    );
}

fn criterion_7(report: &mut Report) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, sub_hpbw) in [("exp1", false), ("exp2", true), ("exp3", true)] {
        let cfg =
            ExperimentConfig::load(&dir.join(format!("{name}.json"))).expect("shipped config");
        let runs: Vec<RunArtifact> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                run_pipeline(&cfg, seed, None).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"))
            })
            .collect();
        let loss = median(
            runs.iter()
                .map(|r| 1.0 - r.summary.signal_power_ratio)
                .collect(),
        );
        let inr = median(runs.iter().map(|r| r.summary.inr_reduction_db).collect());
        let sep = runs[0].summary.interferer_azimuths_deg[0] - runs[0].summary.target_azimuth_deg;
        let ok = if sub_hpbw {
            loss >= 0.25 && inr >= 10.0
        } else {
            loss <= 0.15
        };
        pass &= ok;
        parts.push(format!(
            "{name} ({sep:.2} deg): signal loss {:.0}% ({}), INR reduction {inr:.1} dB{}",
            100.0 * loss,
            if sub_hpbw { ">= 25%" } else { "<= 15%" },
            if sub_hpbw { " (>= 10)" } else { "" }
        ));
    }
    report.record(
        7,
        pass,
        format!(
            "EXP geometries, M=16 r=2, median of {} seeds: {}",
            3,
            parts.join("; ")
        ),
    );
}

fn main() {
    let started = Instant::now();
    let mut report = Report { lines: Vec::new() };

    let only: Option<Vec<usize>> = std::env::var("NULLBEAM_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|c| c.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().is_none_or(|o| o.contains(&c));

    let runs: Vec<(usize, Vec<(RunArtifact, Duration)>)> = if wanted(1) || wanted(2) || wanted(5) {
        [16, 8]
            .iter()
            .map(|&m| (m, run_seeds(&null_config(m), &format!("M={m}"))))
            .collect()
    } else {
        Vec::new()
    };
    if wanted(1) {
        criterion_1(&mut report, &runs);
    }
    if wanted(2) {
        criterion_2(&mut report, &runs);
    }
    if wanted(3) {
        criterion_3(&mut report);
    }
    if wanted(4) {
        criterion_4(&mut report);
    }
    if wanted(5) {
        criterion_5(&mut report, &runs[1].1);
    }
    if wanted(6) {
        criterion_6(&mut report);
    }
    if wanted(7) {
        criterion_7(&mut report);
    }

    let failed = report.lines.iter().filter(|(p, _)| !p).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0?}",
        report.lines.len() - failed,
        started.elapsed()
    );
    if failed > 0 && std::env::var("NULLBEAM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
