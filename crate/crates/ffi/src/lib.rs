//! C ABI over `nullbeam`.
//!
//! Every fallible function returns an [`NbStatus`]; on failure a message is
//! available from [`nb_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function. Strings returned to the
//! caller are released with [`nb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nullbeam::agent::{learn, ActorCriticConfig, Agent};
use nullbeam::array::{beam_pattern, hpbw, ArrayGeometry, PhaseCodebook, PhaseVector};
use nullbeam::channel::{build_scenario, Scenario, ScenarioConfig};
use nullbeam::environment::{
    full_metrics, measure_interference_plus_noise, measure_signal_plus_interference_plus_noise,
    ActualEnvironment,
};
use nullbeam::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Json = 3,
    Measurement = 4,
    Shape = 5,
    ScenarioMismatch = 6,
    Io = 7,
    State = 8,
    Panic = 9,
}

/// Opaque scenario handle.
pub struct NbScenario {
    inner: Scenario,
}

/// Ground-truth figures of one beam.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NbMetrics {
    /// `|w^H h|²`, linear.
    pub signal_gain: f64,
    pub snr_db: f64,
    pub inr_db: f64,
    pub sinr_db: f64,
    /// Worst per-interferer SIR; +inf without interferers.
    pub min_sir_db: f64,
    /// `log2(1 + SINR)`.
    pub rate: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NbStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => NbStatus::InvalidArgument,
        Error::Measurement(_) => NbStatus::Measurement,
        Error::Shape(_) => NbStatus::Shape,
        Error::State(_) => NbStatus::State,
        Error::ScenarioMismatch(_) => NbStatus::ScenarioMismatch,
        Error::Stage { source, .. } => status_of(source),
        Error::Io { .. } | Error::Csv(_) => NbStatus::Io,
        Error::Json(_) => NbStatus::Json,
    }
}

struct Failure(NbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: NbStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic for `nb_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NbStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            NbStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(NbStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(NbStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(fail(NbStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(NbStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(NbStatus::NullPointer, format!("{name} is null")))
}

unsafe fn scenario_arg<'a>(p: *const NbScenario) -> Result<&'a Scenario, Failure> {
    p.as_ref()
        .map(|s| &s.inner)
        .ok_or_else(|| fail(NbStatus::NullPointer, "scenario is null"))
}

unsafe fn beam_arg(s: &Scenario, phases: *const f64, len: usize) -> Result<PhaseVector, Failure> {
    let phases = slice_arg(phases, len, "phases")?;
    if len != s.antennas() {
        return Err(fail(
            NbStatus::Shape,
            format!("{len} phases for {} antennas", s.antennas()),
        ));
    }
    Ok(PhaseVector(phases.to_vec()))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn nb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a scenario from a JSON scenario configuration (antennas, bits,
/// target, interferers with explicit directions, powers, seed).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_scenario_from_config_json(
    json: *const c_char,
    out: *mut *mut NbScenario,
) -> NbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg: ScenarioConfig =
            serde_json::from_str(str_arg(json, "json")?).map_err(Error::from)?;
        let inner = build_scenario(&cfg)?;
        *out = Box::into_raw(Box::new(NbScenario { inner }));
        Ok(())
    })
}

/// Restores a scenario saved with [`nb_scenario_to_json`] or by the CLI.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_scenario_from_json(
    json: *const c_char,
    out: *mut *mut NbScenario,
) -> NbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = Scenario::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(NbScenario { inner }));
        Ok(())
    })
}

/// Serializes a scenario; free the result with [`nb_string_free`].
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_scenario_to_json(
    scenario: *const NbScenario,
    out: *mut *mut c_char,
) -> NbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let text = scenario_arg(scenario)?.to_json()?;
        *out = CString::new(text)
            .map_err(|_| fail(NbStatus::Json, "scenario JSON contains NUL"))?
            .into_raw();
        Ok(())
    })
}

/// Number of antennas, or 0 for a NULL handle.
///
/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_scenario_antennas(scenario: *const NbScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.inner.antennas())
}

/// Codebook resolution in bits, or 0 for a NULL handle.
///
/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_scenario_bits(scenario: *const NbScenario) -> u32 {
    scenario.as_ref().map_or(0, |s| s.inner.codebook.bits())
}

/// Releases a scenario. NULL is ignored.
///
/// # Safety
/// `scenario` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nb_scenario_free(scenario: *mut NbScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Noiseless on/off power readings of a beam: `P_{S+I+N}` and `P_{I+N}`.
///
/// # Safety
/// `phases` must hold `len` doubles; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_measure(
    scenario: *const NbScenario,
    phases: *const f64,
    len: usize,
    signal_interference_noise: *mut f64,
    interference_noise: *mut f64,
) -> NbStatus {
    guard(|| {
        let s = scenario_arg(scenario)?;
        let w = beam_arg(s, phases, len)?.to_combiner();
        let sin = out_arg(signal_interference_noise, "signal_interference_noise")?;
        let inn = out_arg(interference_noise, "interference_noise")?;
        *sin = measure_signal_plus_interference_plus_noise(s, &w);
        *inn = measure_interference_plus_noise(s, &w);
        Ok(())
    })
}

/// Ground-truth metrics of a beam (any phases, not only codebook ones).
///
/// # Safety
/// `phases` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_metrics(
    scenario: *const NbScenario,
    phases: *const f64,
    len: usize,
    out: *mut NbMetrics,
) -> NbStatus {
    guard(|| {
        let s = scenario_arg(scenario)?;
        let m = full_metrics(s, &beam_arg(s, phases, len)?.to_combiner());
        *out_arg(out, "out")? = NbMetrics {
            signal_gain: m.signal_gain,
            snr_db: m.snr_db,
            inr_db: m.inr_db,
            sinr_db: m.sinr_db,
            min_sir_db: m.sir_db.iter().copied().fold(f64::INFINITY, f64::min),
            rate: m.rate,
        };
        Ok(())
    })
}

/// Quantizes `len` phases onto the `bits`-bit codebook. `input` and `output`
/// may alias.
///
/// # Safety
/// Both buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nb_quantize(
    bits: u32,
    input: *const f64,
    output: *mut f64,
    len: usize,
) -> NbStatus {
    guard(|| {
        let cb = PhaseCodebook::new(bits)?;
        let q = PhaseVector(slice_arg(input, len, "input")?.to_vec()).quantize(&cb);
        slice_out(output, len, "output")?.copy_from_slice(&q.0);
        Ok(())
    })
}

/// Approximate half-power beamwidth (radians) of a half-wavelength ULA.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_hpbw(antennas: usize, out: *mut f64) -> NbStatus {
    guard(|| {
        *out_arg(out, "out")? = hpbw(antennas)?;
        Ok(())
    })
}

/// Linear gains `|w^H a(θ)|²` of a beam over `count` azimuths (radians) for a
/// ULA with the given element spacing in wavelengths.
///
/// # Safety
/// `phases` must hold `len` doubles; `angles` and `gains` `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn nb_pattern(
    phases: *const f64,
    len: usize,
    spacing: f64,
    angles: *const f64,
    gains: *mut f64,
    count: usize,
) -> NbStatus {
    guard(|| {
        let geometry = ArrayGeometry::new(len, spacing)?;
        let w = PhaseVector(slice_arg(phases, len, "phases")?.to_vec()).to_combiner();
        let angles = slice_arg(angles, count, "angles")?;
        slice_out(gains, count, "gains")?.copy_from_slice(&beam_pattern(&w, angles, &geometry));
        Ok(())
    })
}

/// Learns a beam against the scenario for `iterations` steps and writes the
/// best beam's phases and its measured SINR (linear). `agent_json` is an
/// agent configuration or NULL for defaults.
///
/// # Safety
/// `best_phases` must hold `len` doubles, equal to the antenna count;
/// `best_sinr` must be writable; `agent_json` NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn nb_learn(
    scenario: *const NbScenario,
    agent_json: *const c_char,
    iterations: usize,
    best_phases: *mut f64,
    len: usize,
    best_sinr: *mut f64,
) -> NbStatus {
    guard(|| {
        let s = scenario_arg(scenario)?;
        if len != s.antennas() {
            return Err(fail(
                NbStatus::Shape,
                format!("{len} phases for {} antennas", s.antennas()),
            ));
        }
        let cfg: ActorCriticConfig = if agent_json.is_null() {
            ActorCriticConfig::default()
        } else {
            serde_json::from_str(str_arg(agent_json, "agent_json")?).map_err(Error::from)?
        };
        let phases_out = slice_out(best_phases, len, "best_phases")?;
        let sinr_out = out_arg(best_sinr, "best_sinr")?;
        let mut agent = Agent::new(s.antennas(), s.codebook.clone(), cfg)?;
        let mut env = ActualEnvironment::new(s.clone());
        let out = learn(&mut agent, &mut env, iterations, None)?;
        phases_out.copy_from_slice(&out.best.0);
        *sinr_out = out.best_sinr;
        Ok(())
    })
}
