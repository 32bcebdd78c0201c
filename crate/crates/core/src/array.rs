//! Phase-shifter codebooks, combining vectors and ULA beam patterns.
//!
//! A combining vector is fully determined by its phase vector: every antenna
//! carries the phasor `e^{jθ_m} / √M`, so the vector always has unit norm and
//! the quantized phase vector is the natural state for a learner that can only
//! program discrete phase shifters.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_CODEBOOK_BITS: u32 = 16;

/// Wraps any angle into `(-π, π]`.
pub fn wrap_phase(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped <= -PI {
        PI
    } else {
        wrapped
    }
}

/// The `2^r` phases an `r`-bit shifter can realize, uniformly spaced over
/// `(-π, π]` with `π` (and `0`) on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodebookBits", into = "CodebookBits")]
pub struct PhaseCodebook {
    bits: u32,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CodebookBits {
    bits: u32,
}

impl TryFrom<CodebookBits> for PhaseCodebook {
    type Error = Error;
    fn try_from(raw: CodebookBits) -> Result<Self> {
        PhaseCodebook::new(raw.bits)
    }
}

impl From<PhaseCodebook> for CodebookBits {
    fn from(cb: PhaseCodebook) -> Self {
        CodebookBits { bits: cb.bits }
    }
}

impl PhaseCodebook {
    pub fn new(bits: u32) -> Result<Self> {
        if !(1..=MAX_CODEBOOK_BITS).contains(&bits) {
            return Err(Error::invalid(format!(
                "codebook bits must be in 1..={MAX_CODEBOOK_BITS}, got {bits}"
            )));
        }
        let n = 1usize << bits;
        let step = 2.0 * PI / n as f64;
        // Multiplying the step by an integer is exact for the power-of-two
        // cases that matter (k = n/2 gives 0, k = n gives π).
        let values = (1..=n).map(|k| -PI + k as f64 * step).collect();
        Ok(Self { bits, values })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step(&self) -> f64 {
        2.0 * PI / self.len() as f64
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Index of `theta` if it is exactly a codebook value.
    pub fn index_of(&self, theta: f64) -> Option<usize> {
        let i = self.nearest_index(theta);
        (self.values[i] == theta).then_some(i)
    }

    pub fn contains(&self, theta: f64) -> bool {
        self.index_of(theta).is_some()
    }

    /// Nearest codebook entry by plain absolute difference; ties go to the
    /// smaller value.
    pub fn nearest_index(&self, theta: f64) -> usize {
        let n = self.values.len();
        let pos = (theta + PI) / self.step() - 1.0;
        if !pos.is_finite() {
            return if theta > 0.0 { n - 1 } else { 0 };
        }
        let lo = pos.floor().clamp(0.0, (n - 1) as f64) as usize;
        let hi = (lo + 1).min(n - 1);
        // The float index estimate can be off by one near grid points.
        let start = lo.saturating_sub(1);
        let end = (hi + 1).min(n - 1);
        let mut best = start;
        let mut best_dist = (theta - self.values[start]).abs();
        for i in start + 1..=end {
            let d = (theta - self.values[i]).abs();
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        best
    }

    pub fn quantize_phase(&self, theta: f64) -> f64 {
        self.values[self.nearest_index(theta)]
    }
}

/// Phases (radians) of the `M` phase shifters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseVector(pub Vec<f64>);

impl PhaseVector {
    pub fn new(phases: Vec<f64>) -> Self {
        Self(phases)
    }

    pub fn zeros(antennas: usize) -> Self {
        Self(vec![0.0; antennas])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn quantize(&self, codebook: &PhaseCodebook) -> PhaseVector {
        PhaseVector(self.0.iter().map(|&t| codebook.quantize_phase(t)).collect())
    }

    pub fn is_quantized(&self, codebook: &PhaseCodebook) -> bool {
        self.0.iter().all(|&t| codebook.contains(t))
    }

    pub fn to_combiner(&self) -> Combiner {
        Combiner::from_phases(self)
    }

    /// Codebook indices of a quantized vector.
    pub fn indices(&self, codebook: &PhaseCodebook) -> Option<Vec<usize>> {
        self.0.iter().map(|&t| codebook.index_of(t)).collect()
    }
}

/// Element-wise quantization of a phase vector onto the codebook.
pub fn quantize(pv: &PhaseVector, codebook: &PhaseCodebook) -> PhaseVector {
    pv.quantize(codebook)
}

/// Analog combining vector `w`, one constant-modulus weight per antenna.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Combiner(Vec<Complex64>);

impl Combiner {
    pub fn from_phases(pv: &PhaseVector) -> Self {
        let scale = 1.0 / (pv.len() as f64).sqrt();
        Self(
            pv.0.iter()
                .map(|&t| Complex64::from_polar(scale, t))
                .collect(),
        )
    }

    /// Wraps arbitrary weights; used for matched filters and oracles where the
    /// constant-modulus constraint does not apply.
    pub fn from_weights(weights: Vec<Complex64>) -> Self {
        Self(weights)
    }

    pub fn weights(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `w^H v`.
    pub fn inner(&self, v: &[Complex64]) -> Complex64 {
        self.0.iter().zip(v).map(|(w, x)| w.conj() * x).sum()
    }

    /// `|w^H v|²`.
    pub fn gain(&self, v: &[Complex64]) -> f64 {
        self.inner(v).norm_sqr()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|w| w.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn phases(&self) -> PhaseVector {
        PhaseVector(self.0.iter().map(|w| wrap_phase(w.arg())).collect())
    }
}

pub fn to_combiner(pv: &PhaseVector) -> Combiner {
    Combiner::from_phases(pv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub antennas: usize,
    /// Element spacing in wavelengths.
    #[serde(default = "default_spacing")]
    pub spacing: f64,
}

fn default_spacing() -> f64 {
    0.5
}

impl ArrayGeometry {
    pub fn ula(antennas: usize) -> Result<Self> {
        Self::new(antennas, 0.5)
    }

    pub fn new(antennas: usize, spacing: f64) -> Result<Self> {
        let g = Self { antennas, spacing };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 {
            return Err(Error::invalid("array needs at least one antenna"));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::invalid(format!(
                "element spacing must be positive, got {}",
                self.spacing
            )));
        }
        Ok(())
    }

    /// ULA response; elevation only scales the projected aperture and is zero
    /// (broadside) everywhere in this crate.
    pub fn response(&self, azimuth: f64, elevation: f64) -> Vec<Complex64> {
        let progression = 2.0 * PI * self.spacing * azimuth.sin() * elevation.cos();
        (0..self.antennas)
            .map(|m| Complex64::from_polar(1.0, progression * m as f64))
            .collect()
    }
}

pub fn array_response(g: &ArrayGeometry, azimuth: f64, elevation: f64) -> Vec<Complex64> {
    g.response(azimuth, elevation)
}

/// `|w^H a(φ)|²` at every angle.
pub fn beam_pattern(w: &Combiner, angles: &[f64], g: &ArrayGeometry) -> Vec<f64> {
    angles
        .iter()
        .map(|&phi| w.gain(&g.response(phi, 0.0)))
        .collect()
}

/// Inclusive uniform grid over `[-90°, 90°]` in radians.
pub fn angle_grid(resolution_deg: f64) -> Result<Vec<f64>> {
    if !(resolution_deg > 0.0 && resolution_deg <= 90.0) {
        return Err(Error::invalid(format!(
            "angle grid resolution must be in (0, 90] degrees, got {resolution_deg}"
        )));
    }
    let steps = (180.0 / resolution_deg).round() as usize;
    Ok((0..=steps)
        .map(|i| (-90.0 + 180.0 * i as f64 / steps as f64).to_radians())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sidelobe {
    pub angle: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidelobeSearch {
    /// Strongest first.
    pub peaks: Vec<Sidelobe>,
    /// Set when fewer than the requested number of sidelobes exist.
    pub incomplete: bool,
}

/// The `count` strongest sidelobes of a pattern sampled on `angles`.
///
/// The main lobe is the contiguous region around the global maximum down to
/// half of its power; local maxima inside it are never reported.
pub fn find_sidelobe_peaks(
    angles: &[f64],
    pattern: &[f64],
    count: usize,
) -> Result<SidelobeSearch> {
    if angles.len() != pattern.len() {
        return Err(Error::Shape(format!(
            "{} angles but {} pattern samples",
            angles.len(),
            pattern.len()
        )));
    }
    if count == 0 {
        return Err(Error::invalid("sidelobe count must be at least 1"));
    }
    let n = pattern.len();
    if n < 3 {
        return Ok(SidelobeSearch {
            peaks: Vec::new(),
            incomplete: true,
        });
    }

    let (peak_idx, &peak) =
        pattern.iter().enumerate().fold(
            (0, &pattern[0]),
            |acc, (i, g)| if *g > *acc.1 { (i, g) } else { acc },
        );
    let half = 0.5 * peak;
    let mut lo = peak_idx;
    while lo > 0 && pattern[lo - 1] >= half {
        lo -= 1;
    }
    let mut hi = peak_idx;
    while hi + 1 < n && pattern[hi + 1] >= half {
        hi += 1;
    }

    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if i >= lo && i <= hi {
            i = hi + 1;
            continue;
        }
        if pattern[i] > pattern[i - 1] {
            // Walk across plateaus so a flat top counts once.
            let mut j = i;
            while j + 1 < n && pattern[j + 1] == pattern[i] {
                j += 1;
            }
            if j + 1 < n && pattern[j + 1] < pattern[i] && !(j >= lo && i <= hi) {
                let mid = (i + j) / 2;
                peaks.push(Sidelobe {
                    angle: angles[mid],
                    gain: pattern[mid],
                });
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks.sort_by(|a, b| b.gain.total_cmp(&a.gain));
    let incomplete = peaks.len() < count;
    peaks.truncate(count);
    Ok(SidelobeSearch { peaks, incomplete })
}

/// Approximate half-power beamwidth (radians) of a half-wavelength ULA.
pub fn hpbw(antennas: usize) -> Result<f64> {
    if antennas < 2 {
        return Err(Error::invalid(format!(
            "half-power beamwidth needs at least 2 antennas, got {antennas}"
        )));
    }
    Ok(1.78 / antennas as f64)
}

pub fn gain_db(gain: f64) -> f64 {
    10.0 * gain.log10()
}

pub fn write_pattern_csv<W: Write>(
    mut out: W,
    angles: &[f64],
    gains: &[f64],
) -> std::io::Result<()> {
    writeln!(out, "angle_deg,gain_linear,gain_db")?;
    for (a, g) in angles.iter().zip(gains) {
        writeln!(out, "{},{},{}", a.to_degrees(), g, gain_db(*g).max(-200.0))?;
    }
    Ok(())
}

/// Parses the `angle_deg,gain_linear,gain_db` format back into radians and
/// linear gains.
pub fn read_pattern_csv<R: BufRead>(input: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut angles = Vec::new();
    let mut gains = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Csv(e.to_string()))?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Csv(format!("line {}: malformed row", lineno + 1)))
        };
        angles.push(parse(cols.next())?.to_radians());
        gains.push(parse(cols.next())?);
    }
    Ok((angles, gains))
}
