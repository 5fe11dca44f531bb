//! Scattering-point radar return models.
//!
//! Every moving reflector contributes `|X| * exp(j * 4*pi * R(t) / lambda)`
//! to the received quadrature signal; a human target is the sum of a
//! respiration scatterer, a heartbeat scatterer and any number of limb
//! scatterers.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Carrier frequency of the reference CW radar, Hz.
pub const CARRIER_HZ: f64 = 24.17e9;

/// Carrier wavelength `c / 24.17 GHz` (about 12.4 mm).
pub fn default_wavelength() -> f64 {
    SPEED_OF_LIGHT / CARRIER_HZ
}

/// Radial range of one scattering point over time, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeTrace {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl RangeTrace {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(invalid(format!("sample rate must be positive, got {sample_rate}")));
        }
        if samples.is_empty() {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        if samples.iter().any(|r| !r.is_finite()) {
            return Err(invalid("range trace contains non-finite values"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Trace evaluated from a closure of time (seconds) at `n` samples.
    pub fn from_fn(n: usize, sample_rate: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let samples = (0..n).map(|k| f(k as f64 / sample_rate)).collect();
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A point reflector: linear magnitude plus its range trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Scatterer {
    pub amplitude: f64,
    pub trace: RangeTrace,
}

impl Scatterer {
    pub fn new(amplitude: f64, trace: RangeTrace) -> Result<Self> {
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(invalid(format!("scatterer amplitude must be >= 0, got {amplitude}")));
        }
        Ok(Self { amplitude, trace })
    }
}

/// Uniformly sampled complex baseband (I + jQ) signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexBaseband {
    samples: Vec<Complex64>,
    sample_rate: f64,
}

impl ComplexBaseband {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(invalid(format!("sample rate must be positive, got {sample_rate}")));
        }
        if samples.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(invalid("baseband signal contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Build from separate in-phase and quadrature traces.
    pub fn from_iq(i: &[f64], q: &[f64], sample_rate: f64) -> Result<Self> {
        if i.len() != q.len() {
            return Err(Error::LengthMismatch(format!(
                "I has {} samples, Q has {}",
                i.len(),
                q.len()
            )));
        }
        let samples = i.iter().zip(q).map(|(&a, &b)| Complex64::new(a, b)).collect();
        Self::new(samples, sample_rate)
    }

    pub fn zeros(n: usize, sample_rate: f64) -> Result<Self> {
        Self::new(vec![Complex64::new(0.0, 0.0); n], sample_rate)
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn i_samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|z| z.re)
    }

    pub fn q_samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|z| z.im)
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Mean power `E[|x|^2]`.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    /// Complex sample mean and variance `E[|x - mu|^2]`.
    pub fn mean_and_variance(&self) -> (Complex64, f64) {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<Complex64>() / n;
        let var = self.samples.iter().map(|z| (z - mean).norm_sqr()).sum::<f64>() / n;
        (mean, var)
    }

    /// Every sample multiplied by a real gain.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|z| z * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Copy with the sample vector truncated or zero-padded to `n`.
    pub fn resized(&self, n: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(n, Complex64::new(0.0, 0.0));
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn from_parts_unchecked(samples: Vec<Complex64>, sample_rate: f64) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }
}

/// Parameters of the respiration + heartbeat displacement model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitalSignParams {
    /// Respiration rate, Hz.
    pub resp_rate: f64,
    /// Peak chest displacement due to respiration, m.
    pub resp_amplitude: f64,
    /// Heart rate, Hz.
    pub heart_rate: f64,
    /// Peak displacement due to the heartbeat, m.
    pub heart_amplitude: f64,
    pub resp_magnitude: f64,
    pub heart_magnitude: f64,
    /// Carrier wavelength, m.
    pub wavelength: f64,
}

impl Default for VitalSignParams {
    fn default() -> Self {
        Self {
            resp_rate: 0.3,
            resp_amplitude: 4e-3,
            heart_rate: 1.2,
            heart_amplitude: 0.3e-3,
            resp_magnitude: 1.0,
            heart_magnitude: 0.1,
            wavelength: default_wavelength(),
        }
    }
}

impl VitalSignParams {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.resp_rate,
            self.resp_amplitude,
            self.heart_rate,
            self.heart_amplitude,
            self.resp_magnitude,
            self.heart_magnitude,
            self.wavelength,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(invalid("vital sign parameters must be finite"));
        }
        if !(self.resp_rate > 0.0 && self.resp_rate < self.heart_rate) {
            return Err(invalid(format!(
                "need 0 < resp_rate < heart_rate, got {} and {}",
                self.resp_rate, self.heart_rate
            )));
        }
        if self.resp_amplitude < 0.0 || self.heart_amplitude < 0.0 {
            return Err(invalid("displacement amplitudes must be >= 0"));
        }
        if self.resp_magnitude < 0.0 || self.heart_magnitude < 0.0 {
            return Err(invalid("scatterer magnitudes must be >= 0"));
        }
        if self.wavelength <= 0.0 {
            return Err(invalid("wavelength must be positive"));
        }
        Ok(())
    }
}

/// Uniform sampling ranges for randomized vital-sign parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitalSignRanges {
    pub resp_rate: (f64, f64),
    pub resp_amplitude: (f64, f64),
    pub heart_rate: (f64, f64),
    pub heart_amplitude: (f64, f64),
    pub resp_magnitude: f64,
    pub heart_magnitude: f64,
    pub wavelength: f64,
}

impl Default for VitalSignRanges {
    fn default() -> Self {
        Self {
            resp_rate: (0.15, 0.45),
            resp_amplitude: (2e-3, 6e-3),
            heart_rate: (0.9, 1.6),
            heart_amplitude: (0.1e-3, 0.5e-3),
            resp_magnitude: 1.0,
            heart_magnitude: 0.1,
            wavelength: default_wavelength(),
        }
    }
}

impl VitalSignRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("resp_rate", self.resp_rate),
            ("resp_amplitude", self.resp_amplitude),
            ("heart_rate", self.heart_rate),
            ("heart_amplitude", self.heart_amplitude),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return Err(invalid(format!("bad {name} range [{lo}, {hi}]")));
            }
        }
        if self.resp_rate.1 >= self.heart_rate.0 {
            return Err(invalid("respiration range must lie below the heart-rate range"));
        }
        if self.resp_rate.0 <= 0.0 {
            return Err(invalid("respiration rate must be positive"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> VitalSignParams {
        let mut draw = |(lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        VitalSignParams {
            resp_rate: draw(self.resp_rate),
            resp_amplitude: draw(self.resp_amplitude),
            heart_rate: draw(self.heart_rate),
            heart_amplitude: draw(self.heart_amplitude),
            resp_magnitude: self.resp_magnitude,
            heart_magnitude: self.heart_magnitude,
            wavelength: self.wavelength,
        }
    }
}

/// `amplitude * exp(j 4 pi R(t) / lambda)` for every trace sample.
pub fn scatterer_return(s: &Scatterer, wavelength: f64, sample_rate: f64) -> Result<ComplexBaseband> {
    if !(wavelength > 0.0 && wavelength.is_finite()) {
        return Err(invalid(format!("wavelength must be positive, got {wavelength}")));
    }
    if s.trace.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    if (s.trace.sample_rate() - sample_rate).abs() > 1e-9 * sample_rate {
        return Err(invalid(format!(
            "trace sampled at {} Hz, requested {} Hz",
            s.trace.sample_rate(),
            sample_rate
        )));
    }
    let k = 4.0 * PI / wavelength;
    let samples = s
        .trace
        .samples()
        .iter()
        .map(|&r| Complex64::from_polar(s.amplitude, k * r))
        .collect();
    ComplexBaseband::new(samples, sample_rate)
}

/// Respiration plus heartbeat return with sinusoidal chest displacement and
/// random initial phases.
pub fn synth_vitals(
    p: &VitalSignParams,
    sample_rate: f64,
    duration: f64,
    rng: &mut impl Rng,
) -> Result<ComplexBaseband> {
    p.validate()?;
    if !(sample_rate > 0.0 && duration > 0.0) {
        return Err(invalid("sample rate and duration must be positive"));
    }
    let n = (duration * sample_rate).round() as usize;
    if n < 1 {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let phase_b = rng.random_range(0.0..2.0 * PI);
    let phase_h = rng.random_range(0.0..2.0 * PI);
    let breath = RangeTrace::from_fn(n, sample_rate, |t| {
        p.resp_amplitude * (2.0 * PI * p.resp_rate * t + phase_b).sin()
    })?;
    let heart = RangeTrace::from_fn(n, sample_rate, |t| {
        p.heart_amplitude * (2.0 * PI * p.heart_rate * t + phase_h).sin()
    })?;
    let parts = [
        scatterer_return(&Scatterer::new(p.resp_magnitude, breath)?, p.wavelength, sample_rate)?,
        scatterer_return(&Scatterer::new(p.heart_magnitude, heart)?, p.wavelength, sample_rate)?,
    ];
    sum_components(&parts)
}

/// Elementwise sum of equally sampled signals.
pub fn sum_components(parts: &[ComplexBaseband]) -> Result<ComplexBaseband> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("sum of zero components"))?;
    let n = first.len();
    let fs = first.sample_rate();
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    for p in parts {
        if p.len() != n {
            return Err(Error::LengthMismatch(format!(
                "component has {} samples, expected {n}",
                p.len()
            )));
        }
        if (p.sample_rate() - fs).abs() > 1e-9 * fs {
            return Err(invalid(format!(
                "component sampled at {} Hz, expected {fs} Hz",
                p.sample_rate()
            )));
        }
        for (a, b) in acc.iter_mut().zip(p.samples()) {
            *a += b;
        }
    }
    Ok(ComplexBaseband::from_parts_unchecked(acc, fs))
}

/// Zero-mean, unit-variance copy, variance taken over the complex samples.
pub fn normalize_power(x: &ComplexBaseband) -> Result<ComplexBaseband> {
    if x.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: x.len(),
        });
    }
    let (mean, var) = x.mean_and_variance();
    let scale = x.mean_power().max(f64::MIN_POSITIVE);
    if !(var > 1e-20 * scale) {
        return Err(Error::Degenerate(
            "cannot normalize a constant (zero-variance) signal".into(),
        ));
    }
    let inv = 1.0 / var.sqrt();
    let samples = x.samples().iter().map(|z| (z - mean) * inv).collect();
    Ok(ComplexBaseband::from_parts_unchecked(samples, x.sample_rate()))
}
