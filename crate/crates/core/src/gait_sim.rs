//! Walking-in-place interference simulator.
//!
//! The feet of a subject walking without net forward motion are modelled
//! as point scatterers on a parametric gait cycle, rendered into a
//! range-time map and integrated over range to give the single-channel
//! signal a CW radar would record.
//!
//! **This is a stand-in for the Boulic biomechanical walking model.** The
//! kinematics are deliberately simple and fully specified:
//!
//! * cycle duration `D = cycle_scale / relative_velocity` (default scale 0.5 s);
//! * each foot is stationary for the first `stance_fraction` (60 %) of its
//!   cycle;
//! * during swing the foot moves along the walking axis with a raised-cosine
//!   excursion of length `stride_factor * height * relative_velocity` (float
//!   forward, then back), so its velocity is a positive half-sine followed by
//!   a negative half-sine and is continuous at the stance boundaries;
//! * vertical lift is a half-sine of height `lift_factor * height * relative_velocity`;
//! * the right foot runs half a cycle behind the left.
//!
//! The walking axis points at the radar, which maximizes the micro-Doppler
//! excursion of the swing bursts.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::SeedTree;
use crate::signal_model::{default_wavelength, ComplexBaseband, RangeTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limb {
    LeftFoot,
    RightFoot,
}

impl Limb {
    /// Cycle offset relative to the left foot.
    fn phase_offset(self) -> f64 {
        match self {
            Limb::LeftFoot => 0.0,
            Limb::RightFoot => 0.5,
        }
    }

    /// Lateral position as a fraction of height.
    fn lateral(self) -> f64 {
        match self {
            Limb::LeftFoot => -0.05,
            Limb::RightFoot => 0.05,
        }
    }
}

/// Shape parameters of the parametric gait.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitShape {
    pub cycle_scale: f64,
    pub stance_fraction: f64,
    pub stride_factor: f64,
    pub lift_factor: f64,
    /// Hip height as a fraction of body height.
    pub hip_factor: f64,
}

impl Default for GaitShape {
    fn default() -> Self {
        Self {
            cycle_scale: 0.5,
            stance_fraction: 0.6,
            stride_factor: 0.4,
            lift_factor: 0.1,
            hip_factor: 0.53,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitConfig {
    /// Body height, m.
    pub height: f64,
    /// Walking speed in body heights per second.
    pub relative_velocity: f64,
    /// Signal duration, s.
    pub duration: f64,
    pub sample_rate: f64,
    pub wavelength: f64,
    pub radar_location: [f64; 3],
    pub range_resolution: f64,
    pub limbs: Vec<Limb>,
    pub forward_motion: bool,
    /// Linear magnitude of each foot scatterer.
    pub foot_amplitude: f64,
    pub shape: GaitShape,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            height: 1.5,
            relative_velocity: 0.6,
            duration: 11.0,
            sample_rate: 100.0,
            wavelength: default_wavelength(),
            radar_location: [0.0, 10.0, 0.0],
            range_resolution: 0.01,
            limbs: vec![Limb::LeftFoot, Limb::RightFoot],
            forward_motion: false,
            foot_amplitude: 1.0,
            shape: GaitShape::default(),
        }
    }
}

impl GaitConfig {
    /// Checks the sampled parameters against the simulation table ranges.
    pub fn validate(&self) -> Result<()> {
        if !(1.2..1.8).contains(&self.height) {
            return Err(invalid(format!("height {} outside [1.2, 1.8)", self.height)));
        }
        if !(0.2..1.0).contains(&self.relative_velocity) {
            return Err(invalid(format!(
                "relative velocity {} outside [0.2, 1.0)",
                self.relative_velocity
            )));
        }
        self.validate_common()
    }

    /// Checks everything except the height/velocity table ranges.
    fn validate_common(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.sample_rate > 0.0) {
            return Err(invalid("duration and sample rate must be positive"));
        }
        if !(self.range_resolution > 0.0) {
            return Err(invalid("range resolution must be positive"));
        }
        if !(self.wavelength > 0.0) {
            return Err(invalid("wavelength must be positive"));
        }
        if self.limbs.is_empty() {
            return Err(invalid("limb set is empty"));
        }
        if self.forward_motion {
            return Err(invalid("forward motion is not supported; walking in place only"));
        }
        if !(self.height > 0.0 && self.relative_velocity > 0.0) {
            return Err(invalid("height and relative velocity must be positive"));
        }
        let s = &self.shape;
        if !(s.cycle_scale > 0.0 && s.stance_fraction > 0.0 && s.stance_fraction < 1.0) {
            return Err(invalid("gait shape needs cycle_scale > 0 and 0 < stance_fraction < 1"));
        }
        if !(self.foot_amplitude >= 0.0) {
            return Err(invalid("foot amplitude must be >= 0"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    /// Gait cycle duration, s.
    pub fn cycle_duration(&self) -> f64 {
        self.shape.cycle_scale / self.relative_velocity
    }

    pub fn body_reference(&self) -> [f64; 3] {
        [0.0, 0.0, self.shape.hip_factor * self.height]
    }

    pub fn body_distance(&self) -> f64 {
        distance(self.radar_location, self.body_reference())
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Position of one foot as a function of time.
#[derive(Debug, Clone, Copy)]
pub struct FootKinematics {
    limb: Limb,
    cycle: f64,
    start_phase: f64,
    stance: f64,
    stride: f64,
    lift: f64,
    lateral: f64,
    forward_dir: [f64; 2],
}

impl FootKinematics {
    /// `start_phase` is the left-foot cycle phase at `t = 0`, in cycles.
    pub fn new(cfg: &GaitConfig, limb: Limb, start_phase: f64) -> Self {
        let s = &cfg.shape;
        let scale = cfg.height * cfg.relative_velocity;
        // Horizontal unit vector from the body towards the radar.
        let dx = cfg.radar_location[0];
        let dy = cfg.radar_location[1];
        let norm = (dx * dx + dy * dy).sqrt();
        let forward_dir = if norm > 0.0 { [dx / norm, dy / norm] } else { [0.0, 1.0] };
        Self {
            limb,
            cycle: cfg.cycle_duration(),
            start_phase,
            stance: s.stance_fraction,
            stride: s.stride_factor * scale,
            lift: s.lift_factor * scale,
            lateral: limb.lateral() * cfg.height,
            forward_dir,
        }
    }

    pub fn limb(&self) -> Limb {
        self.limb
    }

    /// Cycle phase in [0, 1).
    pub fn phase(&self, t: f64) -> f64 {
        (t / self.cycle + self.start_phase + self.limb.phase_offset()).rem_euclid(1.0)
    }

    pub fn in_stance(&self, t: f64) -> bool {
        self.phase(t) < self.stance
    }

    /// Cartesian foot position, m.
    pub fn position(&self, t: f64) -> [f64; 3] {
        let u = self.phase(t);
        let (along, up) = if u < self.stance {
            (0.0, 0.0)
        } else {
            let s = (u - self.stance) / (1.0 - self.stance);
            (
                self.stride * 0.5 * (1.0 - (2.0 * PI * s).cos()),
                self.lift * (PI * s).sin(),
            )
        };
        let along = along - 0.5 * self.stride;
        let [fx, fy] = self.forward_dir;
        // Lateral axis is perpendicular to the walking axis.
        [
            fx * along - fy * self.lateral,
            fy * along + fx * self.lateral,
            up,
        ]
    }
}

/// Complex range-time map, rows are range bins.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeTimeMap {
    bins: Vec<Complex64>,
    n_bins: usize,
    n_times: usize,
    pub range_resolution: f64,
    pub sample_rate: f64,
    pub min_range: f64,
}

impl RangeTimeMap {
    pub fn new(n_bins: usize, n_times: usize, range_resolution: f64, sample_rate: f64, min_range: f64) -> Self {
        Self {
            bins: vec![Complex64::new(0.0, 0.0); n_bins * n_times],
            n_bins,
            n_times,
            range_resolution,
            sample_rate,
            min_range,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn get(&self, bin: usize, t: usize) -> Complex64 {
        self.bins[bin * self.n_times + t]
    }

    pub fn row(&self, bin: usize) -> &[Complex64] {
        &self.bins[bin * self.n_times..(bin + 1) * self.n_times]
    }

    fn add(&mut self, bin: usize, t: usize, v: Complex64) {
        self.bins[bin * self.n_times + t] += v;
    }

    /// Range bin holding range `r`, if inside the map.
    pub fn bin_of(&self, r: f64) -> Option<usize> {
        let b = ((r - self.min_range) / self.range_resolution).floor();
        (b >= 0.0 && (b as usize) < self.n_bins).then_some(b as usize)
    }
}

/// One radial range trace per configured limb.
pub fn limb_range_traces(cfg: &GaitConfig, rng: &mut impl Rng) -> Result<Vec<(Limb, RangeTrace)>> {
    cfg.validate_common()?;
    let start_phase: f64 = rng.random_range(0.0..1.0);
    let n = cfg.n_samples();
    let mut limbs = cfg.limbs.clone();
    limbs.sort();
    limbs.dedup();
    limbs
        .into_iter()
        .map(|limb| {
            let foot = FootKinematics::new(cfg, limb, start_phase);
            let trace = RangeTrace::from_fn(n, cfg.sample_rate, |t| {
                distance(cfg.radar_location, foot.position(t))
            })?;
            Ok((limb, trace))
        })
        .collect()
}

/// Deposits every scatterer's return into its range bin.
pub fn range_time_map(
    traces: &[(Limb, RangeTrace)],
    amplitudes: &[f64],
    cfg: &GaitConfig,
) -> Result<RangeTimeMap> {
    if traces.len() != amplitudes.len() {
        return Err(Error::LengthMismatch(format!(
            "{} traces but {} amplitudes",
            traces.len(),
            amplitudes.len()
        )));
    }
    let n_times = traces.first().map_or(0, |(_, t)| t.len());
    if traces.iter().any(|(_, t)| t.len() != n_times) {
        return Err(Error::LengthMismatch("traces differ in length".into()));
    }
    let min_range = cfg.body_distance() - cfg.height;
    let n_bins = (2.0 * cfg.height / cfg.range_resolution).ceil() as usize + 1;
    let mut map = RangeTimeMap::new(n_bins, n_times, cfg.range_resolution, cfg.sample_rate, min_range);
    let k = 4.0 * PI / cfg.wavelength;
    for ((limb, trace), &amp) in traces.iter().zip(amplitudes) {
        for (t, &r) in trace.samples().iter().enumerate() {
            let bin = map.bin_of(r).ok_or_else(|| {
                invalid(format!(
                    "{limb:?} at range {r:.3} m leaves the map [{:.3}, {:.3})",
                    min_range,
                    min_range + n_bins as f64 * cfg.range_resolution
                ))
            })?;
            map.add(bin, t, Complex64::from_polar(amp, k * r));
        }
    }
    Ok(map)
}

/// Sum over all range bins, as seen by a CW radar.
pub fn integrate_ranges(map: &RangeTimeMap) -> Result<ComplexBaseband> {
    if map.n_bins() == 0 || map.n_times() == 0 {
        return Err(invalid("empty range-time map"));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); map.n_times()];
    for b in 0..map.n_bins() {
        for (o, v) in out.iter_mut().zip(map.row(b)) {
            *o += v;
        }
    }
    ComplexBaseband::new(out, map.sample_rate)
}

/// Full single-signal simulation: traces, map, range integration.
pub fn simulate(cfg: &GaitConfig, rng: &mut impl Rng) -> Result<ComplexBaseband> {
    let traces = limb_range_traces(cfg, rng)?;
    let amps = vec![cfg.foot_amplitude; traces.len()];
    let map = range_time_map(&traces, &amps, cfg)?;
    integrate_ranges(&map)
}

/// Uniform sampling ranges for the per-signal body parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitRanges {
    pub height: (f64, f64),
    pub relative_velocity: (f64, f64),
}

impl Default for GaitRanges {
    fn default() -> Self {
        Self {
            height: (1.2, 1.8),
            relative_velocity: (0.2, 1.0),
        }
    }
}

impl GaitRanges {
    pub fn validate(&self) -> Result<()> {
        let (h0, h1) = self.height;
        let (v0, v1) = self.relative_velocity;
        if !(1.2 <= h0 && h0 < h1 && h1 <= 1.8) {
            return Err(invalid(format!("height range [{h0}, {h1}) not inside [1.2, 1.8)")));
        }
        if !(0.2 <= v0 && v0 < v1 && v1 <= 1.0) {
            return Err(invalid(format!(
                "relative velocity range [{v0}, {v1}) not inside [0.2, 1.0)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceSample {
    pub height: f64,
    pub relative_velocity: f64,
    pub signal: ComplexBaseband,
}

/// `n` interference signals with body parameters drawn uniformly from
/// `ranges`, one derived random stream per index.
pub fn generate_interference_dataset(
    n: usize,
    ranges: &GaitRanges,
    base: &GaitConfig,
    seed: u64,
) -> Result<Vec<InterferenceSample>> {
    if n == 0 {
        return Err(invalid("interference dataset needs at least one sample"));
    }
    ranges.validate()?;
    let tree = SeedTree::new(seed);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree.rng("gait", i as u64);
            let mut cfg = base.clone();
            cfg.height = rng.random_range(ranges.height.0..ranges.height.1);
            cfg.relative_velocity = rng.random_range(ranges.relative_velocity.0..ranges.relative_velocity.1);
            cfg.validate()?;
            let signal = simulate(&cfg, &mut rng)?;
            Ok(InterferenceSample {
                height: cfg.height,
                relative_velocity: cfg.relative_velocity,
                signal,
            })
        })
        .collect()
}
