//! Time-frequency analysis and the deterministic signal plumbing around it:
//! Blackman-windowed STFT, segment selection, FIR decimation, SIR scaling
//! and additive noise.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal_model::ComplexBaseband;

/// Frames in one network-sized segment.
pub const SEGMENT_FRAMES: usize = 128;

/// Symmetric three-term Blackman window (a0 = 0.42, a1 = 0.5, a2 = 0.08).
pub fn blackman_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(invalid(format!("Blackman window needs n >= 2, got {n}")));
    }
    let m = (n - 1) as f64;
    Ok((0..n)
        .map(|k| {
            let x = 2.0 * PI * k as f64 / m;
            0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
        })
        .collect())
}

/// Symmetric Hamming window.
pub fn hamming_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let m = (n - 1) as f64;
    (0..n)
        .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / m).cos())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Blackman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftParams {
    pub window_len: usize,
    pub overlap: usize,
    pub nfft: usize,
    pub window_kind: WindowKind,
}

impl Default for StftParams {
    /// 200 ms Blackman window with 120 ms overlap and 128 bins at 100 Hz.
    fn default() -> Self {
        Self {
            window_len: 20,
            overlap: 12,
            nfft: 128,
            window_kind: WindowKind::Blackman,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.overlap && self.overlap < self.window_len && self.window_len <= self.nfft) {
            return Err(invalid(format!(
                "STFT needs 0 < overlap < window_len <= nfft, got {}/{}/{}",
                self.overlap, self.window_len, self.nfft
            )));
        }
        if !self.nfft.is_multiple_of(2) {
            return Err(invalid("nfft must be even"));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.window_len - self.overlap
    }

    /// Frames produced from `n_samples`: one per complete hop cell.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.window_len {
            0
        } else {
            n_samples / self.hop()
        }
    }

    /// Samples spanned by `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        frames * self.hop()
    }

    /// First sample under the window of frame `f`; may be negative at the
    /// leading edge, where the signal is zero-padded.
    pub fn frame_start(&self, f: usize) -> isize {
        (f * self.hop() + self.hop() / 2) as isize - (self.window_len / 2) as isize
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window_kind {
            WindowKind::Blackman => blackman_window(self.window_len).expect("validated window length"),
        }
    }
}

/// Complex STFT, row-major `nfft x n_frames`, DC at row `nfft / 2`.
///
/// Frame `f` owns the hop cell `[f * hop, (f + 1) * hop)` and its window is
/// centred on the middle of that cell, so `F` frames cover exactly `F * hop`
/// samples. Window taps outside the signal read zeros. The phase of each
/// frame is referenced to the window centre, so summing a column over all
/// bins gives `nfft * w[window_len / 2] * x[f * hop + hop / 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stft {
    values: Vec<Complex64>,
    n_frames: usize,
    pub params: StftParams,
    pub frame_rate: f64,
}

impl Stft {
    pub fn n_bins(&self) -> usize {
        self.params.nfft
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.values[bin * self.n_frames + frame]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Row index of zero Doppler.
    pub fn dc_row(&self) -> usize {
        self.params.nfft / 2
    }
}

/// Complex frequency x time block, row-major `n_bins x n_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct StftSegment {
    values: Vec<Complex64>,
    n_bins: usize,
    n_frames: usize,
    pub origin_frame: usize,
}

impl StftSegment {
    pub fn new(values: Vec<Complex64>, n_bins: usize, n_frames: usize, origin_frame: usize) -> Result<Self> {
        if values.len() != n_bins * n_frames {
            return Err(Error::ShapeMismatch {
                expected: vec![n_bins, n_frames],
                got: vec![values.len()],
            });
        }
        Ok(Self {
            values,
            n_bins,
            n_frames,
            origin_frame,
        })
    }

    pub fn zeros(n_bins: usize, n_frames: usize) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); n_bins * n_frames],
            n_bins,
            n_frames,
            origin_frame: 0,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_bins, self.n_frames)
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.values[bin * self.n_frames + frame]
    }

    pub fn set(&mut self, bin: usize, frame: usize, v: Complex64) {
        self.values[bin * self.n_frames + frame] = v;
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn max_magnitude(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            values: self.values.iter().map(|z| z * gain).collect(),
            ..*self
        }
    }

    pub fn add(&self, other: &StftSegment) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.n_bins, self.n_frames],
                got: vec![other.n_bins, other.n_frames],
            });
        }
        Ok(Self {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            ..*self
        })
    }

    /// Two real planes `[re, im]`, each row-major `n_bins x n_frames`.
    pub fn to_planes(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.values.len());
        out.extend(self.values.iter().map(|z| z.re));
        out.extend(self.values.iter().map(|z| z.im));
        out
    }

    pub fn from_planes(planes: &[f64], n_bins: usize, n_frames: usize, origin_frame: usize) -> Result<Self> {
        let n = n_bins * n_frames;
        if planes.len() != 2 * n {
            return Err(Error::ShapeMismatch {
                expected: vec![2, n_bins, n_frames],
                got: vec![planes.len()],
            });
        }
        let values = (0..n).map(|k| Complex64::new(planes[k], planes[n + k])).collect();
        Self::new(values, n_bins, n_frames, origin_frame)
    }

    /// Mean over non-overlapping `factor x factor` blocks.
    pub fn pooled(&self, factor: usize) -> Result<Self> {
        self.pooled_by(factor, factor)
    }

    /// Mean pooling over `bin_factor` bins by `frame_factor` frames.
    pub fn pooled_by(&self, bin_factor: usize, frame_factor: usize) -> Result<Self> {
        let ok = |n: usize, f: usize| f > 0 && n.is_multiple_of(f);
        if !ok(self.n_bins, bin_factor) || !ok(self.n_frames, frame_factor) {
            return Err(invalid(format!(
                "{}x{} segment cannot be pooled by {bin_factor}x{frame_factor}",
                self.n_bins, self.n_frames
            )));
        }
        if bin_factor == 1 && frame_factor == 1 {
            return Ok(self.clone());
        }
        let (nb, nf) = (self.n_bins / bin_factor, self.n_frames / frame_factor);
        let norm = 1.0 / (bin_factor * frame_factor) as f64;
        let mut out = vec![Complex64::new(0.0, 0.0); nb * nf];
        for b in 0..self.n_bins {
            for f in 0..self.n_frames {
                out[(b / bin_factor) * nf + f / frame_factor] += self.get(b, f);
            }
        }
        out.iter_mut().for_each(|z| *z *= norm);
        Self::new(out, nb, nf, self.origin_frame)
    }

    /// The `n` rows around DC; DC stays at row `n / 2`.
    pub fn central_bins(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_bins || !n.is_multiple_of(2) && n != self.n_bins {
            return Err(invalid(format!("cannot keep {n} of {} bins", self.n_bins)));
        }
        if n == self.n_bins {
            return Ok(self.clone());
        }
        let lo = self.n_bins / 2 - n / 2;
        let values = self.values[lo * self.n_frames..(lo + n) * self.n_frames].to_vec();
        Self::new(values, n, self.n_frames, self.origin_frame)
    }
}

/// Short-time Fourier transform over the whole signal.
pub fn stft(x: &ComplexBaseband, p: &StftParams) -> Result<Stft> {
    p.validate()?;
    if x.len() < p.window_len {
        return Err(Error::TooShort {
            needed: p.window_len,
            got: x.len(),
        });
    }
    let window = p.window();
    let n_frames = p.n_frames(x.len());
    let nfft = p.nfft;
    let centre = p.window_len / 2;
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let samples = x.samples();
    let frames: Vec<Vec<Complex64>> = (0..n_frames)
        .into_par_iter()
        .map(|f| {
            let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
            let start = p.frame_start(f);
            for (k, w) in window.iter().enumerate() {
                let i = start + k as isize;
                if i >= 0 && (i as usize) < samples.len() {
                    buf[(k + nfft - centre) % nfft] = samples[i as usize] * *w;
                }
            }
            fft.process(&mut buf);
            buf
        })
        .collect();
    let half = nfft / 2;
    let mut values = vec![Complex64::new(0.0, 0.0); nfft * n_frames];
    for (f, spec) in frames.iter().enumerate() {
        for row in 0..nfft {
            values[row * n_frames + f] = spec[(row + half) % nfft];
        }
    }
    Ok(Stft {
        values,
        n_frames,
        params: *p,
        frame_rate: x.sample_rate() / p.hop() as f64,
    })
}

/// Contiguous block of `frames` columns starting at `origin`.
pub fn segment_at(s: &Stft, origin: usize, frames: usize) -> Result<StftSegment> {
    if origin + frames > s.n_frames() || frames == 0 {
        return Err(Error::TooShort {
            needed: origin + frames.max(1),
            got: s.n_frames(),
        });
    }
    let nb = s.n_bins();
    let mut values = Vec::with_capacity(nb * frames);
    for b in 0..nb {
        let row = &s.values[b * s.n_frames..(b + 1) * s.n_frames];
        values.extend_from_slice(&row[origin..origin + frames]);
    }
    StftSegment::new(values, nb, frames, origin)
}

/// Block of `frames` columns at a uniformly random valid start.
pub fn random_segment(s: &Stft, frames: usize, rng: &mut impl Rng) -> Result<StftSegment> {
    if frames == 0 || s.n_frames() < frames {
        return Err(Error::TooShort {
            needed: frames,
            got: s.n_frames(),
        });
    }
    let origin = rng.random_range(0..=s.n_frames() - frames);
    segment_at(s, origin, frames)
}

/// Hamming-windowed sinc low-pass with unity DC gain.
///
/// `cutoff` is in cycles per sample.
pub fn lowpass_taps(n_taps: usize, cutoff: f64) -> Vec<f64> {
    let window = hamming_window(n_taps);
    let centre = (n_taps - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = window
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let x = k as f64 - centre;
            let sinc = if x == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * x).sin() / (PI * x)
            };
            w * sinc
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Anti-alias filter and keep every `M`-th sample, `M = fs / out_rate`.
///
/// The filter has `30 M + 1` taps, cutoff `0.4 out_rate` and zero group
/// delay; the signal is edge-extended so constants pass unchanged.
pub fn fir_decimate(x: &ComplexBaseband, out_rate: f64) -> Result<ComplexBaseband> {
    if !(out_rate > 0.0) {
        return Err(invalid("output rate must be positive"));
    }
    let ratio = x.sample_rate() / out_rate;
    let m = ratio.round();
    if m < 1.0 || (ratio - m).abs() > 1e-9 * ratio {
        return Err(invalid(format!(
            "input rate {} Hz is not an integer multiple of {out_rate} Hz",
            x.sample_rate()
        )));
    }
    let m = m as usize;
    if x.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let n_taps = 30 * m + 1;
    let taps = lowpass_taps(n_taps, 0.8 * (out_rate / 2.0) / x.sample_rate());
    let half = (n_taps / 2) as isize;
    let s = x.samples();
    let last = s.len() as isize - 1;
    let at = |i: isize| s[i.clamp(0, last) as usize];
    let out: Vec<Complex64> = (0..s.len())
        .step_by(m)
        .map(|n| {
            taps.iter()
                .enumerate()
                .map(|(k, h)| at(n as isize + half - k as isize) * *h)
                .sum()
        })
        .collect();
    ComplexBaseband::new(out, out_rate)
}

/// Interference gain that sets `10 log10(P_vital / P_interf) = sir_db`
/// for unit-power inputs.
pub fn sir_gain(sir_db: f64) -> f64 {
    10f64.powf(-sir_db / 20.0)
}

/// Scales power-normalized interference to the requested SIR.
pub fn scale_to_sir(
    vital: &ComplexBaseband,
    interference: &ComplexBaseband,
    sir_db: f64,
) -> Result<ComplexBaseband> {
    if !sir_db.is_finite() {
        return Err(invalid("SIR must be finite"));
    }
    for (name, x) in [("vital", vital), ("interference", interference)] {
        let (_, var) = x.mean_and_variance();
        if !((var - 1.0).abs() <= 0.01) {
            return Err(invalid(format!(
                "{name} signal is not power-normalized (variance {var:.4})"
            )));
        }
    }
    Ok(interference.scaled(sir_gain(sir_db)))
}

/// Adds independent `N(0, sigma^2)` noise to I and Q.
pub fn add_gaussian_noise(x: &ComplexBaseband, sigma: f64, rng: &mut impl Rng) -> Result<ComplexBaseband> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let samples = x
        .samples()
        .iter()
        .map(|z| {
            let i: f64 = StandardNormal.sample(rng);
            let q: f64 = StandardNormal.sample(rng);
            z + Complex64::new(sigma * i, sigma * q)
        })
        .collect();
    ComplexBaseband::new(samples, x.sample_rate())
}

/// Column sums: `d[t] = sum over bins of seg[bin, t]`.
pub fn doppler_integrate(seg: &StftSegment) -> Vec<Complex64> {
    let mut d = vec![Complex64::new(0.0, 0.0); seg.n_frames()];
    for b in 0..seg.n_bins() {
        for (t, acc) in d.iter_mut().enumerate() {
            *acc += seg.get(b, t);
        }
    }
    d
}
