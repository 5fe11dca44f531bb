//! Sample synthesis and the on-disk dataset container.
//!
//! A training pair is built by power-normalizing a vital-sign signal and an
//! interference signal, scaling the interference to a target SIR, summing,
//! adding noise to the mixture, taking the STFT of mixture and clean vital
//! signs with identical parameters and cropping the same frame window from
//! both. Segments are optionally mean-pooled (the desk-scale profile) and
//! divided by the mixture's peak magnitude.
//!
//! The container is a `manifest.json` plus raw little-endian `f32` blobs:
//! `mixtures.f32` and `cleans.f32` hold `[n, 2, bins, frames]` (real plane
//! then imaginary plane), `vitals.f32` and `interference.f32` hold the
//! source signals as `[n_sources, 2, samples]` so sweeps can re-synthesize
//! pairs at other SIR and noise levels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, StftParams, StftSegment, SEGMENT_FRAMES};
use crate::error::{invalid, Error, Result};
use crate::gait_sim::{self, GaitConfig, GaitRanges};
use crate::seed::{Rng as SeedRng, SeedTree};
use crate::signal_model::{self, normalize_power, ComplexBaseband, VitalSignRanges};

pub const CONTAINER_VERSION: u32 = 1;
pub const DTYPE_TAG: &str = "f32le";
pub const MANIFEST_FILE: &str = "manifest.json";

/// How a baseband signal becomes a network-sized STFT image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentSettings {
    pub stft: StftParams,
    /// Frames cropped from the full STFT.
    pub frames: usize,
    /// Doppler bins kept around DC (`nfft` keeps all).
    pub bins: usize,
    /// Mean-pooling factors over bins and frames (1 keeps full resolution).
    pub bin_pool: usize,
    pub frame_pool: usize,
}

impl Default for SegmentSettings {
    fn default() -> Self {
        Self::full()
    }
}

impl SegmentSettings {
    /// Full 128 x 128 image.
    pub fn full() -> Self {
        Self {
            stft: StftParams::default(),
            frames: SEGMENT_FRAMES,
            bins: StftParams::default().nfft,
            bin_pool: 1,
            frame_pool: 1,
        }
    }

    /// 128 x 128 image mean-pooled 4 x 4 down to 32 x 32; still spans 10.24 s.
    pub fn desk() -> Self {
        Self {
            bin_pool: 4,
            frame_pool: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.frames == 0 || self.bins == 0 || self.bin_pool == 0 || self.frame_pool == 0 {
            return Err(invalid("segment frames, bins and pool factors must be positive"));
        }
        if self.bins > self.stft.nfft || (self.bins != self.stft.nfft && !self.bins.is_multiple_of(2)) {
            return Err(invalid(format!("cannot keep {} of {} bins", self.bins, self.stft.nfft)));
        }
        if !self.frames.is_multiple_of(self.frame_pool) || !self.bins.is_multiple_of(self.bin_pool) {
            return Err(invalid(format!(
                "pool factors {}x{} must divide the {}x{} crop",
                self.bin_pool, self.frame_pool, self.bins, self.frames
            )));
        }
        Ok(())
    }

    /// `(bins, frames)` of the image handed to the network.
    pub fn image_shape(&self) -> (usize, usize) {
        (self.bins / self.bin_pool, self.frames / self.frame_pool)
    }

    fn image(&self, stft: &dsp::Stft, origin: usize) -> Result<StftSegment> {
        dsp::segment_at(stft, origin, self.frames)?
            .central_bins(self.bins)?
            .pooled_by(self.bin_pool, self.frame_pool)
    }
}

/// Training example: network input, target and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub mixture: StftSegment,
    pub clean: StftSegment,
    pub sir_db: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Mixture peak magnitude both segments were divided by.
    pub norm_scale: f64,
}

/// Every intermediate image of one synthesis, before peak scaling.
#[derive(Debug, Clone)]
pub struct SynthViews {
    pub mixture: StftSegment,
    pub clean: StftSegment,
    /// Clean vital signs plus the same noise realization as the mixture.
    pub noisy_clean: StftSegment,
    pub norm_scale: f64,
    pub origin_frame: usize,
}

fn check_lengths(vital: &ComplexBaseband, interference: &ComplexBaseband, s: &SegmentSettings) -> Result<usize> {
    let need = s.stft.samples_for_frames(s.frames);
    for x in [vital, interference] {
        if x.len() < need {
            return Err(Error::TooShort {
                needed: need,
                got: x.len(),
            });
        }
    }
    if (vital.sample_rate() - interference.sample_rate()).abs() > 1e-9 * vital.sample_rate() {
        return Err(invalid("vital and interference sample rates differ"));
    }
    let n_frames = s.stft.n_frames(vital.len()).min(s.stft.n_frames(interference.len()));
    Ok(n_frames - s.frames)
}

/// Largest valid crop origin for a vital/interference combination.
pub fn max_origin(vital: &ComplexBaseband, interference: &ComplexBaseband, s: &SegmentSettings) -> Result<usize> {
    s.validate()?;
    check_lengths(vital, interference, s)
}

/// Synthesis with an explicit crop origin; `noise_rng` feeds only the noise.
pub fn synth_views(
    vital: &ComplexBaseband,
    interference: &ComplexBaseband,
    sir_db: f64,
    noise_sigma: f64,
    origin: usize,
    settings: &SegmentSettings,
    noise_rng: &mut impl Rng,
) -> Result<SynthViews> {
    settings.validate()?;
    let last = check_lengths(vital, interference, settings)?;
    if origin > last {
        return Err(invalid(format!("crop origin {origin} beyond last valid frame {last}")));
    }
    let v = normalize_power(vital)?;
    let i = normalize_power(interference)?;
    let i = dsp::scale_to_sir(&v, &i, sir_db)?.resized(v.len());
    let mix = signal_model::sum_components(&[v.clone(), i])?;

    let noise = dsp::add_gaussian_noise(&ComplexBaseband::zeros(v.len(), v.sample_rate())?, noise_sigma, noise_rng)?;
    let noisy_mix = signal_model::sum_components(&[mix, noise.clone()])?;
    let noisy_clean = signal_model::sum_components(&[v.clone(), noise])?;

    let p = &settings.stft;
    let mixture = settings.image(&dsp::stft(&noisy_mix, p)?, origin)?;
    let clean = settings.image(&dsp::stft(&v, p)?, origin)?;
    let noisy_clean = settings.image(&dsp::stft(&noisy_clean, p)?, origin)?;
    let norm_scale = mixture.max_magnitude();
    if !(norm_scale > 0.0 && norm_scale.is_finite()) {
        return Err(Error::Degenerate("mixture segment has zero peak magnitude".into()));
    }
    Ok(SynthViews {
        mixture,
        clean,
        noisy_clean,
        norm_scale,
        origin_frame: origin,
    })
}

/// One training pair with a random crop.
pub fn synth_pair(
    vital: &ComplexBaseband,
    interference: &ComplexBaseband,
    sir_db: f64,
    noise_sigma: f64,
    settings: &SegmentSettings,
    seed: u64,
) -> Result<SamplePair> {
    let mut rng = crate::seed::rng_from_seed(seed);
    let last = max_origin(vital, interference, settings)?;
    let origin = rng.random_range(0..=last);
    let views = synth_views(vital, interference, sir_db, noise_sigma, origin, settings, &mut rng)?;
    Ok(views.into_pair(sir_db, noise_sigma, seed))
}

impl SynthViews {
    pub fn into_pair(self, sir_db: f64, noise_sigma: f64, seed: u64) -> SamplePair {
        let inv = 1.0 / self.norm_scale;
        SamplePair {
            mixture: self.mixture.scaled(inv),
            clean: self.clean.scaled(inv),
            sir_db,
            noise_sigma,
            seed,
            norm_scale: self.norm_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Everything that determines a synthesized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_pairs: usize,
    /// Size of the interference pool; `0` means one per pair.
    pub n_interference: usize,
    pub sir_range: (f64, f64),
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub sample_rate: f64,
    /// Vital-sign recording length, s.
    pub vital_duration: f64,
    pub vitals: VitalSignRanges,
    pub gait: GaitConfig,
    pub gait_ranges: GaitRanges,
    pub segment: SegmentSettings,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_pairs: 256,
            n_interference: 0,
            sir_range: (-9.0, 0.0),
            noise_sigma: 0.0,
            train_fraction: 0.75,
            sample_rate: 100.0,
            vital_duration: 11.24,
            vitals: VitalSignRanges::default(),
            gait: GaitConfig::default(),
            gait_ranges: GaitRanges::default(),
            segment: SegmentSettings::full(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs < 2 {
            return Err(invalid("a dataset needs at least 2 pairs"));
        }
        let (lo, hi) = self.sir_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid(format!("bad SIR range [{lo}, {hi}]")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid("noise sigma must be >= 0"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.vital_duration > 0.0 && self.sample_rate > 0.0) {
            return Err(invalid("vital duration and sample rate must be positive"));
        }
        if (self.gait.sample_rate - self.sample_rate).abs() > 1e-9 {
            return Err(invalid("gait sample rate must equal the dataset sample rate"));
        }
        self.vitals.validate()?;
        self.gait_ranges.validate()?;
        self.segment.validate()
    }

    /// `(train, val)` pair counts.
    pub fn split_counts(&self) -> (usize, usize) {
        let n_train = ((self.n_pairs as f64 * self.train_fraction).round() as usize).clamp(1, self.n_pairs - 1);
        (n_train, self.n_pairs - n_train)
    }

    fn pool_size(&self) -> usize {
        if self.n_interference == 0 {
            self.n_pairs
        } else {
            self.n_interference
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub split: Split,
    pub sir_db: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub vital_id: usize,
    pub interference_id: usize,
    pub origin_frame: usize,
    pub norm_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceRecord {
    pub height: f64,
    pub relative_velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub dtype: String,
    pub count: usize,
    pub seed: u64,
    pub sample_rate: f64,
    pub sir_range: (f64, f64),
    pub segment: SegmentSettings,
    pub mixtures: TensorEntry,
    pub cleans: TensorEntry,
    pub vitals: TensorEntry,
    pub interference: TensorEntry,
    pub interference_sources: Vec<InterferenceRecord>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// `[2, bins, frames]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let (b, f) = self.segment.image_shape();
        [2, b, f]
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONTAINER_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: CONTAINER_VERSION,
            });
        }
        if self.dtype != DTYPE_TAG {
            return Err(Error::Corrupt(format!("unsupported dtype {}", self.dtype)));
        }
        let [c, b, f] = self.image_shape();
        let expect = vec![self.count, c, b, f];
        for t in [&self.mixtures, &self.cleans] {
            if t.shape != expect {
                return Err(Error::Corrupt(format!(
                    "{} has shape {:?}, expected {:?}",
                    t.file, t.shape, expect
                )));
            }
        }
        if self.records.len() != self.count {
            return Err(Error::Corrupt(format!(
                "{} records for {} samples",
                self.records.len(),
                self.count
            )));
        }
        let nv = self.vitals.shape.first().copied().unwrap_or(0);
        let ni = self.interference.shape.first().copied().unwrap_or(0);
        if self.interference_sources.len() != ni {
            return Err(Error::Corrupt("interference metadata count mismatch".into()));
        }
        for (k, r) in self.records.iter().enumerate() {
            if r.index != k || r.vital_id >= nv || r.interference_id >= ni {
                return Err(Error::Corrupt(format!("record {k} is inconsistent")));
            }
        }
        Ok(())
    }
}

/// A dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    mixtures: Vec<f32>,
    cleans: Vec<f32>,
    vitals: Vec<f32>,
    interference: Vec<f32>,
}

/// A mini-batch of network-ready planes, `[batch, 2, bins, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
    pub shape: [usize; 4],
}

fn to_f32(values: &[f64]) -> impl Iterator<Item = f32> + '_ {
    values.iter().map(|&v| v as f32)
}

fn signal_planes(x: &ComplexBaseband) -> Vec<f32> {
    x.i_samples().chain(x.q_samples()).map(|v| v as f32).collect()
}

fn signal_from_planes(planes: &[f32], sample_rate: f64) -> Result<ComplexBaseband> {
    let n = planes.len() / 2;
    let samples = (0..n)
        .map(|k| Complex64::new(planes[k] as f64, planes[n + k] as f64))
        .collect();
    ComplexBaseband::new(samples, sample_rate)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    fn image_len(&self) -> usize {
        self.manifest.image_shape().iter().product()
    }

    pub fn mixture_planes(&self, k: usize) -> &[f32] {
        let n = self.image_len();
        &self.mixtures[k * n..(k + 1) * n]
    }

    pub fn clean_planes(&self, k: usize) -> &[f32] {
        let n = self.image_len();
        &self.cleans[k * n..(k + 1) * n]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.index)
            .collect()
    }

    pub fn vital_source(&self, id: usize) -> Result<ComplexBaseband> {
        let len: usize = self.manifest.vitals.shape[1..].iter().product();
        signal_from_planes(&self.vitals[id * len..(id + 1) * len], self.manifest.sample_rate)
    }

    pub fn interference_source(&self, id: usize) -> Result<ComplexBaseband> {
        let len: usize = self.manifest.interference.shape[1..].iter().product();
        signal_from_planes(&self.interference[id * len..(id + 1) * len], self.manifest.sample_rate)
    }

    /// The stored pair as complex segments.
    pub fn pair(&self, k: usize) -> Result<SamplePair> {
        let r = &self.manifest.records[k];
        let [_, b, f] = self.manifest.image_shape();
        let widen = |p: &[f32]| p.iter().map(|&v| v as f64).collect::<Vec<_>>();
        Ok(SamplePair {
            mixture: StftSegment::from_planes(&widen(self.mixture_planes(k)), b, f, r.origin_frame)?,
            clean: StftSegment::from_planes(&widen(self.clean_planes(k)), b, f, r.origin_frame)?,
            sir_db: r.sir_db,
            noise_sigma: r.noise_sigma,
            seed: r.seed,
            norm_scale: r.norm_scale,
        })
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let [c, b, f] = self.manifest.image_shape();
        let mut inputs = Vec::with_capacity(indices.len() * c * b * f);
        let mut targets = Vec::with_capacity(indices.len() * c * b * f);
        for &k in indices {
            inputs.extend_from_slice(self.mixture_planes(k));
            targets.extend_from_slice(self.clean_planes(k));
        }
        Batch {
            indices: indices.to_vec(),
            inputs,
            targets,
            shape: [indices.len(), c, b, f],
        }
    }

    /// Shuffled mini-batches of one split; the last batch may be short.
    pub fn batches(&self, split: Split, batch_size: usize, rng: &mut impl Rng) -> Vec<Batch> {
        let mut idx = self.indices(split);
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// Mini-batches in stored order.
    pub fn ordered_batches(&self, split: Split, batch_size: usize) -> Vec<Batch> {
        let idx = self.indices(split);
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }
}

/// Synthesizes the full dataset in memory.
pub fn synthesize_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    use rayon::prelude::*;

    cfg.validate()?;
    let tree = SeedTree::new(seed);
    let (n_train, _) = cfg.split_counts();
    let n_pool = cfg.pool_size();
    let pool = gait_sim::generate_interference_dataset(n_pool, &cfg.gait_ranges, &cfg.gait, tree.child("interference", 0).seed())?;
    // Interference pool split in the same proportion as the pairs so that
    // train and validation never share a source.
    let pool_train = ((n_pool as f64 * cfg.train_fraction).round() as usize).clamp(1, n_pool.max(2) - 1);
    if n_pool < 2 {
        return Err(invalid("interference pool needs at least 2 signals"));
    }

    let vitals: Vec<ComplexBaseband> = (0..cfg.n_pairs)
        .into_par_iter()
        .map(|k| {
            let mut rng: SeedRng = tree.rng("vital", k as u64);
            let p = cfg.vitals.sample(&mut rng);
            signal_model::synth_vitals(&p, cfg.sample_rate, cfg.vital_duration, &mut rng)
        })
        .collect::<Result<_>>()?;

    let results: Vec<(SampleRecord, SamplePair)> = (0..cfg.n_pairs)
        .into_par_iter()
        .map(|k| {
            let mut rng: SeedRng = tree.rng("pair", k as u64);
            let split = if k < n_train { Split::Train } else { Split::Val };
            let interference_id = match split {
                Split::Train => rng.random_range(0..pool_train),
                Split::Val => rng.random_range(pool_train..n_pool),
            };
            let (lo, hi) = cfg.sir_range;
            let sir_db = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let pair_seed: u64 = rng.random();
            let pair = synth_pair(
                &vitals[k],
                &pool[interference_id].signal,
                sir_db,
                cfg.noise_sigma,
                &cfg.segment,
                pair_seed,
            )?;
            let record = SampleRecord {
                index: k,
                split,
                sir_db,
                noise_sigma: cfg.noise_sigma,
                seed: pair_seed,
                vital_id: k,
                interference_id,
                origin_frame: pair.mixture.origin_frame,
                norm_scale: pair.norm_scale,
            };
            Ok((record, pair))
        })
        .collect::<Result<_>>()?;

    let (b, f) = cfg.segment.image_shape();
    let n = cfg.n_pairs;
    let mut mixtures = Vec::with_capacity(n * 2 * b * f);
    let mut cleans = Vec::with_capacity(n * 2 * b * f);
    let mut records = Vec::with_capacity(n);
    for (rec, pair) in results {
        mixtures.extend(to_f32(&pair.mixture.to_planes()));
        cleans.extend(to_f32(&pair.clean.to_planes()));
        records.push(rec);
    }
    let vital_len = vitals[0].len();
    let interf_len = pool[0].signal.len();
    let manifest = DatasetManifest {
        version: CONTAINER_VERSION,
        dtype: DTYPE_TAG.into(),
        count: n,
        seed,
        sample_rate: cfg.sample_rate,
        sir_range: cfg.sir_range,
        segment: cfg.segment,
        mixtures: TensorEntry {
            file: "mixtures.f32".into(),
            shape: vec![n, 2, b, f],
        },
        cleans: TensorEntry {
            file: "cleans.f32".into(),
            shape: vec![n, 2, b, f],
        },
        vitals: TensorEntry {
            file: "vitals.f32".into(),
            shape: vec![n, 2, vital_len],
        },
        interference: TensorEntry {
            file: "interference.f32".into(),
            shape: vec![n_pool, 2, interf_len],
        },
        interference_sources: pool
            .iter()
            .map(|s| InterferenceRecord {
                height: s.height,
                relative_velocity: s.relative_velocity,
            })
            .collect(),
        records,
    };
    Ok(Dataset {
        manifest,
        mixtures,
        cleans,
        vitals: vitals.iter().flat_map(signal_planes).collect(),
        interference: pool.iter().flat_map(|s| signal_planes(&s.signal)).collect(),
    })
}

/// Synthesizes and writes a dataset; returns its manifest.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let ds = synthesize_dataset(cfg, seed)?;
    write_dataset(&ds, dir)?;
    Ok(ds.manifest)
}

pub(crate) fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Corrupt(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let m = &ds.manifest;
    write_f32(&dir.join(&m.mixtures.file), &ds.mixtures)?;
    write_f32(&dir.join(&m.cleans.file), &ds.cleans)?;
    write_f32(&dir.join(&m.vitals.file), &ds.vitals)?;
    write_f32(&dir.join(&m.interference.file), &ds.interference)?;
    write_json(&dir.join(MANIFEST_FILE), m)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    m.validate()?;
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let load = |t: &TensorEntry| read_f32(&dir.join(&t.file), t.numel());
    Ok(Dataset {
        mixtures: load(&manifest.mixtures)?,
        cleans: load(&manifest.cleans)?,
        vitals: load(&manifest.vitals)?,
        interference: load(&manifest.interference)?,
        manifest,
    })
}

/// Reads an I/Q CSV and decimates it to 100 Hz.
///
/// Rows are `I,Q` or `t,I,Q`; a single non-numeric header line is skipped.
pub fn ingest_quadrature_recording(path: &Path, fs_in: f64) -> Result<ComplexBaseband> {
    if !(fs_in >= 100.0) {
        return Err(invalid(format!("input rate must be >= 100 Hz, got {fs_in}")));
    }
    let x = read_quadrature_csv(path, fs_in)?;
    dsp::fir_decimate(&x, 100.0)
}

/// Parses an I/Q CSV without resampling.
pub fn read_quadrature_csv(path: &Path, sample_rate: f64) -> Result<ComplexBaseband> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut i = Vec::new();
    let mut q = Vec::new();
    let mut width = None;
    for (row_no, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(row_no as u64 + 1, |p| p.line());
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let fields = match parsed {
            Ok(v) => v,
            Err(_) if row_no == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("non-numeric field: {e}"),
                })
            }
        };
        if fields.len() != 2 && fields.len() != 3 {
            return Err(Error::Parse {
                path: path.into(),
                line,
                message: format!("expected 2 (I,Q) or 3 (t,I,Q) columns, found {}", fields.len()),
            });
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("row has {} columns, earlier rows have {w}", fields.len()),
                })
            }
            _ => {}
        }
        let off = fields.len() - 2;
        i.push(fields[off]);
        q.push(fields[off + 1]);
    }
    if i.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 0,
            message: "no samples".into(),
        });
    }
    ComplexBaseband::from_iq(&i, &q, sample_rate)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: PathBuf::from(path),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Writes `t,I,Q` rows with a header.
pub fn write_signal_csv(path: &Path, x: &ComplexBaseband) -> Result<()> {
    let mut out = String::with_capacity(x.len() * 48);
    out.push_str("t,I,Q\n");
    for (k, z) in x.samples().iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", k as f64 / x.sample_rate(), z.re, z.im));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait_sim::simulate;
    use crate::seed::rng_from_seed;
    use crate::signal_model::{synth_vitals, VitalSignParams};

    fn sources(seed: u64) -> (ComplexBaseband, ComplexBaseband) {
        let mut rng = rng_from_seed(seed);
        let v = synth_vitals(&VitalSignParams::default(), 100.0, 11.24, &mut rng).unwrap();
        let i = simulate(&GaitConfig::default(), &mut rng).unwrap();
        (v, i)
    }

    fn small_cfg(n: usize) -> DatasetConfig {
        DatasetConfig {
            n_pairs: n,
            segment: SegmentSettings::desk(),
            ..Default::default()
        }
    }

    #[test]
    fn identical_signals_double_the_clean_image() {
        let (v, _) = sources(1);
        let views = synth_views(&v, &v, 0.0, 0.0, 3, &SegmentSettings::full(), &mut rng_from_seed(0)).unwrap();
        for (m, c) in views.mixture.values().iter().zip(views.clean.values()) {
            assert!((m - 2.0 * c).norm() < 1e-9);
        }
    }

    #[test]
    fn mixture_minus_clean_is_scaled_interference() {
        let (v, i) = sources(2);
        let s = SegmentSettings::full();
        let g = dsp::sir_gain(-6.0);
        let pair = synth_pair(&v, &i, -6.0, 0.0, &s, 77).unwrap();
        let origin = pair.mixture.origin_frame;
        let interf = normalize_power(&i).unwrap().scaled(g).resized(v.len());
        let expect = dsp::segment_at(&dsp::stft(&interf, &s.stft).unwrap(), origin, 128).unwrap();
        for k in 0..expect.values().len() {
            let diff = (pair.mixture.values()[k] - pair.clean.values()[k]) * pair.norm_scale;
            assert!((diff - expect.values()[k]).norm() < 1e-10);
        }
        assert_eq!(pair.mixture.shape(), (128, 128));
        assert!((pair.mixture.max_magnitude() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pair_is_deterministic_per_seed() {
        let (v, i) = sources(3);
        let s = SegmentSettings::desk();
        let a = synth_pair(&v, &i, -3.0, 0.2, &s, 5).unwrap();
        let b = synth_pair(&v, &i, -3.0, 0.2, &s, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mixture.shape(), (32, 32));
    }

    #[test]
    fn pair_rejects_short_inputs() {
        let (v, i) = sources(4);
        let short = v.resized(1000);
        assert!(synth_pair(&short, &i, 0.0, 0.0, &SegmentSettings::full(), 0).is_err());
        assert!(synth_pair(&v, &i.resized(900), 0.0, 0.0, &SegmentSettings::full(), 0).is_err());
        let flat = ComplexBaseband::new(vec![Complex64::new(1.0, 0.0); 1124], 100.0).unwrap();
        assert!(synth_pair(&flat, &i, 0.0, 0.0, &SegmentSettings::full(), 0).is_err());
    }

    #[test]
    fn split_counts_and_sir_range() {
        let cfg = small_cfg(256);
        assert_eq!(cfg.split_counts(), (192, 64));
        let ds = synthesize_dataset(&small_cfg(24), 9).unwrap();
        assert_eq!(ds.len(), 24);
        assert_eq!(ds.indices(Split::Train).len(), 18);
        assert_eq!(ds.indices(Split::Val).len(), 6);
        let train_sources: std::collections::HashSet<_> = ds
            .manifest
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.interference_id)
            .collect();
        for r in &ds.manifest.records {
            assert!((-9.0..=0.0).contains(&r.sir_db));
            if r.split == Split::Val {
                assert!(!train_sources.contains(&r.interference_id));
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&small_cfg(10), 4, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        let fresh = synthesize_dataset(&small_cfg(10), 4).unwrap();
        assert_eq!(ds.mixtures, fresh.mixtures);
        assert_eq!(ds.cleans, fresh.cleans);
        // write -> load -> write gives an identical manifest file
        let m1 = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir2.path()).unwrap();
        assert_eq!(m1, fs::read(dir2.path().join(MANIFEST_FILE)).unwrap());
        // sources survive with f32 precision
        let v = ds.vital_source(0).unwrap();
        assert_eq!(v.len(), 1124);
    }

    #[test]
    fn batching() {
        let ds = synthesize_dataset(&small_cfg(14), 1).unwrap();
        // 14 * 0.75 = 10.5 -> 11 train samples
        let sizes: Vec<_> = ds
            .batches(Split::Train, 4, &mut rng_from_seed(0))
            .iter()
            .map(|b| b.indices.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 3]);
        let a = ds.batches(Split::Train, 4, &mut rng_from_seed(3));
        let b = ds.batches(Split::Train, 4, &mut rng_from_seed(3));
        assert_eq!(a, b);
        assert_eq!(a[0].shape, [4, 2, 32, 32]);
        assert_eq!(a[0].inputs.len(), 4 * 2 * 32 * 32);
    }

    #[test]
    fn batch_sizes_over_ten_samples() {
        let mut cfg = small_cfg(14);
        cfg.train_fraction = 10.0 / 14.0;
        let ds = synthesize_dataset(&cfg, 2).unwrap();
        let sizes: Vec<_> = ds.ordered_batches(Split::Train, 4).iter().map(|b| b.indices.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&small_cfg(4), 4, dir.path()).unwrap();
        let blob = dir.path().join("mixtures.f32");
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Corrupt(_))));

        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"version\": 1", "\"version\": 7");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn invalid_dataset_configs() {
        assert!(small_cfg(1).validate().is_err());
        let mut c = small_cfg(8);
        c.train_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_cfg(8);
        c.segment.frame_pool = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ingest_passthrough_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.csv");
        let mut text = String::from("I,Q\n");
        for k in 0..200 {
            text.push_str(&format!("{},{}\n", (k as f64 * 0.1).cos(), (k as f64 * 0.1).sin()));
        }
        fs::write(&path, text).unwrap();
        let x = ingest_quadrature_recording(&path, 100.0).unwrap();
        assert_eq!(x.len(), 200);
        assert_eq!(x.sample_rate(), 100.0);
        assert!(ingest_quadrature_recording(&path, 50.0).is_err());
        assert!(ingest_quadrature_recording(&path, 150.0).is_err());
    }

    #[test]
    fn ingest_decimates_slow_tone() {
        use std::f64::consts::PI;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.csv");
        let fs_in = 1000.0;
        let n = 20_000;
        let mut text = String::new();
        for k in 0..n {
            let t = k as f64 / fs_in;
            let ph = 2.0 * PI * 0.3 * t;
            text.push_str(&format!("{t},{},{}\n", ph.cos(), ph.sin()));
        }
        fs::write(&path, text).unwrap();
        let x = ingest_quadrature_recording(&path, fs_in).unwrap();
        assert_eq!(x.len(), 2000);
        let acc: Complex64 = x.samples()[20..1980]
            .iter()
            .enumerate()
            .map(|(k, z)| z * Complex64::from_polar(1.0, -2.0 * PI * 0.3 * (k + 20) as f64 / 100.0))
            .sum();
        let db = 20.0 * (acc.norm() / 1960.0).log10();
        assert!(db.abs() < 0.5, "{db} dB");
    }

    #[test]
    fn ingest_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "0.1,0.2\n0.3,0.4\n0.5\n").unwrap();
        match read_quadrature_csv(&path, 100.0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let err = read_quadrature_csv(&path, 100.0).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}
