//! Respiration-bin error and the SIR x noise sweep harness.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, StftSegment};
use crate::error::{invalid, Error, Result};
use crate::pipeline::{self, Dataset, Split};
use crate::seed::SeedTree;
use crate::vaenet::loss::mse;
use crate::vaenet::{infer, Checkpoint, InferMode};

/// Floor applied before the natural log in exported grids.
pub const LOG_FLOOR: f64 = 1e-3;

/// Offset of the dominant spectral peak from DC, in bins.
///
/// The spectrum is ordered with DC at `len / 2`; ties go to the lowest
/// shifted index.
pub fn peak_bin(x: &[Complex64]) -> Result<usize> {
    let n = x.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let mut buf = x.to_vec();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let dc = n / 2;
    let mut best = 0;
    let mut best_mag = f64::NEG_INFINITY;
    for k in 0..n {
        let m = buf[(k + n - dc) % n].norm_sqr();
        if m > best_mag {
            best_mag = m;
            best = k;
        }
    }
    Ok(best.abs_diff(dc))
}

/// `|peak_bin(d) - peak_bin(r)|`.
pub fn bin_error(d: &[Complex64], r: &[Complex64]) -> Result<usize> {
    Ok(peak_bin(d)?.abs_diff(peak_bin(r)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ReconLoss,
    BinErrorClean,
    BinErrorMixture,
    BinErrorProcessed,
}

impl MetricKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            MetricKind::ReconLoss => "recon_loss",
            MetricKind::BinErrorClean => "bin_error_clean",
            MetricKind::BinErrorMixture => "bin_error_mixture",
            MetricKind::BinErrorProcessed => "bin_error_processed",
        }
    }
}

/// Mean metric per (sigma, sir) cell; `cells[i][j]` is `sigma_values[i]`,
/// `sir_values[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub sir_values: Vec<f64>,
    pub sigma_values: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
    pub metric: MetricKind,
    pub n_samples: usize,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.sigma_values.len() || self.cells.iter().any(|r| r.len() != self.sir_values.len()) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.sigma_values.len(), self.sir_values.len()],
                got: vec![self.cells.len(), self.cells.first().map_or(0, Vec::len)],
            });
        }
        if self.cells.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("grid has non-finite cells".into()));
        }
        Ok(())
    }

    pub fn get(&self, sigma_idx: usize, sir_idx: usize) -> f64 {
        self.cells[sigma_idx][sir_idx]
    }

    pub fn row(&self, sigma_idx: usize) -> &[f64] {
        &self.cells[sigma_idx]
    }

    pub fn column(&self, sir_idx: usize) -> Vec<f64> {
        self.cells.iter().map(|r| r[sir_idx]).collect()
    }

    /// Cell values as displayed: optionally `ln(max(v, LOG_FLOOR))`.
    pub fn display_cells(&self, log_scale: bool) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|r| r.iter().map(|&v| if log_scale { v.max(LOG_FLOOR).ln() } else { v }).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub sir_values: Vec<f64>,
    pub sigma_values: Vec<f64>,
    pub mode: InferMode,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sir_values: (0..10).map(|k| -(k as f64)).collect(),
            sigma_values: (0..10).map(|k| k as f64 * 0.05).collect(),
            mode: InferMode::Sample,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sir_values.is_empty() || self.sigma_values.is_empty() {
            return Err(invalid("sweep grids must be non-empty"));
        }
        if self.sir_values.iter().any(|v| !v.is_finite()) || self.sigma_values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("sweep values must be finite and sigma >= 0"));
        }
        Ok(())
    }
}

/// One re-synthesized validation pair at a given cell.
struct CellPair {
    mixture: StftSegment,
    clean: StftSegment,
    noisy_clean: StftSegment,
}

fn resynthesize(ds: &Dataset, k: usize, sir_db: f64, sigma: f64, tree: &SeedTree) -> Result<CellPair> {
    let rec = &ds.manifest.records[k];
    let vital = ds.vital_source(rec.vital_id)?;
    let interference = ds.interference_source(rec.interference_id)?;
    // The same noise stream per pair in every cell, so cells differ only by
    // their SIR and sigma.
    let mut rng = tree.rng("noise", k as u64);
    let v = pipeline::synth_views(&vital, &interference, sir_db, sigma, rec.origin_frame, &ds.manifest.segment, &mut rng)?;
    let inv = 1.0 / v.norm_scale;
    Ok(CellPair {
        mixture: v.mixture.scaled(inv),
        clean: v.clean.scaled(inv),
        noisy_clean: v.noisy_clean.scaled(inv),
    })
}

fn check_inputs(ckpt: &Checkpoint, ds: &Dataset, cfg: &SweepConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let [c, b, f] = ds.manifest.image_shape();
    if (c, b, f) != ckpt.network.input_size {
        let n = ckpt.network.input_size;
        return Err(Error::ShapeMismatch { expected: vec![n.0, n.1, n.2], got: vec![c, b, f] });
    }
    let idx = ds.indices(Split::Val);
    if idx.is_empty() {
        return Err(invalid("dataset has no validation pairs"));
    }
    Ok(idx)
}

/// Runs `f` for every (sigma, sir, pair) triple and averages per cell.
fn sweep_cells<const M: usize, F>(idx: &[usize], cfg: &SweepConfig, f: F) -> Result<[Vec<Vec<f64>>; M]>
where
    F: Fn(usize, f64, f64) -> Result<[f64; M]> + Sync,
{
    let (ns, nr) = (cfg.sigma_values.len(), cfg.sir_values.len());
    let jobs: Vec<(usize, usize, usize)> = (0..ns)
        .flat_map(|i| (0..nr).flat_map(move |j| idx.iter().map(move |&k| (i, j, k))))
        .collect();
    let values: Vec<[f64; M]> = jobs
        .par_iter()
        .map(|&(i, j, k)| f(k, cfg.sir_values[j], cfg.sigma_values[i]))
        .collect::<Result<_>>()?;
    let mut out: [Vec<Vec<f64>>; M] = std::array::from_fn(|_| vec![vec![0.0; nr]; ns]);
    for (&(i, j, _), v) in jobs.iter().zip(&values) {
        for m in 0..M {
            out[m][i][j] += v[m];
        }
    }
    let n = idx.len() as f64;
    for grid in &mut out {
        grid.iter_mut().flatten().for_each(|c| *c /= n);
    }
    Ok(out)
}

fn as_f32_planes(seg: &StftSegment) -> Vec<f64> {
    seg.to_planes().into_iter().map(|v| v as f32 as f64).collect()
}

/// Mean reconstruction loss of the network output against the clean target,
/// per (sigma, sir) cell, over the whole validation split.
pub fn recon_sweep(ckpt: &Checkpoint, ds: &Dataset, cfg: &SweepConfig) -> Result<SweepGrid> {
    let idx = check_inputs(ckpt, ds, cfg)?;
    let tree = SeedTree::new(cfg.seed);
    let [cells] = sweep_cells(&idx, cfg, |k, sir, sigma| {
        let p = resynthesize(ds, k, sir, sigma, &tree)?;
        let est = infer(ckpt, &p.mixture, cfg.mode, None, &mut tree.rng("latent", k as u64))?;
        Ok([mse(&est.to_planes(), &as_f32_planes(&p.clean))?])
    })?;
    Ok(SweepGrid {
        sir_values: cfg.sir_values.clone(),
        sigma_values: cfg.sigma_values.clone(),
        cells,
        metric: MetricKind::ReconLoss,
        n_samples: idx.len(),
    })
}

/// Bin-error components of one pair: `[clean, mixture, processed]`.
pub fn pair_bin_errors(
    ckpt: &Checkpoint,
    mixture: &StftSegment,
    noisy_clean: &StftSegment,
    reference: &StftSegment,
    mode: InferMode,
    rng: &mut impl rand::Rng,
) -> Result<[usize; 3]> {
    let est = infer(ckpt, mixture, mode, None, rng)?;
    let r = dsp::doppler_integrate(reference);
    Ok([
        bin_error(&dsp::doppler_integrate(noisy_clean), &r)?,
        bin_error(&dsp::doppler_integrate(mixture), &r)?,
        bin_error(&dsp::doppler_integrate(&est), &r)?,
    ])
}

/// Mean bin error of the noisy clean, noisy mixture and processed mixture
/// against the noise-free clean segment. Returns `[clean, mixture, processed]`.
pub fn bin_error_sweep(ckpt: &Checkpoint, ds: &Dataset, cfg: &SweepConfig) -> Result<[SweepGrid; 3]> {
    let idx = check_inputs(ckpt, ds, cfg)?;
    let tree = SeedTree::new(cfg.seed);
    let cells = sweep_cells(&idx, cfg, |k, sir, sigma| {
        let p = resynthesize(ds, k, sir, sigma, &tree)?;
        let e = pair_bin_errors(ckpt, &p.mixture, &p.noisy_clean, &p.clean, cfg.mode, &mut tree.rng("latent", k as u64))?;
        Ok(e.map(|v| v as f64))
    })?;
    let kinds = [MetricKind::BinErrorClean, MetricKind::BinErrorMixture, MetricKind::BinErrorProcessed];
    let mut it = cells.into_iter();
    Ok(kinds.map(|metric| SweepGrid {
        sir_values: cfg.sir_values.clone(),
        sigma_values: cfg.sigma_values.clone(),
        cells: it.next().expect("three grids"),
        metric,
        n_samples: idx.len(),
    }))
}

/// Min and max displayed value over several grids, for a shared colour scale.
pub fn shared_range(grids: &[&SweepGrid], log_scale: bool) -> Option<(f64, f64)> {
    let vals = grids.iter().flat_map(|g| g.display_cells(log_scale).into_iter().flatten());
    vals.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Pixel edge length of one cell in exported heatmaps.
pub const CELL_PIXELS: u32 = 16;

/// Writes `<stem>.csv` and `<stem>.png`; returns both paths.
///
/// The CSV's first row holds the SIR axis after a corner label, each
/// following row starts with its sigma value. The PNG maps `range` (or the
/// grid's own range) to black..white, sigma increasing downwards.
pub fn export_grid(grid: &SweepGrid, stem: &Path, log_scale: bool, range: Option<(f64, f64)>) -> Result<(PathBuf, PathBuf)> {
    grid.validate()?;
    let csv_path = stem.with_extension("csv");
    let png_path = stem.with_extension("png");
    if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        pipeline::create_dir(parent)?;
    }
    let shown = grid.display_cells(log_scale);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_io(&csv_path, e))?;
    let mut header = vec!["sigma\\sir_db".to_string()];
    header.extend(grid.sir_values.iter().map(|v| v.to_string()));
    w.write_record(&header).map_err(|e| csv_io(&csv_path, e))?;
    for (sigma, row) in grid.sigma_values.iter().zip(&shown) {
        let mut rec = vec![sigma.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_io(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let (lo, hi) = range.or_else(|| shared_range(&[grid], log_scale)).unwrap_or((0.0, 1.0));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (nr, nc) = (grid.sigma_values.len() as u32, grid.sir_values.len() as u32);
    let img = image::GrayImage::from_fn(nc * CELL_PIXELS, nr * CELL_PIXELS, |x, y| {
        let v = shown[(y / CELL_PIXELS) as usize][(x / CELL_PIXELS) as usize];
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        image::Luma([(t * 255.0).round() as u8])
    });
    img.save(&png_path)?;
    Ok((csv_path, png_path))
}

/// Dynamic range of magnitude images, dB below the common peak.
pub const MAGNITUDE_RANGE_DB: f64 = 40.0;

/// Writes segment magnitudes side by side as one greyscale PNG, on a shared
/// dB scale. Rows are Doppler bins with the highest bin at the top.
pub fn write_magnitude_panels(path: &Path, panels: &[&StftSegment]) -> Result<()> {
    let first = panels.first().ok_or_else(|| invalid("no panels to draw"))?;
    let (nb, nf) = first.shape();
    if panels.iter().any(|p| p.shape() != (nb, nf)) {
        return Err(invalid("panels differ in shape"));
    }
    let peak = panels.iter().map(|p| p.max_magnitude()).fold(0.0, f64::max);
    let gap = 2u32;
    let width = panels.len() as u32 * (nf as u32 + gap) - gap;
    let img = image::GrayImage::from_fn(width, nb as u32, |x, y| {
        let (panel, col) = ((x / (nf as u32 + gap)) as usize, (x % (nf as u32 + gap)) as usize);
        if col >= nf || peak <= 0.0 {
            return image::Luma([0]);
        }
        let m = panels[panel].get(nb - 1 - y as usize, col).norm() / peak;
        let db = 20.0 * m.max(1e-12).log10();
        let t = ((db + MAGNITUDE_RANGE_DB) / MAGNITUDE_RANGE_DB).clamp(0.0, 1.0);
        image::Luma([(t * 255.0).round() as u8])
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        pipeline::create_dir(parent)?;
    }
    img.save(path)?;
    Ok(())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Parse { path: path.to_path_buf(), line: e.position().map_or(0, |p| p.line()), message: e.to_string() }
}

/// `(sir_values, sigma_values, cells)` as read back from a grid CSV.
pub type GridTable = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

/// Parses a grid CSV written by [`export_grid`].
pub fn read_grid_csv(path: &Path) -> Result<GridTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let parse = |s: &str, line: u64| {
        s.trim().parse::<f64>().map_err(|e| Error::Parse { path: path.to_path_buf(), line, message: format!("{s:?}: {e}") })
    };
    let mut sir = Vec::new();
    let mut sigma = Vec::new();
    let mut cells = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = i as u64 + 1;
        let mut fields = rec.iter();
        let first = fields.next().unwrap_or_default();
        if i == 0 {
            sir = fields.map(|s| parse(s, line)).collect::<Result<_>>()?;
            continue;
        }
        sigma.push(parse(first, line)?);
        let row: Vec<f64> = fields.map(|s| parse(s, line)).collect::<Result<_>>()?;
        if row.len() != sir.len() {
            return Err(Error::Parse { path: path.to_path_buf(), line, message: "row length differs from header".into() });
        }
        cells.push(row);
    }
    Ok((sir, sigma, cells))
}
