//! Ensemble forecast verification: VRMSE, fair CRPS, radial spectra and banded
//! spectral coherence.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::manifest::{join, Manifest};
use crate::tensor_io::{read_f64_with_shape, write_tensor, RawTensor};
use crate::wavelet::Wavelet;

/// Stabiliser in VRMSE and coherence.
pub const METRIC_EPS: f64 = 1e-6;

/// Pre-clamp coherence excursions above this are reported as diagnostics.
pub const COHERENCE_EXCURSION_TOL: f64 = 1e-9;

/// Provenance carried with a forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastMeta {
    pub seeds: Vec<u64>,
    pub euler_steps: usize,
    pub wavelet: Wavelet,
    pub levels: usize,
    /// 1-based rollout step at which each member failed, if it did.
    pub failures: Vec<Option<usize>>,
    pub model: String,
}

/// `M` generated trajectories of `T` frames, plus optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    members: Vec<Vec<Field>>,
    truth: Option<Vec<Field>>,
    meta: ForecastMeta,
    shape: (usize, usize, usize),
    steps: usize,
}

impl EnsembleForecast {
    pub fn new(
        members: Vec<Vec<Field>>,
        truth: Option<Vec<Field>>,
        meta: ForecastMeta,
        shape: (usize, usize, usize),
        steps: usize,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("forecast needs at least one member"));
        }
        if meta.seeds.len() != members.len() || meta.failures.len() != members.len() {
            return Err(Error::shape("forecast metadata does not match member count"));
        }
        let check = |frames: &[Field], what: &str| -> Result<()> {
            if frames.len() != steps {
                return Err(Error::shape(format!("{what} has {} frames, expected {steps}", frames.len())));
            }
            if let Some(f) = frames.iter().find(|f| f.shape() != shape) {
                return Err(Error::shape(format!("{what} frame {:?} differs from {shape:?}", f.shape())));
            }
            Ok(())
        };
        for (m, frames) in members.iter().enumerate() {
            check(frames, &format!("member {m}"))?;
        }
        if let Some(t) = &truth {
            check(t, "truth")?;
        }
        Ok(Self {
            members,
            truth,
            meta,
            shape,
            steps,
        })
    }

    pub fn members(&self) -> &[Vec<Field>] {
        &self.members
    }

    pub fn truth(&self) -> Option<&[Field]> {
        self.truth.as_deref()
    }

    pub fn meta(&self) -> &ForecastMeta {
        &self.meta
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn set_model(&mut self, model: impl Into<String>) {
        self.meta.model = model.into();
    }

    pub fn with_truth(mut self, truth: Vec<Field>) -> Result<Self> {
        self.truth = Some(truth);
        Self::new(self.members, self.truth, self.meta, self.shape, self.steps)
    }

    /// Ensemble-mean frame at lead index `t` (0-based).
    pub fn ensemble_mean(&self, t: usize) -> Field {
        let (c, h, w) = self.shape;
        // Running mean: exact when all members agree.
        let mut out = Field::zeros(c, h, w);
        for (k, m) in self.members.iter().enumerate() {
            let inv = 1.0 / (k + 1) as f64;
            for (o, v) in out.data_mut().iter_mut().zip(m[t].data()) {
                *o += (v - *o) * inv;
            }
        }
        out
    }

    /// Writes `forecast.wfmt`, `truth.wfmt` (when present) and `forecast.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (c, h, w) = self.shape;
        let data: Vec<f64> = self
            .members
            .iter()
            .flatten()
            .flat_map(|f| f.data().iter().copied())
            .collect();
        write_tensor(
            &dir.join("forecast.wfmt"),
            &RawTensor::f64(vec![self.members.len(), self.steps, c, h, w], data),
        )?;
        if let Some(truth) = &self.truth {
            let data: Vec<f64> = truth.iter().flat_map(|f| f.data().iter().copied()).collect();
            write_tensor(&dir.join("truth.wfmt"), &RawTensor::f64(vec![self.steps, c, h, w], data))?;
        }
        let mut m = Manifest::new();
        m.push("members", self.members.len());
        m.push("steps", self.steps);
        m.push("channels", c);
        m.push("height", h);
        m.push("width", w);
        m.push("euler_steps", self.meta.euler_steps);
        m.push("wavelet", self.meta.wavelet);
        m.push("levels", self.meta.levels);
        m.push("seeds", join(&self.meta.seeds));
        let failures: Vec<String> = self
            .meta
            .failures
            .iter()
            .map(|f| f.map_or_else(|| "none".to_string(), |s| s.to_string()))
            .collect();
        m.push("failures", failures.join(","));
        m.push("model", &self.meta.model);
        m.push("has_truth", self.truth.is_some());
        m.write(&dir.join("forecast.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join("forecast.txt"))?;
        let members: usize = m.require("members")?;
        let steps: usize = m.require("steps")?;
        let (c, h, w): (usize, usize, usize) = (m.require("channels")?, m.require("height")?, m.require("width")?);
        let wavelet: Wavelet = m.require("wavelet")?;
        let seeds: Vec<u64> = m.require_list("seeds")?;
        let failures = m
            .get("failures")
            .unwrap_or("")
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "none" => Ok(None),
                other => other
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::format(dir.join("forecast.txt"), format!("bad failure entry `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = ForecastMeta {
            seeds,
            euler_steps: m.require("euler_steps")?,
            wavelet,
            levels: m.require("levels")?,
            failures,
            model: m.get("model").unwrap_or("").to_string(),
        };
        let plane = c * h * w;
        let data = read_f64_with_shape(&dir.join("forecast.wfmt"), &[members, steps, c, h, w])?;
        let frames: Vec<Field> = if plane == 0 {
            Vec::new()
        } else {
            data.chunks(plane)
                .map(|chunk| Field::new(c, h, w, chunk.to_vec()))
                .collect::<Result<_>>()?
        };
        let member_frames: Vec<Vec<Field>> = if steps == 0 {
            vec![Vec::new(); members]
        } else {
            frames.chunks(steps).map(|s| s.to_vec()).collect()
        };
        let truth = if m.require::<bool>("has_truth")? {
            let data = read_f64_with_shape(&dir.join("truth.wfmt"), &[steps, c, h, w])?;
            Some(
                data.chunks(plane.max(1))
                    .map(|chunk| Field::new(c, h, w, chunk.to_vec()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Self::new(member_frames, truth, meta, (c, h, w), steps)
    }
}

fn spatial_mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `sqrt(<(u-v)^2> / (<(u-<u>)^2> + eps))` over one channel plane.
pub fn vrmse(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::shape(format!("vrmse of {} against {} values", u.len(), v.len())));
    }
    let mean = spatial_mean(u);
    let n = u.len() as f64;
    let var = u.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let mse = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok((mse / (var + METRIC_EPS)).sqrt())
}

/// Ferro's fair CRPS of an `M ≥ 2` member ensemble against `u`, averaged over pixels.
pub fn crps_fair(u: &[f64], members: &[&[f64]]) -> Result<f64> {
    let m = members.len();
    if m < 2 {
        return Err(Error::invalid(format!("fair CRPS needs at least 2 members, got {m}")));
    }
    if members.iter().any(|v| v.len() != u.len()) || u.is_empty() {
        return Err(Error::shape("ensemble member and truth sizes differ"));
    }
    let n = u.len() as f64;
    let skill: f64 = members
        .iter()
        .map(|v| v.iter().zip(u).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
        .sum::<f64>()
        / m as f64;
    let mut spread = 0.0;
    for i in 0..m {
        for k in i + 1..m {
            spread += members[i].iter().zip(members[k]).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        }
    }
    Ok(skill - spread / (m * (m - 1)) as f64)
}

/// Unnormalised forward 2-D DFT by direct summation along each axis.
pub fn dft2_direct(x: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    if x.len() != h * w {
        return Err(Error::shape(format!("{} values for a {h}x{w} plane", x.len())));
    }
    let twiddles = |n: usize| -> Vec<Complex64> {
        (0..n)
            .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 / n as f64))
            .collect()
    };
    let (tw, th) = (twiddles(w), twiddles(h));
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    for y in 0..h {
        for kx in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for xx in 0..w {
                acc += tw[(kx * xx) % w] * x[y * w + xx];
            }
            rows[y * w + kx] = acc;
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for ky in 0..h {
        for kx in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                acc += th[(ky * y) % h] * rows[y * w + kx];
            }
            out[ky * w + kx] = acc;
        }
    }
    Ok(out)
}

/// Same transform as [`dft2_direct`] through `rustfft`.
pub fn dft2_fast(x: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    if x.len() != h * w {
        return Err(Error::shape(format!("{} values for a {h}x{w} plane", x.len())));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut data: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for kx in 0..w {
        for y in 0..h {
            col[y] = data[y * w + kx];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + kx] = col[y];
        }
    }
    Ok(data)
}

fn signed_index(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Ring of each DFT bin, in units of the fundamental of the shorter side, or
/// `None` beyond the last full ring.
fn ring_map(h: usize, w: usize) -> Vec<Option<usize>> {
    let n = h.min(w) as f64;
    let rmax = h.min(w) / 2;
    let mut out = Vec::with_capacity(h * w);
    for ky in 0..h {
        for kx in 0..w {
            let fx = signed_index(kx, w) / w as f64;
            let fy = signed_index(ky, h) / h as f64;
            let r = (n * (fx * fx + fy * fy).sqrt()).round() as usize;
            out.push((r <= rmax).then_some(r));
        }
    }
    out
}

/// Azimuthally averaged quantity per integer ring `0..=min(H,W)/2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialSpectrum {
    /// Ring values; index 0 is the zero-frequency bin.
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    /// Wavenumber of each ring in cycles per pixel.
    pub k: Vec<f64>,
}

fn ring_k(h: usize, w: usize) -> Vec<f64> {
    let n = h.min(w);
    (0..=n / 2).map(|r| r as f64 / n as f64).collect()
}

fn ring_average(bins: impl Iterator<Item = f64>, h: usize, w: usize) -> RadialSpectrum {
    let rings = h.min(w) / 2 + 1;
    let mut values = vec![0.0; rings];
    let mut counts = vec![0usize; rings];
    for (v, r) in bins.zip(ring_map(h, w)) {
        if let Some(r) = r {
            values[r] += v;
            counts[r] += 1;
        }
    }
    for (v, &c) in values.iter_mut().zip(&counts) {
        if c > 0 {
            *v /= c as f64;
        }
    }
    RadialSpectrum {
        values,
        counts,
        k: ring_k(h, w),
    }
}

fn check_plane(h: usize, w: usize) -> Result<()> {
    if h < 4 || w < 4 {
        return Err(Error::shape(format!("spectra need at least 4x4 planes, got {h}x{w}")));
    }
    Ok(())
}

/// `|X(k)|^2` on every DFT bin.
pub fn power_spectrum_2d(x: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    Ok(dft2_fast(x, h, w)?.iter().map(|c| c.norm_sqr()).collect())
}

/// Isotropic power spectrum `P(k)`: ring mean of `|X|^2`.
pub fn radial_psd(x: &[f64], h: usize, w: usize) -> Result<RadialSpectrum> {
    check_plane(h, w)?;
    let p = power_spectrum_2d(x, h, w)?;
    Ok(ring_average(p.into_iter(), h, w))
}

/// `sqrt(a b)`, exact when `a == b`.
fn geometric_mean(a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        (a * b).sqrt()
    }
}

/// Spectral coherence `γ(k)` on rings `1..=min(H,W)/2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoherenceSpectrum {
    pub gamma: Vec<f64>,
    pub k: Vec<f64>,
    /// Largest pre-clamp amount by which any ring exceeded 1.
    pub max_excursion: f64,
}

pub fn coherence(u: &[f64], v: &[f64], h: usize, w: usize) -> Result<CoherenceSpectrum> {
    check_plane(h, w)?;
    if u.len() != v.len() {
        return Err(Error::shape(format!("coherence of {} against {} values", u.len(), v.len())));
    }
    let fu = dft2_fast(u, h, w)?;
    let fv = dft2_fast(v, h, w)?;
    let pu = ring_average(fu.iter().map(|c| c.norm_sqr()), h, w);
    let pv = ring_average(fv.iter().map(|c| c.norm_sqr()), h, w);
    let cuv = ring_average(fu.iter().zip(&fv).map(|(a, b)| geometric_mean(a.norm_sqr(), b.norm_sqr())), h, w);
    let mut gamma = Vec::with_capacity(pu.values.len() - 1);
    let mut max_excursion: f64 = 0.0;
    for r in 1..pu.values.len() {
        let g = (cuv.values[r] + METRIC_EPS) / (geometric_mean(pu.values[r], pv.values[r]) + METRIC_EPS);
        max_excursion = max_excursion.max(g - 1.0);
        gamma.push(g.clamp(0.0, 1.0));
    }
    Ok(CoherenceSpectrum {
        gamma,
        k: pu.k[1..].to_vec(),
        max_excursion: max_excursion.max(0.0),
    })
}

/// Radial-wavenumber band edges; band `i` holds rings with `edges[i] < k <= edges[i+1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandSpec {
    edges: Vec<f64>,
}

pub const BAND_LABELS: [&str; 3] = ["low", "mid", "high"];

impl BandSpec {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::invalid("band spec needs at least two edges"));
        }
        if edges[0] < 0.0 || edges.windows(2).any(|p| !(p[0] < p[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid(format!("band edges must be finite and strictly increasing: {edges:?}")));
        }
        Ok(Self { edges })
    }

    /// Three bands of equal width in `log k` spanning the positive rings of an `h x w` grid.
    pub fn log_spaced(h: usize, w: usize) -> Result<Self> {
        let n = h.min(w);
        if n < 4 {
            return Err(Error::shape(format!("grid {h}x{w} too small for spectral bands")));
        }
        let (kmin, kmax) = (1.0 / n as f64, 0.5);
        let ratio = kmax / kmin;
        Self::new(vec![
            0.0,
            kmin * ratio.powf(1.0 / 3.0),
            kmin * ratio.powf(2.0 / 3.0),
            kmax,
        ])
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn n_bands(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn label(&self, band: usize) -> String {
        if self.n_bands() == 3 {
            BAND_LABELS[band].to_string()
        } else {
            format!("band{band}")
        }
    }

    /// Which band `k` falls into, if any.
    pub fn band_of(&self, k: f64) -> Option<usize> {
        let tol = 1e-12;
        (0..self.n_bands()).find(|&i| k > self.edges[i] * (1.0 + tol) && k <= self.edges[i + 1] * (1.0 + tol))
    }
}

/// `sqrt(mean_{k in band} (1 - γ(k))^2)` for every band.
pub fn coherence_band_rmse(spectrum: &CoherenceSpectrum, bands: &BandSpec) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; bands.n_bands()];
    let mut counts = vec![0usize; bands.n_bands()];
    for (&g, &k) in spectrum.gamma.iter().zip(&spectrum.k) {
        if let Some(b) = bands.band_of(k) {
            sums[b] += (1.0 - g) * (1.0 - g);
            counts[b] += 1;
        }
    }
    if let Some(b) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("band {} contains no wavenumbers", bands.label(b))));
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| (s / c as f64).sqrt()).collect())
}

/// Inclusive 1-based lead-time window `a:b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start == 0 || end < start {
            return Err(Error::invalid(format!("invalid lead-time window {start}:{end}")));
        }
        Ok(Self { start, end })
    }

    pub fn tag(&self) -> String {
        format!("{:02}:{:02}", self.start, self.end)
    }

    /// Parses a comma-separated list such as `1:8,9:16`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                let (a, b) = p
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::invalid(format!("window `{p}` is not of the form a:b")))?;
                let parse = |x: &str| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::invalid(format!("window bound `{x}` is not an integer")))
                };
                Self::new(parse(a)?, parse(b)?)
            })
            .collect()
    }
}

/// How coherence is formed from an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum CoherenceMode {
    /// γ of the ensemble-mean field against the truth.
    #[default]
    EnsembleMean,
    /// Mean of the per-member γ spectra.
    MemberAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub channel: usize,
    /// 1-based lead time, absent for window aggregates.
    pub lead: Option<usize>,
    pub band: Option<String>,
    pub window: Option<String>,
    pub value: f64,
}

/// All metrics of one forecast.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub members: usize,
    pub steps: usize,
    pub channels: usize,
    /// `vrmse[t][c]`.
    pub vrmse: Vec<Vec<f64>>,
    /// `crps[t][c]`; absent for single-member ensembles.
    pub crps: Option<Vec<Vec<f64>>>,
    /// `coherence[t][c][band]`; absent when the grid is too small for spectra.
    pub coherence: Option<Vec<Vec<Vec<f64>>>>,
    pub band_labels: Vec<String>,
    pub rows: Vec<MetricRow>,
    /// Largest pre-clamp coherence excursion observed.
    pub max_coherence_excursion: f64,
}

struct StepMetrics {
    vrmse: Vec<f64>,
    crps: Option<Vec<f64>>,
    coherence: Option<Vec<Vec<f64>>>,
    excursion: f64,
}

fn step_metrics(
    forecast: &EnsembleForecast,
    truth: &Field,
    t: usize,
    bands: Option<&BandSpec>,
    mode: CoherenceMode,
) -> Result<StepMetrics> {
    let (channels, h, w) = forecast.shape();
    let mean = forecast.ensemble_mean(t);
    let mut out = StepMetrics {
        vrmse: Vec::with_capacity(channels),
        crps: (forecast.ensemble_size() >= 2).then(Vec::new),
        coherence: bands.map(|_| Vec::new()),
        excursion: 0.0,
    };
    for c in 0..channels {
        let u = truth.channel(c);
        out.vrmse.push(vrmse(u, mean.channel(c))?);
        if let Some(crps) = out.crps.as_mut() {
            let members: Vec<&[f64]> = forecast.members().iter().map(|m| m[t].channel(c)).collect();
            crps.push(crps_fair(u, &members)?);
        }
        if let (Some(bands), Some(coh)) = (bands, out.coherence.as_mut()) {
            let spectrum = match mode {
                CoherenceMode::EnsembleMean => coherence(u, mean.channel(c), h, w)?,
                CoherenceMode::MemberAverage => {
                    let spectra = forecast
                        .members()
                        .iter()
                        .map(|m| coherence(u, m[t].channel(c), h, w))
                        .collect::<Result<Vec<_>>>()?;
                    let inv = 1.0 / spectra.len() as f64;
                    let mut avg = spectra[0].clone();
                    for (r, g) in avg.gamma.iter_mut().enumerate() {
                        *g = spectra.iter().map(|s| s.gamma[r]).sum::<f64>() * inv;
                    }
                    avg.max_excursion = spectra.iter().map(|s| s.max_excursion).fold(0.0, f64::max);
                    avg
                }
            };
            out.excursion = out.excursion.max(spectrum.max_excursion);
            coh.push(coherence_band_rmse(&spectrum, bands)?);
        }
    }
    Ok(out)
}

/// Per-(lead, channel) metrics against the forecast's truth, plus window means.
///
/// `bands = None` picks log-spaced bands for the grid, or skips coherence when
/// the grid is smaller than 4x4.
pub fn evaluate(
    forecast: &EnsembleForecast,
    bands: Option<&BandSpec>,
    windows: &[Window],
    mode: CoherenceMode,
) -> Result<MetricsReport> {
    let truth = forecast
        .truth()
        .ok_or_else(|| Error::invalid("forecast carries no ground truth"))?;
    let (channels, h, w) = forecast.shape();
    let steps = forecast.steps();
    if let Some(win) = windows.iter().find(|w| w.end > steps) {
        return Err(Error::invalid(format!(
            "window {} exceeds the {steps} forecast steps",
            win.tag()
        )));
    }
    let default_bands;
    let bands = match bands {
        Some(b) => Some(b),
        None if h.min(w) >= 4 => {
            default_bands = BandSpec::log_spaced(h, w)?;
            Some(&default_bands)
        }
        None => None,
    };
    let per_step: Vec<StepMetrics> = (0..steps)
        .into_par_iter()
        .map(|t| step_metrics(forecast, &truth[t], t, bands, mode))
        .collect::<Result<_>>()?;

    let band_labels: Vec<String> = bands
        .map(|b| (0..b.n_bands()).map(|i| b.label(i)).collect())
        .unwrap_or_default();
    let vrmse: Vec<Vec<f64>> = per_step.iter().map(|s| s.vrmse.clone()).collect();
    let crps: Option<Vec<Vec<f64>>> = (forecast.ensemble_size() >= 2)
        .then(|| per_step.iter().map(|s| s.crps.clone().unwrap_or_default()).collect());
    let coherence: Option<Vec<Vec<Vec<f64>>>> =
        bands.map(|_| per_step.iter().map(|s| s.coherence.clone().unwrap_or_default()).collect());
    let max_coherence_excursion = per_step.iter().map(|s| s.excursion).fold(0.0, f64::max);

    let mut rows = Vec::new();
    let mut emit = |metric: &str, values: &dyn Fn(usize, usize) -> f64, band: Option<String>, c: usize| {
        for t in 0..steps {
            rows.push(MetricRow {
                metric: metric.into(),
                channel: c,
                lead: Some(t + 1),
                band: band.clone(),
                window: None,
                value: values(t, c),
            });
        }
        for win in windows {
            let n = (win.end - win.start + 1) as f64;
            let mean = (win.start - 1..win.end).map(|t| values(t, c)).sum::<f64>() / n;
            rows.push(MetricRow {
                metric: metric.into(),
                channel: c,
                lead: None,
                band: band.clone(),
                window: Some(win.tag()),
                value: mean,
            });
        }
    };
    for c in 0..channels {
        emit("vrmse", &|t, c| vrmse[t][c], None, c);
        if let Some(crps) = &crps {
            emit("crps", &|t, c| crps[t][c], None, c);
        }
        if let Some(coh) = &coherence {
            for (b, label) in band_labels.iter().enumerate() {
                emit("coherence_rmse", &|t, c| coh[t][c][b], Some(label.clone()), c);
            }
        }
    }
    Ok(MetricsReport {
        members: forecast.ensemble_size(),
        steps,
        channels,
        vrmse,
        crps,
        coherence,
        band_labels,
        rows,
        max_coherence_excursion,
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,channel,lead,band,window,value\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e}",
                r.metric,
                r.channel,
                r.lead.map(|l| l.to_string()).unwrap_or_default(),
                r.band.as_deref().unwrap_or(""),
                r.window.as_deref().unwrap_or(""),
                r.value
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Window aggregate rows only.
    pub fn aggregates(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.window.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn random_plane(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = StreamRng::new(seed);
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn vrmse_cases() {
        let u = random_plane(1, 64);
        assert_eq!(vrmse(&u, &u).unwrap(), 0.0);
        let v = vrmse(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((v - (1.0f64 / (1.0 + 1e-6)).sqrt()).abs() < 1e-15);
        assert!(vrmse(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn vrmse_of_mean_predictor_is_one() {
        let mut u = random_plane(2, 4096);
        let m = spatial_mean(&u);
        let sd = (u.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / u.len() as f64).sqrt();
        u.iter_mut().for_each(|a| *a = (*a - m) / sd);
        let v = vec![0.0; u.len()];
        assert!((vrmse(&u, &v).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn crps_cases() {
        let u = [0.0; 4];
        assert_eq!(crps_fair(&u, &[&u, &u]).unwrap(), 0.0);
        assert_eq!(crps_fair(&u, &[&[-1.0; 4], &[1.0; 4]]).unwrap(), 0.0);
        assert_eq!(crps_fair(&u, &[&[1.0; 4], &[1.0; 4]]).unwrap(), 1.0);
        assert!(crps_fair(&u, &[&u]).is_err());
    }

    #[test]
    fn crps_invariances() {
        let u = random_plane(3, 16);
        let ms: Vec<Vec<f64>> = (0..4).map(|i| random_plane(10 + i, 16)).collect();
        let refs: Vec<&[f64]> = ms.iter().map(|m| m.as_slice()).collect();
        let base = crps_fair(&u, &refs).unwrap();

        let shift = |x: &[f64]| x.iter().map(|v| v + 3.0).collect::<Vec<_>>();
        let ms2: Vec<Vec<f64>> = ms.iter().map(|m| shift(m)).collect();
        let refs2: Vec<&[f64]> = ms2.iter().map(|m| m.as_slice()).collect();
        assert!((crps_fair(&shift(&u), &refs2).unwrap() - base).abs() < 1e-12);

        let scale = |x: &[f64]| x.iter().map(|v| v * 2.5).collect::<Vec<_>>();
        let ms3: Vec<Vec<f64>> = ms.iter().map(|m| scale(m)).collect();
        let refs3: Vec<&[f64]> = ms3.iter().map(|m| m.as_slice()).collect();
        assert!((crps_fair(&scale(&u), &refs3).unwrap() - 2.5 * base).abs() < 1e-12);

        let same = [ms[0].as_slice(), ms[0].as_slice(), ms[0].as_slice()];
        let mae = u.iter().zip(&ms[0]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
        assert!((crps_fair(&u, &same).unwrap() - mae).abs() < 1e-12);
    }

    #[test]
    fn fast_and_direct_dft_agree() {
        for (h, w) in [(8, 8), (16, 8), (6, 10), (32, 32)] {
            let x = random_plane(h as u64 * 100 + w as u64, h * w);
            let a = dft2_direct(&x, h, w).unwrap();
            let b = dft2_fast(&x, h, w).unwrap();
            let err = a.iter().zip(&b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn parseval_on_random_fields() {
        for seed in 0..5 {
            let x = random_plane(seed, 64);
            let total: f64 = power_spectrum_2d(&x, 8, 8).unwrap().iter().sum();
            let direct = 64.0 * x.iter().map(|v| v * v).sum::<f64>();
            assert!((total - direct).abs() < 1e-10 * direct);
        }
    }

    #[test]
    fn constant_field_has_no_positive_power() {
        let p = radial_psd(&[3.0; 256], 16, 16).unwrap();
        assert!(p.values[0] > 0.0);
        assert!(p.values[1..].iter().all(|v| *v < 1e-20));
    }

    #[test]
    fn cosine_lands_in_its_ring() {
        let n = 32;
        for r in 1..=n / 2 {
            let x: Vec<f64> = (0..n * n)
                .map(|i| (2.0 * std::f64::consts::PI * r as f64 * (i % n) as f64 / n as f64).cos())
                .collect();
            let p = radial_psd(&x, n, n).unwrap();
            let peak = p.values[r];
            for (i, v) in p.values.iter().enumerate() {
                if i != r {
                    assert!(*v < 1e-20 * peak, "ring {i} for mode {r}: {v}");
                }
            }
        }
    }

    #[test]
    fn coherence_self_and_scaled() {
        let u = random_plane(7, 256);
        let c = coherence(&u, &u, 16, 16).unwrap();
        assert!(c.gamma.iter().all(|g| *g == 1.0));
        let v: Vec<f64> = u.iter().map(|a| 3.0 * a).collect();
        let c = coherence(&u, &v, 16, 16).unwrap();
        assert!(c.gamma.iter().all(|g| (g - 1.0).abs() < 1e-5));
    }

    #[test]
    fn band_rmse_cases() {
        let spectrum = CoherenceSpectrum {
            gamma: vec![1.0, 0.5, 0.0],
            k: vec![0.1, 0.2, 0.3],
            max_excursion: 0.0,
        };
        let bands = BandSpec::new(vec![0.0, 0.5]).unwrap();
        let v = coherence_band_rmse(&spectrum, &bands).unwrap()[0];
        assert!((v - (1.25f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((v - 0.6455).abs() < 1e-4);

        let zero = CoherenceSpectrum { gamma: vec![0.0; 3], ..spectrum.clone() };
        assert_eq!(coherence_band_rmse(&zero, &bands).unwrap(), vec![1.0]);

        let empty = BandSpec::new(vec![0.0, 0.05, 0.5]).unwrap();
        assert!(coherence_band_rmse(&spectrum, &empty).is_err());
    }

    #[test]
    fn log_bands_partition_rings() {
        let b = BandSpec::log_spaced(32, 32).unwrap();
        let counts: Vec<usize> = (0..3)
            .map(|i| (1..=16).filter(|&r| b.band_of(r as f64 / 32.0) == Some(i)).count())
            .collect();
        assert_eq!(counts.iter().sum::<usize>(), 16);
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        assert!(BandSpec::new(vec![0.0, 0.2, 0.1]).is_err());
    }

    #[test]
    fn windows_parse() {
        let w = Window::parse_list("1:8,9:16").unwrap();
        assert_eq!(w, vec![Window { start: 1, end: 8 }, Window { start: 9, end: 16 }]);
        assert!(Window::parse_list("0:3").is_err());
        assert!(Window::parse_list("5:3").is_err());
        assert!(Window::parse_list("x").is_err());
    }

    fn synthetic(members: usize, steps: usize, n: usize, perfect: bool) -> EnsembleForecast {
        let truth: Vec<Field> = (0..steps)
            .map(|t| Field::new(1, n, n, random_plane(t as u64, n * n)).unwrap())
            .collect();
        let ms: Vec<Vec<Field>> = (0..members)
            .map(|m| {
                (0..steps)
                    .map(|t| {
                        if perfect {
                            truth[t].clone()
                        } else {
                            Field::new(1, n, n, random_plane(1000 + (m * steps + t) as u64, n * n)).unwrap()
                        }
                    })
                    .collect()
            })
            .collect();
        let meta = ForecastMeta {
            seeds: (0..members as u64).collect(),
            euler_steps: 50,
            wavelet: Wavelet::Haar,
            levels: 1,
            failures: vec![None; members],
            model: "test".into(),
        };
        EnsembleForecast::new(ms, Some(truth), meta, (1, n, n), steps).unwrap()
    }

    #[test]
    fn perfect_forecast_scores_zero() {
        let f = synthetic(3, 4, 16, true);
        let r = evaluate(&f, None, &[Window::new(1, 4).unwrap()], CoherenceMode::EnsembleMean).unwrap();
        assert!(r.rows.iter().all(|row| row.value == 0.0));
    }

    #[test]
    fn full_window_is_mean_of_leads() {
        let f = synthetic(2, 5, 16, false);
        let r = evaluate(&f, None, &[Window::new(1, 5).unwrap()], CoherenceMode::EnsembleMean).unwrap();
        let agg = r.aggregates().find(|row| row.metric == "vrmse").unwrap().value;
        let mean = r.vrmse.iter().map(|v| v[0]).sum::<f64>() / 5.0;
        assert!((agg - mean).abs() < 1e-15);
        assert!(evaluate(&f, None, &[Window::new(1, 6).unwrap()], CoherenceMode::EnsembleMean).is_err());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + r.rows.len());
        assert!(r.to_json().contains("\"vrmse\""));
    }

    #[test]
    fn single_member_skips_crps() {
        let f = synthetic(1, 2, 8, false);
        let r = evaluate(&f, None, &[], CoherenceMode::MemberAverage).unwrap();
        assert!(r.crps.is_none());
        assert!(r.rows.iter().all(|row| row.metric != "crps"));
    }

    #[test]
    fn forecast_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = synthetic(2, 3, 8, false);
        f.save(dir.path()).unwrap();
        assert_eq!(EnsembleForecast::load(dir.path()).unwrap(), f);
    }
}
