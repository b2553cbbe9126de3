//! Wall-clock and throughput bookkeeping for rollouts.
//!
//! Runs are single-process, so the wall time is the one clock of this process.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::field::{Field, Standardizer};
use crate::flow::{rollout, SamplerConfig, VelocityField};
use crate::manifest::Manifest;
use crate::metrics::EnsembleForecast;
use crate::wavelet::FilterBank;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub label: String,
    pub wall_seconds: f64,
    /// Autoregressive steps taken.
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub seconds_per_step: f64,
    pub steps_per_second: f64,
    /// `steps · H · W / wall`.
    pub frames_per_second: f64,
    /// Peak resident set size in KiB, when the platform reports it.
    pub peak_memory_kib: Option<u64>,
    pub baseline: Option<String>,
    /// `T_baseline / T_this`.
    pub speedup: Option<f64>,
}

impl ProfileReport {
    pub fn new(label: impl Into<String>, wall_seconds: f64, steps: usize, height: usize, width: usize) -> Result<Self> {
        if !(wall_seconds > 0.0 && wall_seconds.is_finite()) {
            return Err(Error::invalid(format!("wall time must be positive, got {wall_seconds}")));
        }
        if steps == 0 {
            return Err(Error::invalid("profile needs at least one step"));
        }
        let rate = steps as f64 / wall_seconds;
        Ok(Self {
            label: label.into(),
            wall_seconds,
            steps,
            height,
            width,
            seconds_per_step: wall_seconds / steps as f64,
            steps_per_second: rate,
            frames_per_second: rate * (height * width) as f64,
            peak_memory_kib: peak_memory_kib(),
            baseline: None,
            speedup: None,
        })
    }

    pub fn compare_to(&mut self, baseline: &ProfileReport) {
        self.baseline = Some(baseline.label.clone());
        self.speedup = Some(baseline.wall_seconds / self.wall_seconds);
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.push("label", &self.label);
        m.push("wall_seconds", self.wall_seconds);
        m.push("steps", self.steps);
        m.push("height", self.height);
        m.push("width", self.width);
        m.push("seconds_per_step", self.seconds_per_step);
        m.push("steps_per_second", self.steps_per_second);
        m.push("frames_per_second", self.frames_per_second);
        if let Some(kib) = self.peak_memory_kib {
            m.push("peak_memory_kib", kib);
        }
        if let (Some(b), Some(s)) = (&self.baseline, self.speedup) {
            m.push("baseline", b);
            m.push("speedup", s);
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_manifest().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = Manifest::read(path)?;
        let mut r = Self::new(
            m.require::<String>("label")?,
            m.require("wall_seconds")?,
            m.require("steps")?,
            m.require("height")?,
            m.require("width")?,
        )?;
        r.peak_memory_kib = m.get("peak_memory_kib").and_then(|v| v.parse().ok());
        r.baseline = m.get("baseline").map(str::to_string);
        r.speedup = m.get("speedup").and_then(|v| v.parse().ok());
        Ok(r)
    }
}

/// `VmHWM` from `/proc/self/status`.
pub fn peak_memory_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

/// Times [`rollout`] alone; no file I/O happens inside the timed region.
#[allow(clippy::too_many_arguments)]
pub fn profile_rollout(
    label: &str,
    net: &dyn VelocityField,
    initial: &[Field],
    kappa: &[f64],
    steps: usize,
    cfg: &SamplerConfig,
    bank: &FilterBank,
    levels: usize,
    standardizer: Option<&Standardizer>,
) -> Result<(ProfileReport, EnsembleForecast)> {
    let start = Instant::now();
    let forecast = rollout(net, initial, kappa, steps, cfg, bank, levels, standardizer)?;
    let wall = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    let (_, h, w) = forecast.shape();
    Ok((ProfileReport::new(label, wall, steps, h, w)?, forecast))
}
