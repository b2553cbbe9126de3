//! Toy PDE trajectories on periodic grids and the on-disk dataset layout.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::field::{Field, ParamVector, Standardizer, Trajectory};
use crate::manifest::{join, Manifest};
use crate::rng::StreamRng;
use crate::tensor_io::{read_f64_with_shape, write_tensor, RawTensor};

fn check_dyadic(h: usize, w: usize) -> Result<()> {
    for d in [h, w] {
        if d < 2 || !d.is_power_of_two() {
            return Err(Error::invalid(format!("grid side {d} is not a power of two")));
        }
    }
    Ok(())
}

fn signed(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeatIntegrator {
    /// Exact per-mode decay in the discrete Fourier basis.
    #[default]
    Spectral,
    /// Forward Euler with the periodic 5-point Laplacian.
    FiniteDifference,
}

/// `u_t = ν Δu` on the unit torus.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatSpec {
    pub height: usize,
    pub width: usize,
    pub nu: f64,
    pub dt: f64,
    /// Time steps; the trajectory holds `n_steps + 1` frames.
    pub n_steps: usize,
    pub seed: u64,
    pub integrator: HeatIntegrator,
}

impl Default for HeatSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            nu: 1e-3,
            dt: 0.05,
            n_steps: 64,
            seed: 0,
            integrator: HeatIntegrator::Spectral,
        }
    }
}

impl HeatSpec {
    pub fn validate(&self) -> Result<()> {
        check_dyadic(self.height, self.width)?;
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::invalid(format!("diffusivity must be non-negative, got {}", self.nu)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("time step must be positive, got {}", self.dt)));
        }
        if self.integrator == HeatIntegrator::FiniteDifference {
            let (dx, dy) = (1.0 / self.width as f64, 1.0 / self.height as f64);
            let number = self.nu * self.dt * (1.0 / (dx * dx) + 1.0 / (dy * dy));
            if number > 0.5 {
                return Err(Error::invalid(format!(
                    "explicit heat step unstable: nu*dt*(1/dx^2+1/dy^2) = {number} > 1/2"
                )));
            }
        }
        Ok(())
    }
}

/// Seeded random field with power only in modes `0 < |k| <= min(H,W)/8`.
pub fn band_limited_field(h: usize, w: usize, channels: usize, rng: &StreamRng) -> Field {
    let kmax = (h.min(w) / 8).max(1) as f64;
    let mut data = vec![0.0; channels * h * w];
    for c in 0..channels {
        let mut r = rng.fork(c as u64);
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        let k = kmax as i64;
        for ky in -k..=k {
            for kx in -k..=k {
                // One representative per ± pair.
                if (ky, kx) <= (0, 0) {
                    continue;
                }
                let rad = ((kx * kx + ky * ky) as f64).sqrt();
                if rad > kmax {
                    continue;
                }
                let (a, b) = (r.normal() / rad, r.normal() / rad);
                for y in 0..h {
                    for x in 0..w {
                        let phase = 2.0 * std::f64::consts::PI * (kx as f64 * x as f64 / w as f64 + ky as f64 * y as f64 / h as f64);
                        plane[y * w + x] += a * phase.cos() + b * phase.sin();
                    }
                }
            }
        }
    }
    Field::new(channels, h, w, data).expect("finite band-limited field")
}

/// Exact evolution of the periodic heat equation over `t`, channel by channel.
pub fn heat_propagate(field: &Field, nu: f64, t: f64) -> Field {
    let (c, h, w) = field.shape();
    let mut planner = FftPlanner::<f64>::new();
    let (fx, fy) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let (ix, iy) = (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h));
    let mut out = Vec::with_capacity(c * h * w);
    let factor: Vec<f64> = (0..h * w)
        .map(|i| {
            let (ky, kx) = (signed(i / w, h), signed(i % w, w));
            (-nu * (2.0 * std::f64::consts::PI).powi(2) * (kx * kx + ky * ky) * t).exp()
        })
        .collect();
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for ch in 0..c {
        let mut data: Vec<Complex64> = field.channel(ch).iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let columns = |data: &mut Vec<Complex64>, col: &mut Vec<Complex64>, plan: &dyn rustfft::Fft<f64>| {
            for x in 0..w {
                for y in 0..h {
                    col[y] = data[y * w + x];
                }
                plan.process(col);
                for y in 0..h {
                    data[y * w + x] = col[y];
                }
            }
        };
        data.chunks_mut(w).for_each(|row| fx.process(row));
        columns(&mut data, &mut col, fy.as_ref());
        data.iter_mut().zip(&factor).for_each(|(v, f)| *v *= f);
        columns(&mut data, &mut col, iy.as_ref());
        data.chunks_mut(w).for_each(|row| ix.process(row));
        let norm = 1.0 / (h * w) as f64;
        out.extend(data.iter().map(|v| v.re * norm));
    }
    Field::new(c, h, w, out).expect("finite heat state")
}

fn laplacian(plane: &[f64], h: usize, w: usize, inv_dx2: f64, inv_dy2: f64, out: &mut [f64]) {
    for y in 0..h {
        let (up, down) = ((y + h - 1) % h, (y + 1) % h);
        for x in 0..w {
            let (left, right) = ((x + w - 1) % w, (x + 1) % w);
            let c = plane[y * w + x];
            out[y * w + x] = (plane[y * w + left] + plane[y * w + right] - 2.0 * c) * inv_dx2
                + (plane[up * w + x] + plane[down * w + x] - 2.0 * c) * inv_dy2;
        }
    }
}

pub fn heat_trajectory(spec: &HeatSpec) -> Result<Trajectory> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut state = band_limited_field(h, w, 1, &StreamRng::new(spec.seed));
    let mut frames = Vec::with_capacity(spec.n_steps + 1);
    frames.push(state.clone());
    let (inv_dx2, inv_dy2) = ((w * w) as f64, (h * h) as f64);
    let mut lap = vec![0.0; h * w];
    for _ in 0..spec.n_steps {
        state = match spec.integrator {
            HeatIntegrator::Spectral => heat_propagate(&state, spec.nu, spec.dt),
            HeatIntegrator::FiniteDifference => {
                laplacian(state.data(), h, w, inv_dx2, inv_dy2, &mut lap);
                let mut next = state.clone();
                next.data_mut()
                    .iter_mut()
                    .zip(&lap)
                    .for_each(|(v, l)| *v += spec.nu * spec.dt * l);
                next
            }
        };
        frames.push(state.clone());
    }
    Trajectory::new(frames, spec.dt, ParamVector::new(vec!["nu".into()], vec![spec.nu])?)
}

/// Gray-Scott reaction-diffusion in lattice units (`Δx = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionDiffusionSpec {
    pub height: usize,
    pub width: usize,
    pub du: f64,
    pub dv: f64,
    pub feed: f64,
    pub kill: f64,
    pub dt: f64,
    /// Saved frames after the initial one.
    pub n_steps: usize,
    /// Integrator steps between saved frames.
    pub substeps: usize,
    pub seed: u64,
    /// Number of seeded square perturbations; zero leaves the trivial state `(1, 0)`.
    pub perturbations: usize,
    /// When false only diffusion acts.
    pub reaction: bool,
}

impl Default for ReactionDiffusionSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            du: 0.2,
            dv: 0.1,
            feed: 0.030,
            kill: 0.060,
            dt: 1.0,
            n_steps: 64,
            substeps: 20,
            seed: 0,
            perturbations: 8,
            reaction: true,
        }
    }
}

impl ReactionDiffusionSpec {
    pub fn validate(&self) -> Result<()> {
        check_dyadic(self.height, self.width)?;
        if !(self.du > 0.0 && self.dv > 0.0) {
            return Err(Error::invalid("diffusivities must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.substeps == 0 {
            return Err(Error::invalid("time step and substeps must be positive"));
        }
        let number = self.du.max(self.dv) * self.dt * 2.0;
        if number > 0.5 {
            return Err(Error::invalid(format!(
                "explicit Gray-Scott step unstable: D*dt*(1/dx^2+1/dy^2) = {number} > 1/2"
            )));
        }
        Ok(())
    }
}

pub fn grayscott_trajectory(spec: &ReactionDiffusionSpec) -> Result<Trajectory> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut u = vec![1.0; n];
    let mut v = vec![0.0; n];
    let mut rng = StreamRng::new(spec.seed);
    let side = (h.min(w) / 8).max(1);
    for _ in 0..spec.perturbations {
        let (y0, x0) = (rng.below(h), rng.below(w));
        for dy in 0..side {
            for dx in 0..side {
                let i = ((y0 + dy) % h) * w + (x0 + dx) % w;
                u[i] = 0.5 + 0.02 * rng.normal();
                v[i] = 0.25 + 0.02 * rng.normal();
            }
        }
    }
    let pack = |u: &[f64], v: &[f64]| -> Result<Field> {
        let mut data = u.to_vec();
        data.extend_from_slice(v);
        Field::new(2, h, w, data).map_err(|_| Error::NonFinite("Gray-Scott state diverged".into()))
    };
    let mut frames = vec![pack(&u, &v)?];
    let (mut lu, mut lv) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..spec.n_steps {
        for _ in 0..spec.substeps {
            laplacian(&u, h, w, 1.0, 1.0, &mut lu);
            laplacian(&v, h, w, 1.0, 1.0, &mut lv);
            for i in 0..n {
                let (ui, vi) = (u[i], v[i]);
                let (mut fu, mut fv) = (spec.du * lu[i], spec.dv * lv[i]);
                if spec.reaction {
                    let uvv = ui * vi * vi;
                    fu += -uvv + spec.feed * (1.0 - ui);
                    fv += uvv - (spec.feed + spec.kill) * vi;
                }
                u[i] = ui + spec.dt * fu;
                v[i] = vi + spec.dt * fv;
            }
        }
        frames.push(pack(&u, &v)?);
    }
    Trajectory::new(
        frames,
        spec.dt * spec.substeps as f64,
        ParamVector::new(vec!["F".into(), "k".into()], vec![spec.feed, spec.kill])?,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemSpec {
    Heat(HeatSpec),
    GrayScott(ReactionDiffusionSpec),
}

impl SystemSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Heat(_) => "heat",
            Self::GrayScott(_) => "grayscott",
        }
    }

    pub fn generate(&self) -> Result<Trajectory> {
        match self {
            Self::Heat(s) => heat_trajectory(s),
            Self::GrayScott(s) => grayscott_trajectory(s),
        }
    }

    fn describe(&self, m: &mut Manifest, prefix: &str) {
        match self {
            Self::Heat(s) => {
                m.push(format!("{prefix}.nu"), s.nu);
                m.push(format!("{prefix}.dt"), s.dt);
                m.push(format!("{prefix}.seed"), s.seed);
                m.push(
                    format!("{prefix}.integrator"),
                    match s.integrator {
                        HeatIntegrator::Spectral => "spectral",
                        HeatIntegrator::FiniteDifference => "finite-difference",
                    },
                );
            }
            Self::GrayScott(s) => {
                m.push(format!("{prefix}.du"), s.du);
                m.push(format!("{prefix}.dv"), s.dv);
                m.push(format!("{prefix}.feed"), s.feed);
                m.push(format!("{prefix}.kill"), s.kill);
                m.push(format!("{prefix}.dt"), s.dt);
                m.push(format!("{prefix}.substeps"), s.substeps);
                m.push(format!("{prefix}.seed"), s.seed);
            }
        }
    }
}

/// Number of training trajectories for `n` trajectories and a train fraction.
pub fn split_counts(n: usize, train_fraction: f64) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::invalid(format!("a dataset needs at least 2 trajectories, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    Ok((train, n - train))
}

/// Trajectories with their split and train-set statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: Option<PathBuf>,
    pub system: String,
    pub trajectories: Vec<Trajectory>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub standardizer: Standardizer,
}

impl Dataset {
    /// Splits in order (first trajectories train) and fits the standardizer on train.
    pub fn from_trajectories(system: &str, trajectories: Vec<Trajectory>, train_fraction: f64) -> Result<Self> {
        let (n_train, _) = split_counts(trajectories.len(), train_fraction)?;
        let shape = trajectories[0]
            .frame_shape()
            .ok_or_else(|| Error::invalid("empty trajectory"))?;
        if trajectories.iter().any(|t| t.frame_shape() != Some(shape)) {
            return Err(Error::shape("trajectories differ in frame shape"));
        }
        let train: Vec<usize> = (0..n_train).collect();
        let val: Vec<usize> = (n_train..trajectories.len()).collect();
        let standardizer = fit_standardizer(&trajectories, &train)?;
        Ok(Self {
            dir: None,
            system: system.into(),
            trajectories,
            train,
            val,
            standardizer,
        })
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.trajectories[0].frame_shape().expect("validated non-empty")
    }

    pub fn kappa_dim(&self) -> usize {
        self.trajectories[0].params().len()
    }

    /// Standardized copy of trajectory `i`.
    pub fn standardized(&self, i: usize) -> Result<Trajectory> {
        self.trajectories[i].map_frames(|f| self.standardizer.standardize(f))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join("manifest.txt"))?;
        let n: usize = m.require("trajectories")?;
        let frames: usize = m.require("frames")?;
        let (c, h, w): (usize, usize, usize) = (m.require("channels")?, m.require("height")?, m.require("width")?);
        let names: Vec<String> = m.require_list("kappa_names")?;
        let mut trajectories = Vec::with_capacity(n);
        for i in 0..n {
            let data = read_f64_with_shape(&dir.join(traj_file(i)), &[frames, c, h, w])?;
            let fields = data
                .chunks(c * h * w)
                .map(|chunk| Field::new(c, h, w, chunk.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let kappa: Vec<f64> = m.require_list(&format!("traj{i}.kappa"))?;
            let dt: f64 = m.require(&format!("traj{i}.frame_dt"))?;
            trajectories.push(Trajectory::new(fields, dt, ParamVector::new(names.clone(), kappa)?)?);
        }
        let train: Vec<usize> = m.require_list("train")?;
        let val: Vec<usize> = m.require_list("val")?;
        if train.iter().chain(&val).any(|&i| i >= n) {
            return Err(Error::format(dir.join("manifest.txt"), "split index out of range"));
        }
        let standardizer = Standardizer::new(m.require_list("mean")?, m.require_list("std")?)?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            system: m.require("system")?,
            trajectories,
            train,
            val,
            standardizer,
        })
    }
}

fn fit_standardizer(trajectories: &[Trajectory], train: &[usize]) -> Result<Standardizer> {
    Standardizer::fit(train.iter().flat_map(|&i| trajectories[i].frames().iter()))
}

pub fn traj_file(i: usize) -> String {
    format!("traj_{i:04}.wfmt")
}

/// Generates every trajectory, writes `traj_XXXX.wfmt` files of shape
/// `(T, C, H, W)` and `manifest.txt`, and returns the manifest.
pub fn make_dataset(specs: &[SystemSpec], train_fraction: f64, out_dir: &Path) -> Result<Manifest> {
    split_counts(specs.len(), train_fraction)?;
    let system = specs[0].name();
    if specs.iter().any(|s| s.name() != system) {
        return Err(Error::invalid("all trajectories of a dataset must come from one system"));
    }
    let trajectories: Vec<Trajectory> = specs.par_iter().map(SystemSpec::generate).collect::<Result<_>>()?;
    let ds = Dataset::from_trajectories(system, trajectories, train_fraction)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (c, h, w) = ds.frame_shape();
    let frames = ds.trajectories[0].len();
    if ds.trajectories.iter().any(|t| t.len() != frames) {
        return Err(Error::shape("trajectories differ in length"));
    }
    for (i, t) in ds.trajectories.iter().enumerate() {
        write_tensor(&out_dir.join(traj_file(i)), &RawTensor::f64(vec![frames, c, h, w], t.to_flat()))?;
    }
    let mut m = Manifest::new();
    m.push("system", system);
    m.push("trajectories", ds.trajectories.len());
    m.push("frames", frames);
    m.push("channels", c);
    m.push("height", h);
    m.push("width", w);
    m.push("train_fraction", train_fraction);
    m.push("train", join(&ds.train));
    m.push("val", join(&ds.val));
    m.push("mean", join(ds.standardizer.mean()));
    m.push("std", join(ds.standardizer.std()));
    m.push("kappa_names", ds.trajectories[0].params().names().join(","));
    for (i, (t, spec)) in ds.trajectories.iter().zip(specs).enumerate() {
        m.push(format!("traj{i}.kappa"), join(t.params().values()));
        m.push(format!("traj{i}.frame_dt"), t.dt());
        spec.describe(&mut m, &format!("traj{i}"));
    }
    m.write(&out_dir.join("manifest.txt"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mode(h: usize, w: usize, ky: usize, kx: usize) -> Field {
        Field::from_fn(1, h, w, |_, y, x| {
            (2.0 * std::f64::consts::PI * (kx as f64 * x as f64 / w as f64 + ky as f64 * y as f64 / h as f64)).cos()
        })
    }

    #[test]
    fn every_mode_decays_exactly_on_8x8() {
        let (nu, dt) = (2e-3, 0.1);
        for ky in 0..8 {
            for kx in 0..8 {
                let f = mode(8, 8, ky, kx);
                let next = heat_propagate(&f, nu, dt);
                let (sy, sx) = (signed(ky, 8), signed(kx, 8));
                let decay = (-nu * (2.0 * std::f64::consts::PI).powi(2) * (sx * sx + sy * sy) * dt).exp();
                let err = next
                    .data()
                    .iter()
                    .zip(f.data())
                    .map(|(a, b)| (a - decay * b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-12, "mode ({ky},{kx}): {err}");
            }
        }
    }

    #[test]
    fn zero_diffusivity_is_constant_and_mean_is_conserved() {
        let t = heat_trajectory(&HeatSpec { nu: 0.0, n_steps: 5, height: 16, width: 16, ..Default::default() }).unwrap();
        for f in t.frames() {
            let d = f.data().iter().zip(t.frames()[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-13);
        }
        let t = heat_trajectory(&HeatSpec { nu: 0.01, n_steps: 10, height: 16, width: 16, ..Default::default() }).unwrap();
        let mean = |f: &Field| f.data().iter().sum::<f64>() / 256.0;
        let m0 = mean(&t.frames()[0]);
        assert!(t.frames().iter().all(|f| (mean(f) - m0).abs() < 1e-12));
        assert_eq!(t.params().values(), &[0.01]);
    }

    #[test]
    fn heat_validation() {
        assert!(heat_trajectory(&HeatSpec { height: 12, ..Default::default() }).is_err());
        let fd = HeatSpec { integrator: HeatIntegrator::FiniteDifference, nu: 1.0, dt: 1.0, ..Default::default() };
        assert!(heat_trajectory(&fd).is_err());
    }

    #[test]
    fn finite_difference_tracks_spectral() {
        let base = HeatSpec { height: 16, width: 16, nu: 1e-3, dt: 1e-2, n_steps: 20, ..Default::default() };
        let a = heat_trajectory(&base).unwrap();
        let b = heat_trajectory(&HeatSpec { integrator: HeatIntegrator::FiniteDifference, ..base }).unwrap();
        let last = |t: &Trajectory| t.frames().last().unwrap().clone();
        let scale = last(&a).data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let err = last(&a).data().iter().zip(last(&b).data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 0.05 * scale, "{err} vs {scale}");
    }

    #[test]
    fn grayscott_fixed_point_and_conservation() {
        let still = ReactionDiffusionSpec { height: 16, width: 16, n_steps: 3, perturbations: 0, ..Default::default() };
        let t = grayscott_trajectory(&still).unwrap();
        assert!(t.frames().iter().all(|f| f == &t.frames()[0]));

        let diffusing = ReactionDiffusionSpec {
            height: 16,
            width: 16,
            n_steps: 5,
            feed: 0.0,
            kill: 0.0,
            reaction: false,
            ..Default::default()
        };
        let t = grayscott_trajectory(&diffusing).unwrap();
        for c in 0..2 {
            let mean = |f: &Field| f.channel(c).iter().sum::<f64>() / 256.0;
            let m0 = mean(&t.frames()[0]);
            assert!(t.frames().iter().all(|f| (mean(f) - m0).abs() < 1e-10));
        }
        assert_eq!(grayscott_trajectory(&still).unwrap().to_flat(), grayscott_trajectory(&still).unwrap().to_flat());
        let unstable = ReactionDiffusionSpec { dt: 2.0, ..Default::default() };
        assert!(grayscott_trajectory(&unstable).is_err());
    }

    #[test]
    fn grayscott_forms_patterns_without_blowing_up() {
        let spec = ReactionDiffusionSpec { height: 32, width: 32, n_steps: 10, seed: 3, ..Default::default() };
        let t = grayscott_trajectory(&spec).unwrap();
        assert!(t.frames().iter().all(Field::is_finite));
        let v = t.frames().last().unwrap().channel(1).to_vec();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() > 0.0);
    }

    #[test]
    fn split_counts_cases() {
        assert_eq!(split_counts(10, 0.8).unwrap(), (8, 2));
        assert!(split_counts(1, 0.8).is_err());
        assert_eq!(split_counts(2, 0.99).unwrap(), (1, 1));
    }

    #[test]
    fn dataset_round_trip_and_train_only_stats() {
        let dir = tempfile::tempdir().unwrap();
        let specs: Vec<SystemSpec> = (0..5)
            .map(|i| SystemSpec::Heat(HeatSpec { height: 8, width: 8, n_steps: 4, seed: i, ..Default::default() }))
            .collect();
        let m = make_dataset(&specs, 0.8, dir.path()).unwrap();
        assert_eq!(m.get("train"), Some("0,1,2,3"));
        assert_eq!(m.get("val"), Some("4"));
        let ds = Dataset::load(dir.path()).unwrap();
        let refit = fit_standardizer(&ds.trajectories, &ds.train).unwrap();
        assert_eq!(refit, ds.standardizer);
        assert_eq!(ds.trajectories.len(), 5);
        assert_eq!(ds.trajectories[0].len(), 5);

        let dir2 = tempfile::tempdir().unwrap();
        make_dataset(&specs, 0.8, dir2.path()).unwrap();
        for i in 0..5 {
            let a = std::fs::read(dir.path().join(traj_file(i))).unwrap();
            let b = std::fs::read(dir2.path().join(traj_file(i))).unwrap();
            assert_eq!(a, b);
        }
    }
}
