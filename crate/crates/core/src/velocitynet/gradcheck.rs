//! Central finite-difference verification of the network adjoint.

use super::{NetConfig, NetInput, VelocityNet};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::flow::sample_noise;
use crate::rng::StreamRng;
use crate::wavelet::{PyramidShape, Wavelet, WaveletPyramid};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Parameters sampled uniformly without replacement.
    pub n_params: usize,
    /// Input-pyramid coefficients sampled per scale.
    pub n_inputs: usize,
    /// Finite-difference step.
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Adds a constant to the analytic gradient of this tensor (negative control).
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n_params: 200,
            n_inputs: 8,
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            seed: 0,
            height: 16,
            width: 16,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |e| e.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < self.tol)
    }

    pub fn param_entries(&self) -> usize {
        self.entries.iter().filter(|e| !e.name.starts_with("input.")).count()
    }
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of `L = Σ_j <û_j, R_j>` (random `R`) with
/// central differences, on a randomly perturbed network and random inputs.
pub fn grad_check(config: &NetConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    config.validate()?;
    config.check_grid(cfg.height, cfg.width)?;
    if cfg.h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let root = StreamRng::new(cfg.seed);
    let mut net = VelocityNet::init(config.clone(), cfg.seed)?;
    // Move every tensor off its structured initial value so no path is dead.
    let mut rng = root.fork(1);
    net.params_mut()
        .values_mut()
        .iter_mut()
        .for_each(|v| *v += 0.1 * rng.normal());

    let shape = PyramidShape::new(config.channels, cfg.height, cfg.width, config.n_scales)?;
    let current = sample_noise(Wavelet::Haar, &shape, &root.fork(2));
    let state = sample_noise(Wavelet::Haar, &shape, &root.fork(3));
    let mut rng = root.fork(4);
    let kappa: Vec<f64> = (0..config.kappa_dim).map(|_| rng.normal()).collect();
    let context: Vec<Field> = (0..config.context_len)
        .map(|_| {
            let n = config.channels * cfg.height * cfg.width;
            Field::new(config.channels, cfg.height, cfg.width, (0..n).map(|_| rng.normal()).collect())
        })
        .collect::<Result<_>>()?;
    let tau = root.fork(5).uniform();
    let weights = sample_noise(Wavelet::Haar, &shape, &root.fork(6));
    let weight_scales: Vec<Vec<f64>> = (1..=config.n_scales)
        .map(|j| weights.scale(j).to_vec())
        .collect();

    let loss = |net: &VelocityNet, cur: &WaveletPyramid, st: &WaveletPyramid| -> Result<f64> {
        let out = net.predict(&NetInput {
            current: cur,
            state: st,
            tau,
            kappa: &kappa,
            context: &context,
        })?;
        Ok(out
            .iter()
            .zip(&weight_scales)
            .map(|(o, r)| o.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };

    let pass = net.forward(&NetInput {
        current: &current,
        state: &state,
        tau,
        kappa: &kappa,
        context: &context,
    })?;
    let mut grads = net.backward(&pass, &weight_scales)?;
    if let Some(name) = &cfg.corrupt {
        let id = net
            .params()
            .id(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        let r = net.params().range(id);
        grads.params[r].iter_mut().for_each(|g| *g += 1e-3);
    }

    let total = net.param_count();
    let n = cfg.n_params.min(total);
    let mut indices: Vec<usize> = root.fork(7).permutation(total)[..n].to_vec();
    if let Some(name) = &cfg.corrupt {
        let first = net.params().range(net.params().id(name).expect("checked above")).start;
        if !indices.contains(&first) {
            indices.push(first);
        }
    }
    indices.sort_unstable();

    let mut entries = Vec::with_capacity(indices.len() + cfg.n_inputs * config.n_scales);
    for &i in &indices {
        let orig = net.params().values()[i];
        net.params_mut().values_mut()[i] = orig + cfg.h;
        let plus = loss(&net, &current, &state)?;
        net.params_mut().values_mut()[i] = orig - cfg.h;
        let minus = loss(&net, &current, &state)?;
        net.params_mut().values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let analytic = grads.params[i];
        entries.push(GradCheckEntry {
            name: net.params().name_of(i).to_string(),
            index: i,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric, cfg.floor),
        });
    }

    let mut rng = root.fork(8);
    for j in 1..=config.n_scales {
        let half = shape.scale_len(j);
        for _ in 0..cfg.n_inputs {
            let k = rng.below(2 * half);
            let (which, idx) = if k < half { ("current", k) } else { ("state", k - half) };
            let eval = |delta: f64| -> Result<f64> {
                let (mut c, mut s) = (current.clone(), state.clone());
                let target = if which == "current" { &mut c } else { &mut s };
                target.scale_mut(j)[idx] += delta;
                loss(&net, &c, &s)
            };
            let numeric = (eval(cfg.h)? - eval(-cfg.h)?) / (2.0 * cfg.h);
            let analytic = grads.inputs[j - 1][k];
            entries.push(GradCheckEntry {
                name: format!("input.scale{j}.{which}"),
                index: idx,
                analytic,
                numeric,
                rel_error: rel_error(analytic, numeric, cfg.floor),
            });
        }
    }
    Ok(GradCheckReport { entries, tol: cfg.tol })
}
