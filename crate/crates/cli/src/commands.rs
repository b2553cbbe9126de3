use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use wfm_core::field::Field;
use wfm_core::flow::{rollout as run_rollout, LossAveraging, SamplerConfig, DEFAULT_EULER_STEPS, DEFAULT_MEMBERS};
use wfm_core::metrics::{evaluate, BandSpec, CoherenceMode, EnsembleForecast, Window};
use wfm_core::pdegen::{make_dataset, Dataset, HeatIntegrator, HeatSpec, ReactionDiffusionSpec, SystemSpec};
use wfm_core::profile::{profile_rollout, ProfileReport};
use wfm_core::rng::StreamRng;
use wfm_core::tensor_io::read_tensor;
use wfm_core::trainer::{fit, AdamConfig, TrainConfig};
use wfm_core::velocitynet::{grad_check as run_grad_check, GradCheckConfig, NetConfig, VelocityNet};
use wfm_core::wavelet::{dwt_multiscale, idwt_multiscale, BAND_NAMES};
use wfm_core::{FilterBank, Wavelet};

use crate::config::{usage, Resolver};
use crate::{Eval, GenData, GradCheck, NetFlags, Profile, Rollout, Train, WaveletInspect};

fn path_flag(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.to_string_lossy().into_owned())
}

fn required_path(r: &mut Resolver, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    r.required(key, path_flag(flag)).map(PathBuf::from)
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| usage(format!("--{key}: cannot parse `{p}`"))))
        .collect()
}

pub fn gen_data(a: GenData) -> Result<u8> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let out = required_path(&mut r, "out", a.out)?;
    let system = r.value("system", a.system, "heat".to_string())?;
    let grid = r.value("grid", a.grid, 32usize)?;
    let traj = r.value("traj", a.traj, 10usize)?;
    let steps = r.value("steps", a.steps, 64usize)?;
    let levels = r.value("levels", a.levels, 3usize)?;
    let fraction = r.value("train_fraction", a.train_fraction, 0.8)?;
    let seed = r.seed(a.common.seed)?;
    if grid == 0 || levels >= usize::BITS as usize || grid % (1usize << levels) != 0 {
        return Err(usage(format!("grid must be divisible by 2^J (J = {levels}), got {grid}")));
    }
    let root = StreamRng::new(seed);
    let traj_seed = |i: usize| rand_seed(&root, i);
    let specs: Vec<SystemSpec> = match system.as_str() {
        "heat" => {
            let base = HeatSpec::default();
            let nu = r.value("nu", a.nu, base.nu)?;
            let dt = r.value("dt", a.dt, base.dt)?;
            let integrator = match r.value("integrator", a.integrator, "spectral".to_string())?.as_str() {
                "spectral" => HeatIntegrator::Spectral,
                "finite-difference" => HeatIntegrator::FiniteDifference,
                other => return Err(usage(format!("unknown integrator `{other}`"))),
            };
            (0..traj)
                .map(|i| {
                    SystemSpec::Heat(HeatSpec {
                        height: grid,
                        width: grid,
                        nu,
                        dt,
                        n_steps: steps,
                        seed: traj_seed(i),
                        integrator,
                    })
                })
                .collect()
        }
        "grayscott" => {
            let base = ReactionDiffusionSpec::default();
            let feed = r.value("feed", a.feed, base.feed)?;
            let kill = r.value("kill", a.kill, base.kill)?;
            let dt = r.value("dt", a.dt, base.dt)?;
            let substeps = r.value("substeps", a.substeps, base.substeps)?;
            (0..traj)
                .map(|i| {
                    SystemSpec::GrayScott(ReactionDiffusionSpec {
                        height: grid,
                        width: grid,
                        feed,
                        kill,
                        dt,
                        substeps,
                        n_steps: steps,
                        seed: traj_seed(i),
                        ..base.clone()
                    })
                })
                .collect()
        }
        other => return Err(usage(format!("unknown system `{other}` (expected heat or grayscott)"))),
    };
    let m = make_dataset(&specs, fraction, &out)?;
    r.echo(&out)?;
    println!(
        "wrote {traj} {system} trajectories of {} frames on a {grid}x{grid} grid to {}",
        m.get("frames").unwrap_or("?"),
        out.display()
    );
    println!("train: {}  val: {}", m.get("train").unwrap_or(""), m.get("val").unwrap_or(""));
    Ok(0)
}

fn rand_seed(root: &StreamRng, i: usize) -> u64 {
    use rand::RngCore;
    root.fork(i as u64).next_u64()
}

fn net_config(r: &mut Resolver, f: NetFlags, defaults: &NetConfig) -> Result<NetConfig> {
    let scales = r.value("scales", f.scales, defaults.n_scales)?;
    let levels = r.value("levels", f.levels, defaults.n_levels.max(scales))?;
    if levels < scales {
        return Err(usage(format!("--levels ({levels}) must be at least --scales ({scales})")));
    }
    let cfg = NetConfig {
        n_scales: scales,
        n_levels: levels,
        init_dim: r.value("init_dim", f.init_dim, defaults.init_dim)?,
        blocks_per_level: r.value("blocks", f.blocks, defaults.blocks_per_level)?,
        bottleneck_blocks: r.value("bottleneck_blocks", f.bottleneck_blocks, defaults.bottleneck_blocks)?,
        embed_dim: r.value("embed_dim", f.embed_dim, defaults.embed_dim)?,
        channel_cap: r.value("channel_cap", f.channel_cap, defaults.channel_cap)?,
        groups: r.value("groups", f.groups, defaults.groups)?,
        context_len: r.value("context", f.context, defaults.context_len)?,
        ..defaults.clone()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn train(a: Train) -> Result<u8> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let data = required_path(&mut r, "data", a.data)?;
    let out = required_path(&mut r, "out", a.out)?;
    let mut net = net_config(&mut r, a.net, &NetConfig::default())?;
    let d = TrainConfig::default();
    let wavelet: Wavelet = r.value("wavelet", a.wavelet, "haar".to_string())?.parse()?;
    let averaging: LossAveraging = r.value("averaging", a.averaging, d.averaging.to_string())?.parse()?;
    let lambdas = match r.optional("lambdas", a.lambdas)? {
        Some(s) => parse_list("lambdas", &s)?,
        None => Vec::new(),
    };
    let cfg = TrainConfig {
        epochs: r.value("epochs", a.epochs, d.epochs)?,
        warmup: r.value("warmup", a.warmup, d.warmup)?,
        batch: r.value("batch", a.batch, d.batch)?,
        clip: r.value("clip", a.clip, d.clip)?,
        eta_min: r.value("eta_min", a.eta_min, d.eta_min)?,
        seed: r.seed(a.common.seed)?,
        lambdas,
        wavelet,
        averaging,
        adam: AdamConfig {
            lr: r.value("lr", a.lr, d.adam.lr)?,
            weight_decay: r.value("weight_decay", a.weight_decay, d.adam.weight_decay)?,
            ..d.adam
        },
        steps_per_epoch: r.optional("steps_per_epoch", a.steps_per_epoch)?,
        max_val_windows: r.optional("val_windows", a.val_windows)?,
        ..d
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    cfg.weights(net.n_scales).map_err(|e| usage(e.to_string()))?;

    let ds = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    let (c, h, w) = ds.frame_shape();
    net.channels = c;
    net.kappa_dim = ds.kappa_dim();
    net.check_grid(h, w).map_err(|e| usage(format!("grid must be divisible by 2^levels: {e}")))?;
    r.echo(&out)?;
    let result = fit(&ds, &net, &cfg, Some(&out))?;
    let last = result.curve.last().expect("epochs >= 1");
    println!(
        "trained {} parameters for {} steps; best epoch {} (val {:.6}), final train {:.6}",
        result.best.param_count(),
        result.steps,
        result.best_epoch,
        result.curve[result.best_epoch].val.total,
        last.train.total
    );
    println!(
        "probe loss {:.6} -> {:.6}",
        result.probe_initial.total, result.probe_final.total
    );
    Ok(0)
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join("checkpoint.txt").exists() {
        p.to_path_buf()
    } else {
        p.join("checkpoint")
    }
}

fn load_model(p: &Path) -> Result<(VelocityNet, Wavelet)> {
    let dir = checkpoint_dir(p);
    let (net, m) =
        VelocityNet::load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let wavelet = m.get("train.wavelet").unwrap_or("haar").parse()?;
    Ok((net, wavelet))
}

struct Start {
    initial: Vec<Field>,
    truth: Option<Vec<Field>>,
    kappa: Vec<f64>,
}

fn start_window(ds: &Dataset, net: &VelocityNet, traj: usize, start: usize, steps: usize) -> Result<Start> {
    let cfg = net.config();
    let (c, h, w) = ds.frame_shape();
    if cfg.channels != c || cfg.kappa_dim != ds.kappa_dim() {
        return Err(wfm_core::Error::Shape(format!(
            "checkpoint expects {} channels and {} parameters, dataset has {c} and {}",
            cfg.channels,
            cfg.kappa_dim,
            ds.kappa_dim()
        ))
        .into());
    }
    cfg.check_grid(h, w)?;
    if traj >= ds.trajectories.len() {
        return Err(usage(format!("--traj {traj} out of range ({} trajectories)", ds.trajectories.len())));
    }
    let l = cfg.context_len;
    let len = ds.trajectories[traj].len();
    if start < l || start >= len {
        return Err(usage(format!("--start must lie in {l}..{len}, got {start}")));
    }
    let std = ds.standardized(traj)?;
    let raw = &ds.trajectories[traj];
    let truth = (start + steps < len).then(|| raw.frames()[start + 1..=start + steps].to_vec());
    Ok(Start {
        initial: std.frames()[start - l..=start].to_vec(),
        truth,
        kappa: raw.params().values().to_vec(),
    })
}

fn model_name(net: &VelocityNet, wavelet: Wavelet) -> String {
    format!("wfm-J{}-{}", net.config().n_scales, wavelet)
}

pub fn rollout(a: Rollout) -> Result<u8> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let ckpt = required_path(&mut r, "checkpoint", a.checkpoint)?;
    let data = required_path(&mut r, "data", a.data)?;
    let out = required_path(&mut r, "out", a.out)?;
    let steps = r.value("steps", a.steps, 8usize)?;
    let members = r.value("members", a.members, DEFAULT_MEMBERS)?;
    let euler = r.value("euler_steps", a.euler_steps, DEFAULT_EULER_STEPS)?;
    let seed = r.seed(a.common.seed)?;
    let (net, wavelet) = load_model(&ckpt)?;
    let ds = Dataset::load(&data)?;
    let traj = r.value("traj", a.traj, ds.val.first().copied().unwrap_or(0))?;
    let start = r.value("start", a.start, net.config().context_len)?;
    let sampler = SamplerConfig {
        n_steps: euler,
        members,
        seed,
        member_seeds: None,
    };
    sampler.validate().map_err(|e| usage(e.to_string()))?;
    let s = start_window(&ds, &net, traj, start, steps)?;
    let bank = FilterBank::new(wavelet)?;
    let mut forecast = run_rollout(
        &net,
        &s.initial,
        &s.kappa,
        steps,
        &sampler,
        &bank,
        net.config().n_scales,
        Some(&ds.standardizer),
    )?;
    forecast.set_model(model_name(&net, wavelet));
    let forecast = match s.truth {
        Some(t) => forecast.with_truth(t)?,
        None => forecast,
    };
    forecast.save(&out)?;
    r.echo(&out)?;
    let failed = forecast.meta().failures.iter().filter(|f| f.is_some()).count();
    println!(
        "rollout of {steps} steps, {members} members, {euler} Euler steps written to {} ({failed} failed members)",
        out.display()
    );
    Ok(0)
}

pub fn eval(a: Eval) -> Result<u8> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let dir = required_path(&mut r, "forecast", a.forecast)?;
    let forecast = EnsembleForecast::load(&dir).with_context(|| format!("reading forecast {}", dir.display()))?;
    let out = r
        .optional("out", path_flag(a.out))?
        .map(PathBuf::from)
        .unwrap_or_else(|| dir.clone());
    let windows = r.value("windows", a.windows, format!("1:{}", forecast.steps()))?;
    let windows = Window::parse_list(&windows).map_err(|e| usage(e.to_string()))?;
    let bands = match r.optional("bands", a.bands)? {
        Some(s) => Some(BandSpec::new(parse_list("bands", &s)?).map_err(|e| usage(e.to_string()))?),
        None => None,
    };
    let mode = match r.value("coherence", a.coherence, "ensemble-mean".to_string())?.as_str() {
        "ensemble-mean" => CoherenceMode::EnsembleMean,
        "member-average" => CoherenceMode::MemberAverage,
        other => return Err(usage(format!("unknown coherence mode `{other}`"))),
    };
    let report = evaluate(&forecast, bands.as_ref(), &windows, mode)?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("metrics.csv"), report.to_csv())?;
    std::fs::write(out.join("metrics.json"), report.to_json())?;
    r.echo(&out)?;
    for row in report.aggregates() {
        println!(
            "{:<15} ch{} {:<5} {} {:.6e}",
            row.metric,
            row.channel,
            row.band.as_deref().unwrap_or("-"),
            row.window.as_deref().unwrap_or(""),
            row.value
        );
    }
    if report.max_coherence_excursion > wfm_core::metrics::COHERENCE_EXCURSION_TOL {
        eprintln!(
            "warning: coherence exceeded 1 by {:.3e} before clamping",
            report.max_coherence_excursion
        );
    }
    Ok(0)
}

pub fn wavelet_inspect(a: WaveletInspect) -> Result<u8> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let path = required_path(&mut r, "field", a.field)?;
    let wavelet: Wavelet = r.value("wavelet", a.wavelet, "haar".to_string())?.parse()?;
    let levels = r.value("levels", a.levels, 3usize)?;
    let raw = read_tensor(&path)?;
    let (c, h, w) = match raw.shape[..] {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(usage(format!("field must have shape (H, W) or (C, H, W), got {:?}", raw.shape))),
    };
    let field = Field::new(c, h, w, raw.data.to_f64())?;
    let bank = FilterBank::new(wavelet)?;
    let pyr = dwt_multiscale(&field, &bank, levels)?;
    let back = idwt_multiscale(&pyr, &bank)?;
    let recon = field
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let bands = pyr.band_energies();
    let total: f64 = bands.iter().map(|b| b.energy).sum();
    println!("{wavelet}, J = {levels}, field {c}x{h}x{w}, energy {total:.6e}");
    println!("scale band fraction");
    let mut sum = 0.0;
    for b in &bands {
        let frac = if total > 0.0 { b.energy / total } else { 0.0 };
        sum += frac;
        println!("{:>5} {:<4} {:.12}", b.scale, BAND_NAMES[b.band], frac);
    }
    println!("fraction sum {sum:.15}");
    println!("reconstruction max error {recon:.3e}");
    Ok(0)
}

pub fn grad_check(a: GradCheck) -> Result<u8> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let small = NetConfig {
        init_dim: 8,
        blocks_per_level: 1,
        bottleneck_blocks: 1,
        embed_dim: 16,
        channel_cap: 2,
        ..NetConfig::default()
    };
    let mut net = net_config(&mut r, a.net, &small)?;
    net.kappa_dim = r.value("kappa_dim", a.kappa_dim, 1usize)?;
    let d = GradCheckConfig::default();
    let grid = r.value("grid", a.grid, d.height)?;
    let cfg = GradCheckConfig {
        n_params: r.value("params", a.params, d.n_params)?,
        n_inputs: r.value("inputs", a.inputs, d.n_inputs)?,
        tol: r.value("tol", a.tol, d.tol)?,
        seed: r.seed(a.common.seed)?,
        height: grid,
        width: grid,
        corrupt: a.corrupt,
        ..d
    };
    net.check_grid(grid, grid).map_err(|e| usage(e.to_string()))?;
    if let Some(out) = r.optional("out", path_flag(a.out))? {
        r.echo(Path::new(&out))?;
    }
    let report = run_grad_check(&net, &cfg)?;
    let worst = report.worst().context("nothing was checked")?;
    println!(
        "checked {} parameters and {} input coefficients",
        report.param_entries(),
        report.entries.len() - report.param_entries()
    );
    println!(
        "max relative error {:.3e} (tolerance {:.1e}); worst: {}[{}] analytic {:.6e} numeric {:.6e}",
        worst.rel_error, report.tol, worst.name, worst.index, worst.analytic, worst.numeric
    );
    if report.passed() {
        println!("PASS");
        Ok(0)
    } else {
        println!("FAIL");
        Ok(1)
    }
}

pub fn profile(a: Profile) -> Result<u8> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let ckpt = required_path(&mut r, "checkpoint", a.checkpoint)?;
    let data = required_path(&mut r, "data", a.data)?;
    let steps = r.value("steps", a.steps, 8usize)?;
    let members = r.value("members", a.members, DEFAULT_MEMBERS)?;
    let euler = r.value("euler_steps", a.euler_steps, DEFAULT_EULER_STEPS)?;
    let seed = r.seed(a.common.seed)?;
    let label = r.value("label", a.label, "run".to_string())?;
    let baseline = match r.optional("speedup", path_flag(a.speedup))? {
        Some(p) => {
            let p = PathBuf::from(p);
            if !p.exists() {
                return Err(usage(format!("baseline report {} does not exist", p.display())));
            }
            Some(ProfileReport::load(&p)?)
        }
        None => None,
    };
    let out = r.optional("out", path_flag(a.out))?.map(PathBuf::from);
    let (net, wavelet) = load_model(&ckpt)?;
    let ds = Dataset::load(&data)?;
    let traj = r.value("traj", a.traj, ds.val.first().copied().unwrap_or(0))?;
    let s = start_window(&ds, &net, traj, net.config().context_len, steps)?;
    let sampler = SamplerConfig {
        n_steps: euler,
        members,
        seed,
        member_seeds: None,
    };
    sampler.validate().map_err(|e| usage(e.to_string()))?;
    let bank = FilterBank::new(wavelet)?;
    let (mut report, _) = profile_rollout(
        &label,
        &net,
        &s.initial,
        &s.kappa,
        steps,
        &sampler,
        &bank,
        net.config().n_scales,
        Some(&ds.standardizer),
    )?;
    if let Some(b) = &baseline {
        report.compare_to(b);
    }
    print!("{}", report.to_manifest().to_text());
    if let Some(out) = out {
        r.echo(&out)?;
        report.save(&out.join("profile.txt"))?;
    }
    Ok(0)
}
