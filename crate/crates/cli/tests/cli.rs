use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wfm_core::field::Field;
use wfm_core::metrics::{EnsembleForecast, ForecastMeta};
use wfm_core::tensor_io::{read_tensor, write_tensor, RawTensor};
use wfm_core::Wavelet;

fn wfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wfm"))
        .args(args)
        .env_remove("WFM_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY_NET: &[&str] = &[
    "--scales", "2", "--init-dim", "8", "--blocks", "1", "--bottleneck-blocks", "1", "--embed-dim", "16",
    "--channel-cap", "2", "--epochs", "2", "--warmup", "1", "--batch", "4", "--steps-per-epoch", "2",
];

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--system", "heat", "--grid", "16", "--traj", "5", "--steps", "10", "--seed", "1", "--out", s(dir)];
    args.extend_from_slice(extra);
    wfm(&args)
}

fn train(data: &Path, out: &Path) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(TINY_NET);
    wfm(&args)
}

struct Run {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn trained() -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert_eq!(code(&gen(&data, &[])), 0);
    let o = train(&data, &run);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Run { _tmp: tmp, data, run }
}

#[test]
fn gen_data_writes_files_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = wfm(&["gen-data", "--system", "heat", "--grid", "32", "--traj", "10", "--steps", "64", "--seed", "1", "--out", s(&a)]);
    assert_eq!(code(&o), 0);
    let traj_files = std::fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("traj_"))
        .count();
    assert_eq!(traj_files, 10);
    assert!(a.join("manifest.txt").exists());
    assert!(a.join("config.txt").exists());
    wfm(&["gen-data", "--system", "heat", "--grid", "32", "--traj", "10", "--steps", "64", "--seed", "1", "--out", s(&b)]);
    for i in 0..10 {
        let name = format!("traj_{i:04}.wfmt");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    assert_eq!(std::fs::read(a.join("manifest.txt")).unwrap(), std::fs::read(b.join("manifest.txt")).unwrap());
}

#[test]
fn bad_grid_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = wfm(&["gen-data", "--grid", "33", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid must be divisible by 2^J"));
    let o = wfm(&["gen-data", "--system", "lava", "--out", s(&tmp.path().join("y"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&wfm(&["gen-data", "--no-such-flag"])), 2);
}

#[test]
fn grayscott_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let o = wfm(&["gen-data", "--system", "grayscott", "--grid", "16", "--traj", "2", "--steps", "3", "--substeps", "5", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = std::fs::read_to_string(tmp.path().join("manifest.txt")).unwrap();
    assert!(m.contains("channels=2"));
    assert!(m.contains("kappa_names=F,k"));
}

#[test]
fn train_rejects_levels_below_scales() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, &[]);
    let o = wfm(&["train", "--data", s(&data), "--out", s(&tmp.path().join("r")), "--scales", "3", "--levels", "2"]);
    assert_eq!(code(&o), 2);
    assert!(!tmp.path().join("r").join("checkpoint").exists());
}

#[test]
fn training_is_deterministic_and_single_scale_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, &[]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&train(&data, &a)), 0);
    assert_eq!(code(&train(&data, &b)), 0);
    assert_eq!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(b.join("loss.csv")).unwrap());
    let csv = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let one = tmp.path().join("one");
    let o = wfm(&[
        "train", "--data", s(&data), "--out", s(&one), "--scales", "1", "--levels", "2", "--wavelet", "haar",
        "--init-dim", "8", "--blocks", "1", "--bottleneck-blocks", "1", "--embed-dim", "16", "--channel-cap", "2",
        "--epochs", "2", "--warmup", "1", "--batch", "2", "--steps-per-epoch", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = std::fs::read_to_string(one.join("checkpoint/checkpoint.txt")).unwrap();
    assert!(ck.contains("net.n_scales=1"));
    assert!(std::fs::read_to_string(one.join("loss.csv")).unwrap().starts_with("epoch,lr,train_total,val_total,l1,val_l1"));
}

#[test]
fn echoed_config_replays_training_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, &[]);
    let a = tmp.path().join("a");
    train(&data, &a);
    let b = tmp.path().join("b");
    let o = wfm(&["train", "--config", s(&a.join("config.txt")), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(b.join("loss.csv")).unwrap());
    let pa = std::fs::read(a.join("checkpoint/params/head0.conv.weight.wfmt")).unwrap();
    let pb = std::fs::read(b.join("checkpoint/params/head0.conv.weight.wfmt")).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.txt");
    std::fs::write(&cfg, "seed=7\ngrid=8\n").unwrap();
    let run = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_wfm"));
        c.args(["gen-data", "--traj", "2", "--steps", "2", "--levels", "2", "--out", s(&tmp.path().join(out))]).args(extra);
        match env {
            Some(v) => c.env("WFM_SEED", v),
            None => c.env_remove("WFM_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        std::fs::read_to_string(tmp.path().join(out).join("config.txt")).unwrap()
    };
    assert!(run(&[], Some("5"), "env").contains("seed=5"));
    assert!(run(&["--config", s(&cfg)], Some("5"), "file").contains("seed=7"));
    let flag = run(&["--config", s(&cfg), "--seed", "9", "--grid", "16"], Some("5"), "flag");
    assert!(flag.contains("seed=9") && flag.contains("grid=16"));
    assert!(run(&[], None, "none").contains("seed=0"));
}

#[test]
fn rollout_shapes_defaults_and_determinism() {
    let r = trained();
    let tmp = tempfile::tempdir().unwrap();
    let f1 = tmp.path().join("f1");
    let o = wfm(&["rollout", "--checkpoint", s(&r.run), "--data", s(&r.data), "--out", s(&f1), "--members", "1", "--euler-steps", "1", "--steps", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_tensor(&f1.join("forecast.wfmt")).unwrap();
    assert_eq!(t.shape, vec![1, 3, 1, 16, 16]);

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = wfm(&["rollout", "--checkpoint", s(&r.run), "--data", s(&r.data), "--out", s(d), "--steps", "2", "--seed", "3"]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(std::fs::read(a.join("forecast.wfmt")).unwrap(), std::fs::read(b.join("forecast.wfmt")).unwrap());
    let m = std::fs::read_to_string(a.join("forecast.txt")).unwrap();
    assert!(m.contains("members=8\n"));
    assert!(m.contains("euler_steps=50\n"));
    let c = std::fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(c.contains("members=8\n") && c.contains("euler_steps=50\n"));
}

#[test]
fn rollout_rejects_mismatched_data() {
    let r = trained();
    let tmp = tempfile::tempdir().unwrap();
    let other = tmp.path().join("gs");
    wfm(&["gen-data", "--system", "grayscott", "--grid", "16", "--traj", "2", "--steps", "5", "--substeps", "2", "--out", s(&other)]);
    let o = wfm(&["rollout", "--checkpoint", s(&r.run), "--data", s(&other), "--out", s(&tmp.path().join("f"))]);
    assert_ne!(code(&o), 0);
}

fn ramp(t: usize) -> Field {
    Field::from_fn(1, 8, 8, |_, y, x| ((x + 2 * y + t) as f64 * 0.37).sin())
}

fn save_forecast(dir: &Path, members: Vec<Vec<Field>>, truth: Vec<Field>) {
    let m = members.len();
    let steps = truth.len();
    let meta = ForecastMeta {
        seeds: (0..m as u64).collect(),
        euler_steps: 50,
        wavelet: Wavelet::Haar,
        levels: 1,
        failures: vec![None; m],
        model: "synthetic".into(),
    };
    EnsembleForecast::new(members, Some(truth), meta, (1, 8, 8), steps).unwrap().save(dir).unwrap();
}

#[test]
fn perfect_forecast_scores_zero_and_windows_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let truth: Vec<Field> = (0..4).map(ramp).collect();
    save_forecast(tmp.path(), vec![truth.clone(), truth.clone()], truth);
    let o = wfm(&["eval", "--forecast", s(tmp.path()), "--windows", "1:2,3:4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "{line}");
    }
    for metric in ["vrmse", "crps"] {
        let rows = csv.lines().filter(|l| l.starts_with(&format!("{metric},")) && (l.contains(",01:02,") || l.contains(",03:04,")));
        assert_eq!(rows.count(), 2, "{metric}");
    }
    let coh = csv.lines().filter(|l| l.starts_with("coherence_rmse,") && l.contains(",01:02,")).count();
    assert_eq!(coh, 3);
}

#[test]
fn eval_csv_matches_direct_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let truth: Vec<Field> = (0..3).map(ramp).collect();
    let member = |k: usize| -> Vec<Field> {
        (0..3)
            .map(|t| Field::from_fn(1, 8, 8, |_, y, x| ((x + 2 * y + t) as f64 * 0.37).sin() + 0.1 * ((k * 31 + x * 7 + y * 3 + t) as f64).cos()))
            .collect()
    };
    save_forecast(tmp.path(), (0..3).map(member).collect(), truth);
    assert_eq!(code(&wfm(&["eval", "--forecast", s(tmp.path())])), 0);

    let f = read_tensor(&tmp.path().join("forecast.wfmt")).unwrap().data.to_f64();
    let u = read_tensor(&tmp.path().join("truth.wfmt")).unwrap().data.to_f64();
    let (m, n) = (3usize, 64usize);
    let csv = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let lookup = |metric: &str, lead: usize| -> f64 {
        csv.lines()
            .find(|l| l.starts_with(&format!("{metric},0,{lead},,,")))
            .unwrap()
            .rsplit(',')
            .next()
            .unwrap()
            .parse()
            .unwrap()
    };
    for t in 0..3 {
        let truth = &u[t * n..(t + 1) * n];
        let x = |k: usize, i: usize| f[(k * 3 + t) * n + i];
        let mu = truth.iter().sum::<f64>() / n as f64;
        let var = truth.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
        let mse = (0..n)
            .map(|i| ((0..m).map(|k| x(k, i)).sum::<f64>() / m as f64 - truth[i]).powi(2))
            .sum::<f64>()
            / n as f64;
        let vr = (mse / (var + 1e-6)).sqrt();
        let mut crps = 0.0;
        for i in 0..n {
            let skill: f64 = (0..m).map(|k| (x(k, i) - truth[i]).abs()).sum::<f64>() / m as f64;
            let mut spread = 0.0;
            for a in 0..m {
                for b in 0..m {
                    spread += (x(a, i) - x(b, i)).abs();
                }
            }
            crps += skill - spread / (2.0 * (m * (m - 1)) as f64);
        }
        crps /= n as f64;
        assert!((lookup("vrmse", t + 1) - vr).abs() < 1e-12);
        assert!((lookup("crps", t + 1) - crps).abs() < 1e-12);
    }
    assert_eq!(code(&wfm(&["eval", "--forecast", s(&tmp.path().join("missing"))])), 1);
    assert_eq!(code(&wfm(&["eval", "--forecast", s(tmp.path()), "--windows", "3:1"])), 2);
}

fn inspect(field: &[f64], shape: Vec<usize>, extra: &[&str]) -> String {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("f.wfmt");
    write_tensor(&p, &RawTensor::f64(shape, field.to_vec())).unwrap();
    let mut args = vec!["wavelet-inspect", "--field", s(&p)];
    args.extend_from_slice(extra);
    let o = wfm(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn fraction_lines(out: &str) -> Vec<(usize, String, f64)> {
    out.lines()
        .filter_map(|l| {
            let p: Vec<&str> = l.split_whitespace().collect();
            match p[..] {
                [j, band, f] => Some((j.parse().ok()?, band.to_string(), f.parse().ok()?)),
                _ => None,
            }
        })
        .collect()
}

#[test]
fn wavelet_inspect_reports() {
    let out = inspect(&vec![2.5; 256], vec![16, 16], &["--wavelet", "db2", "--levels", "3"]);
    let lines = fraction_lines(&out);
    for (j, band, f) in &lines {
        if *j == 3 && band == "LL" {
            assert!((f - 1.0).abs() < 1e-12);
        } else {
            assert!(f.abs() < 1e-12);
        }
    }
    let data: Vec<f64> = (0..2 * 32 * 16).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
    let out = inspect(&data, vec![2, 32, 16], &["--wavelet", "db4", "--levels", "2"]);
    let sum: f64 = fraction_lines(&out).iter().map(|l| l.2).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    let err: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("reconstruction max error "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-9);

    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("odd.wfmt");
    write_tensor(&p, &RawTensor::f64(vec![12, 12], vec![0.0; 144])).unwrap();
    assert_eq!(code(&wfm(&["wavelet-inspect", "--field", s(&p), "--levels", "3"])), 2);
}

#[test]
fn grad_check_passes_and_catches_corruption() {
    let o = wfm(&["grad-check"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("checked 200 parameters"));
    let o = wfm(&["grad-check", "--scales", "1", "--params", "10", "--corrupt", "head0.conv.weight"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("worst: head0.conv.weight["));
}

#[test]
fn profile_reports_and_speedup() {
    let r = trained();
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base");
    let args = |out: &Path| {
        vec![
            "profile".to_string(), "--checkpoint".into(), s(&r.run).into(), "--data".into(), s(&r.data).into(),
            "--members".into(), "2".into(), "--euler-steps".into(), "3".into(), "--steps".into(), "4".into(),
            "--out".into(), s(out).into(),
        ]
    };
    let a: Vec<String> = args(&base);
    let o = wfm(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = wfm_core::profile::ProfileReport::load(&base.join("profile.txt")).unwrap();
    assert_eq!(report.steps, 4);
    assert!((report.frames_per_second - report.steps_per_second * 256.0).abs() < 1e-9 * report.frames_per_second);

    let mut b = args(&tmp.path().join("cmp"));
    b.extend(["--speedup".to_string(), s(&base.join("profile.txt")).to_string()]);
    let o = wfm(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("speedup="));

    let mut c = args(&tmp.path().join("bad"));
    c.extend(["--speedup".to_string(), s(&tmp.path().join("nope.txt")).to_string()]);
    assert_eq!(code(&wfm(&c.iter().map(String::as_str).collect::<Vec<_>>())), 2);
}
