//! Acceptance suite: one PASS/FAIL line per criterion on stdout, non-zero
//! exit if any criterion fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4 8`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mimo_fm::baselines::{max_relative_leakage, wmmse_precoder, zf_precoder, WmmseOptions};
use mimo_fm::evalbench::flops::{flop_count, Algorithm, FlopReport};
use mimo_fm::nn::{FeatureExtractor, ModelHyper, OutputHead, RateRequest, Tensor};
use mimo_fm::phy::{sum_rate, CMatrix, ChannelMatrix, SystemConfig, C64};
use mimo_fm::training::gradcheck::finite_difference_check;
use mimo_fm::training::{
    clamp_weights, combine_gradients, max_rate_request, normalize_weights,
    sample_rate_requirements, Objective,
};
use mimo_fm_cli::stages::{self, EvalReport};
use mimo_fm_cli::RunConfig;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Loads a shipped configuration with every directory moved under `root`.
fn shipped(name: &str, root: &Path, extra: &[String], seed: u64) -> RunConfig {
    let text = std::fs::read_to_string(configs_dir().join(name)).unwrap();
    let mut overrides = vec![
        format!("paths.data_dir={:?}", root.join("data").to_string_lossy()),
        format!(
            "paths.checkpoint_dir={:?}",
            root.join("checkpoints").to_string_lossy()
        ),
        format!(
            "paths.report_dir={:?}",
            root.join("reports").to_string_lossy()
        ),
    ];
    overrides.extend_from_slice(extra);
    RunConfig::resolve(&text, &overrides, Some(seed)).unwrap()
}

fn gaussian_channel(
    n_users: usize,
    n_tx: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> ChannelMatrix {
    let normal = rand_distr::StandardNormal;
    ChannelMatrix::new(CMatrix::from_fn(n_users, n_tx, |_, _| {
        let re: f64 = rng.sample(normal);
        let im: f64 = rng.sample(normal);
        C64::new(re * scale, im * scale)
    }))
    .unwrap()
}

fn criterion_1() -> Outcome {
    let zf = FlopReport::new(Algorithm::Zf, 4, 64, 16).map_err(|e| e.to_string())?;
    let wmmse = FlopReport::new(Algorithm::Wmmse, 4, 64, 16).map_err(|e| e.to_string())?;
    let ours = FlopReport::new(Algorithm::Proposed, 4, 64, 16).map_err(|e| e.to_string())?;
    let ratio = flop_count(Algorithm::Wmmse, 4, 64, 16).map_err(|e| e.to_string())?
        / flop_count(Algorithm::Proposed, 4, 64, 16).map_err(|e| e.to_string())?;
    let ok = (zf.display_millions - 0.014).abs() <= 0.05
        && (wmmse.display_millions - 93.5).abs() <= 0.05
        && (ours.display_millions - 10.8).abs() <= 0.05
        && (8.0..=9.0).contains(&ratio);
    check(
        ok,
        format!(
            "ZF {}M, WMMSE {}M, proposed {}M, ratio {ratio:.2}",
            zf.display_millions, wmmse.display_millions, ours.display_millions
        ),
    )
}

fn criterion_2() -> Outcome {
    let cfg = SystemConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_leak, mut worst_power) = (0f64, 0f64);
    for _ in 0..1000 {
        let h = gaussian_channel(4, 64, 1e-6, &mut rng);
        let sol = zf_precoder(&h, &cfg).map_err(|e| e.to_string())?;
        worst_leak = worst_leak.max(max_relative_leakage(&h, &sol.precoder));
        worst_power = worst_power.max((sol.transmit_power() - cfg.p_tx).abs() / cfg.p_tx);
    }
    check(
        worst_leak <= 1e-9 && worst_power <= 1e-9,
        format!(
            "1000 instances: worst leakage {worst_leak:.2e}, worst power error {worst_power:.2e}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let cfg = SystemConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    let mut below_zf = 0;
    for i in 0..1000 {
        // Spread the SNR over three decades.
        let scale = 10f64.powf(-7.5 + (i % 4) as f64 * 0.5);
        let h = gaussian_channel(4, 64, scale, &mut rng);
        let zf = sum_rate(&h, &zf_precoder(&h, &cfg).map_err(|e| e.to_string())?, &cfg)
            .map_err(|e| e.to_string())?;
        let r = wmmse_precoder(&h, &cfg, WmmseOptions::default()).map_err(|e| e.to_string())?;
        violations += r
            .rate_trace
            .windows(2)
            .filter(|w| w[1] < w[0] - 1e-9)
            .count();
        if r.final_rate() < zf - 1e-9 {
            below_zf += 1;
        }
    }

    let single = SystemConfig {
        n_tx: 16,
        n_users: 1,
        noise_power: 0.5,
        ..SystemConfig::default()
    };
    let h = gaussian_channel(1, 16, 1.0, &mut rng);
    let w = wmmse_precoder(&h, &single, WmmseOptions::default())
        .map_err(|e| e.to_string())?
        .precoder;
    let hv = h.user(0);
    let inner: C64 = hv
        .iter()
        .zip(w.column(0).iter())
        .map(|(a, b)| a.conj() * b)
        .sum();
    let hn = hv.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let wn = w.column(0).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let mrt_error = 1.0 - inner.norm() / (hn * wn);

    let two = SystemConfig {
        n_tx: 2,
        n_users: 2,
        p_tx: 2.0,
        p_rf: 0.0,
        noise_power: 1.0,
    };
    let g2 = 0.5f64;
    let h = ChannelMatrix::new(CMatrix::from_fn(2, 2, |u, i| {
        C64::new(
            if u != i {
                0.0
            } else if u == 0 {
                1.0
            } else {
                g2.sqrt()
            },
            0.0,
        )
    }))
    .unwrap();
    let got = wmmse_precoder(
        &h,
        &two,
        WmmseOptions {
            max_iter: 2000,
            tol: 1e-12,
        },
    )
    .map_err(|e| e.to_string())?
    .final_rate();
    let best = (0..=10_000)
        .map(|k| {
            let p1 = two.p_tx * k as f64 / 10_000.0;
            (1.0 + p1).log2() + (1.0 + g2 * (two.p_tx - p1)).log2()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let grid_gap = (got - best).abs();
    check(
        violations == 0 && below_zf == 0 && mrt_error < 1e-6 && grid_gap < 1e-3,
        format!(
            "1000 instances: {violations} trace decreases, {below_zf} below ZF; MRT direction error {mrt_error:.1e}; \
             grid-search gap {grid_gap:.1e} b/s/Hz"
        ),
    )
}

fn criterion_4() -> Outcome {
    let cfg = SystemConfig {
        n_tx: 4,
        n_users: 2,
        p_tx: 2.0,
        p_rf: 0.5,
        noise_power: 0.1,
    };
    let hyper = ModelHyper {
        embed_dim: 8,
        ffn_dim: 16,
        n_heads: 1,
        n_layers: 1,
        ..ModelHyper::default()
    }
    .with_system(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ext = FeatureExtractor::new(hyper.clone(), &mut rng).map_err(|e| e.to_string())?;
    let head = OutputHead::new(&hyper, &mut rng);
    let hs: Vec<_> = (0..4)
        .map(|_| gaussian_channel(2, 4, 1.0, &mut rng))
        .collect();
    let mixed = vec![
        RateRequest::new(vec![0.4, 1.2]).unwrap(),
        max_rate_request(2),
        RateRequest::new(vec![1.5, 0.0]).unwrap(),
        RateRequest::new(vec![0.8, 0.8]).unwrap(),
    ];
    let rate_energy = finite_difference_check(
        &ext,
        &head,
        &hs,
        &mixed,
        Objective::RateEnergy { mu: 0.9 },
        &cfg,
        1e-5,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    let max_rate = vec![max_rate_request(2); 4];
    let sum_rate = finite_difference_check(
        &ext,
        &head,
        &hs,
        &max_rate,
        Objective::SumRate,
        &cfg,
        1e-5,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    check(
        rate_energy.all_pass() && sum_rate.all_pass(),
        format!(
            "rate/energy objective {}/{} pass (worst {:.1e}); sum-rate objective {}/{} pass (worst {:.1e})",
            rate_energy.checked - rate_energy.failed,
            rate_energy.total,
            rate_energy.worst_relative,
            sum_rate.checked - sum_rate.failed,
            sum_rate.total,
            sum_rate.worst_relative
        ),
    )
}

fn run_stages(cfg: &RunConfig, names: &[&str]) -> Result<(), String> {
    for name in names {
        let r = match *name {
            "gen-data" => stages::gen_data(cfg, true),
            "pretrain" => stages::pretrain(cfg, true),
            "train" => stages::train(cfg, true),
            "adapt" => stages::adapt(cfg, true),
            "eval" => stages::eval(cfg, true),
            "sweep" => stages::sweep(cfg, true),
            other => panic!("unknown stage {other}"),
        };
        r.map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(())
}

fn read_eval(cfg: &RunConfig) -> EvalReport {
    let path = stages::Layout::new(cfg).report(cfg, "eval", "json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Desk-scale pipeline on `desk.toml` for three seeds; shared by criteria 5 and 7.
fn desk_runs() -> Result<Vec<EvalReport>, String> {
    (0..3)
        .map(|seed| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = shipped("desk.toml", dir.path(), &[], seed);
            run_stages(&cfg, &["gen-data", "pretrain", "train", "adapt", "eval"])?;
            Ok(read_eval(&cfg))
        })
        .collect()
}

fn deployment(report: &EvalReport, mode: &str) -> (f64, f64) {
    let d = report
        .deployment
        .iter()
        .find(|d| d.mode == mode)
        .expect("deployment result present");
    (d.report.model, d.report.zf)
}

fn criterion_5(runs: &[EvalReport]) -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let (zero, zf) = deployment(r, "zero_shot");
        let (full, _) = deployment(r, "full");
        let (few, _) = deployment(r, "few_shot");
        ok &= zero >= zf && full >= zero;
        lines.push(format!(
            "seed {seed}: ZF {zf:.3}, zero-shot {zero:.3}, few-shot {few:.3}, full {full:.3}"
        ));
    }
    check(ok && runs.len() >= 3, lines.join("; "))
}

fn criterion_7(runs: &[EvalReport]) -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let off = r.cross_site_off_diagonal_mean.unwrap_or(f64::INFINITY);
        ok &= r.cross_site_diagonal_mean > off;
        lines.push(format!(
            "seed {seed}: diagonal {:.3} vs off-diagonal {off:.3}",
            r.cross_site_diagonal_mean
        ));
    }
    check(ok && runs.len() >= 3, lines.join("; "))
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = shipped("tracking.toml", dir.path(), &[], 0);
    run_stages(&cfg, &["gen-data", "pretrain", "train", "sweep"])?;
    let path = stages::Layout::new(&cfg).report(&cfg, "sweep", "json");
    let summaries: std::collections::BTreeMap<String, mimo_fm::evalbench::SweepSummary> =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let mut ok = true;
    let mut lines = Vec::new();
    for (env, s) in &summaries {
        let err = s.mean_relative_rate_error.unwrap_or(f64::INFINITY);
        let trend = s.energy_trend.unwrap_or(f64::NEG_INFINITY);
        ok &= err < 0.15 && trend > 0.8;
        lines.push(format!(
            "{env}: relative rate error {:.1}%, energy Spearman {trend:.3}",
            100.0 * err
        ));
    }
    check(ok && !summaries.is_empty(), lines.join("; "))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut problems = Vec::new();

    // alpha_e = (R_e - R_e^max)^2 clamped to [1, T]
    let rmax = [10.0, 4.0, 6.0, 3.0];
    let rates = [5.0, 8.0, 0.0, 2.5];
    let w = clamp_weights(&rates, &rmax, 30.0);
    let expected = [25.0, 16.0, 30.0, 1.0];
    if w.iter().zip(&expected).any(|(a, b)| (a - b).abs() > 1e-12) {
        problems.push(format!("clamped weights {w:?}, expected {expected:?}"));
    }
    for _ in 0..1000 {
        let k = rng.gen_range(1..8);
        let rmax: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..40.0)).collect();
        let rates: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..40.0)).collect();
        let t = rng.gen_range(1.0..200.0);
        let w = clamp_weights(&rates, &rmax, t);
        if w.iter().any(|&x| !(1.0..=t).contains(&x)) {
            problems.push(format!("weight outside [1, {t}]: {w:?}"));
            break;
        }
        let sum: f64 = normalize_weights(&w).iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            problems.push(format!("normalized weights sum to {sum}"));
            break;
        }
        let r = rng.gen_range(0.5..40.0);
        let req = sample_rate_requirements(r, 4, &mut rng).unwrap();
        if req.targets().iter().any(|&x| x < 0.0) || req.total() > r * (1.0 + 1e-12) {
            problems.push(format!("request {:?} for rmax {r}", req.targets()));
            break;
        }
    }
    // The requirement sum equals beta * rmax for the drawn beta: replay the
    // draw with the same generator state.
    let mut a = ChaCha8Rng::seed_from_u64(81);
    let mut b = a.clone();
    let req = sample_rate_requirements(12.0, 3, &mut a).unwrap();
    for _ in 0..3 {
        b.gen::<f64>();
    }
    let beta: f64 = b.gen();
    if (req.total() - beta * 12.0).abs() > 1e-12 * 12.0 {
        problems.push(format!(
            "sum {} != beta * rmax {}",
            req.total(),
            beta * 12.0
        ));
    }

    // Phase-two extractor gradient is the plain mean over environments.
    let k = 5;
    let grads: Vec<Vec<Tensor>> = (0..k)
        .map(|_| {
            vec![
                Tensor::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                Tensor::from_vec(1, 4, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            ]
        })
        .collect();
    let refs: Vec<&[Tensor]> = grads.iter().map(|g| g.as_slice()).collect();
    let combined = combine_gradients(&refs, &vec![1.0 / k as f64; k]);
    let mut worst: f64 = 0.0;
    for (t, c) in combined.iter().enumerate() {
        for i in 0..c.len() {
            let mean = grads.iter().map(|g| g[t].data[i]).sum::<f64>() / k as f64;
            worst = worst.max((c.data[i] - mean).abs());
        }
    }
    if worst > 1e-10 {
        problems.push(format!(
            "averaged gradient differs from the mean by {worst:.1e}"
        ));
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("weights, clamp, normalization, request sums and gradient mean (max deviation {worst:.1e})")
        } else {
            problems.join("; ")
        },
    )
}

fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn differing(a: &[(PathBuf, Vec<u8>)], b: &[(PathBuf, Vec<u8>)]) -> Vec<String> {
    let names_a: Vec<_> = a.iter().map(|f| &f.0).collect();
    let names_b: Vec<_> = b.iter().map(|f| &f.0).collect();
    if names_a != names_b {
        return vec![format!("file sets differ: {names_a:?} vs {names_b:?}")];
    }
    a.iter()
        .zip(b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect()
}

fn criterion_9() -> Outcome {
    let config = configs_dir().join("toy.toml");
    let shortened = [
        "train.pretrain_epochs=3",
        "train.epochs=3",
        "adapt.epochs=2",
        "eval.n_eval=100",
        "eval.sweep_points=200",
    ];
    let invoke = |dir: &Path, command: &str| -> Result<(), String> {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mimo-fm"));
        cmd.current_dir(dir).env_remove("MIMO_FM_REPORT_DIR").args([
            "-q",
            "-c",
            config.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        for s in shortened {
            cmd.args(["--set", s]);
        }
        let out = cmd.arg(command).output().unwrap();
        if out.status.success() {
            Ok(())
        } else {
            Err(format!(
                "{command} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            ))
        }
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        invoke(d.path(), "run")?;
    }
    let first = snapshot(dirs[0].path());
    let mut problems = differing(&first, &snapshot(dirs[1].path()));

    // Each stage rerun in place must rewrite exactly the same bytes.
    let stages = ["gen-data", "pretrain", "train", "adapt", "eval", "sweep"];
    for stage in stages {
        invoke(dirs[0].path(), stage)?;
        problems.extend(
            differing(&first, &snapshot(dirs[0].path()))
                .into_iter()
                .map(|f| format!("{stage}: {f}")),
        );
    }
    check(
        problems.is_empty() && !first.is_empty(),
        format!(
            "{} files identical across two full runs and after rerunning each of {} stages in place; {} differences {problems:?}",
            first.len(),
            stages.len(),
            problems.len()
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, Outcome, f64)> = Vec::new();
    let mut timed = |n: u32, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n}: {tag} ({secs:.1}s) {detail}");
        results.push((n, outcome, secs));
    };
    for (n, f) in [
        (1, criterion_1 as fn() -> Outcome),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (8, criterion_8),
    ] {
        if run(n) {
            timed(n, &mut || f());
        }
    }
    if run(5) || run(7) {
        let start = Instant::now();
        let runs = desk_runs();
        let shared = start.elapsed().as_secs_f64();
        println!("desk-scale pipeline, three seeds: {shared:.0}s");
        for (n, f) in [
            (5, criterion_5 as fn(&[EvalReport]) -> Outcome),
            (7, criterion_7),
        ] {
            if run(n) {
                timed(n, &mut || {
                    runs.as_ref().map_err(|e| e.clone()).and_then(|r| f(r))
                });
            }
        }
    }
    if run(6) {
        timed(6, &mut criterion_6);
    }
    if run(9) {
        timed(9, &mut criterion_9);
    }
    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
