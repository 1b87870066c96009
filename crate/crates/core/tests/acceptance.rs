//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! The pipeline criteria generate their datasets from the TOML files under
//! `configs/`, the same ones the command line can be pointed at.

mod common;

use std::time::{Duration, Instant};

use biaslens::bd2a::{solve_directions, Mat, Polarity, ScatterPair};
use biaslens::biasgen::{generate, GenConfig};
use biaslens::config::PipelineConfig;
use biaslens::dataset::Label;
use biaslens::pipeline::{run_experiment, ExperimentOptions, ExperimentReport, TiledData};
use common::{gradient_check, oracle, random_pair, stationarity, to_na};
use nalgebra::DVector;

const NULL_SET: &str = include_str!("../configs/null.toml");
const DETECT_SET: &str = include_str!("../configs/stripe.toml");
const BIASED_SET: &str = include_str!("../configs/stripe_biased.toml");

struct Verdict {
    id: u8,
    pass: bool,
    detail: String,
}

impl Verdict {
    fn print(&self) {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2}: {tag}  {}", self.id, self.detail);
    }
}

const TRIALS: u64 = 100;

fn trial_dim(t: u64) -> usize {
    3 + (t % 6) as usize
}

fn leading_pair_equivalence() -> Verdict {
    let start = Instant::now();
    let (mut worst_l, mut worst_phi) = (0.0f64, 0.0f64);
    for t in 0..TRIALS {
        let k = trial_dim(t);
        let p = random_pair(1_000 + t, k);
        let b = solve_directions(&p, 1).unwrap();
        let o = oracle(&p, 1);
        worst_l = worst_l.max((b.lambdas[0] - o.lambdas[0]).abs() / o.lambdas[0].abs().max(1e-300));
        // both vectors are unit length in the S_reg metric; compare up to sign
        let mine = DVector::from_column_slice(&b.phi[0]);
        let err = (&mine - &o.first).norm().min((&mine + &o.first).norm()) / o.first.norm();
        worst_phi = worst_phi.max(err);
    }
    let elapsed = start.elapsed();
    Verdict {
        id: 1,
        pass: worst_l <= 1e-8 && worst_phi <= 1e-8 && elapsed < Duration::from_secs(5),
        detail: format!(
            "{TRIALS} trials K in 3..=8: worst lambda rel err {worst_l:.1e}, worst phi rel err {worst_phi:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn diag(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { 0.0 })
}

fn constraint_suite() -> Verdict {
    let (mut norm_res, mut conj_res) = (0.0f64, 0.0f64);
    let mut monotone = true;
    for t in 0..TRIALS {
        let k = trial_dim(t);
        let p = random_pair(1_000 + t, k);
        let b = solve_directions(&p, k).unwrap();
        let s = to_na(&p.s_self_reg());
        let phis: Vec<DVector<f64>> = b.phi.iter().map(|f| DVector::from_column_slice(f)).collect();
        for i in 0..k {
            norm_res = norm_res.max((phis[i].dot(&(&s * &phis[i])) - 1.0).abs());
            for j in 0..i {
                conj_res = conj_res.max(phis[i].dot(&(&s * &phis[j])).abs());
            }
        }
        let scale = b.lambdas[0].abs().max(1.0);
        monotone &= b.lambdas.windows(2).all(|w| w[1] <= w[0] + 1e-12 * scale);
    }

    let p = ScatterPair {
        s_self: diag(&[1.0, 2.0, 4.0]),
        s_cross: diag(&[8.0, 2.0, 1.0]),
        mean_self: vec![0.0; 3],
        polarity: Polarity::Positive,
        n_self: 3,
        n_other: 3,
    };
    let b = solve_directions(&p, 3).unwrap();
    let r = b.ridge;
    // the solver works on S_self + ridge I, so the exact answer carries the ridge
    let exact = [8.0 / (1.0 + r), 2.0 / (2.0 + r), 1.0 / (4.0 + r)];
    let nominal = [8.0, 1.0, 0.25];
    let exact_err = b.lambdas.iter().zip(exact).map(|(l, e)| (l - e).abs()).fold(0.0, f64::max);
    let nominal_err = b.lambdas.iter().zip(nominal).map(|(l, e)| (l - e).abs()).fold(0.0, f64::max);
    // c / s - c / (s + r) <= lambda * r / s, largest for the first pair
    let nominal_ok = nominal_err <= 8.0 * r;

    Verdict {
        id: 2,
        pass: norm_res <= 1e-8 && conj_res <= 1e-8 && monotone && exact_err <= 1e-10 && nominal_ok,
        detail: format!(
            "k = K on {TRIALS} trials: normalization {norm_res:.1e}, conjugacy {conj_res:.1e}, nonincreasing {monotone}; \
             diagonal example {:?} vs ridged closed form err {exact_err:.1e} (ridge {r:.2e}, off (8, 1, 0.25) by {nominal_err:.1e})",
            b.lambdas
        ),
    }
}

fn stationarity_check() -> Verdict {
    let mut worst = 0.0f64;
    for t in 0..TRIALS {
        let k = trial_dim(t);
        let p = random_pair(1_000 + t, k);
        let b = solve_directions(&p, k).unwrap();
        for i in 0..k {
            worst = worst.max(stationarity(&p, &b.phi[..=i], b.lambdas[i]));
        }
    }
    Verdict {
        id: 3,
        pass: worst <= 1e-8,
        detail: format!("worst scaled residual of 2X phi - 2 lambda S phi - sum mu_i S phi_i over {TRIALS} trials: {worst:.1e}"),
    }
}

fn gradient() -> Verdict {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for (channels, label, seed) in [(1, Label::Positive, 21), (1, Label::Negative, 22), (3, Label::Positive, 23)] {
        let (w, f) = gradient_check(channels, label, seed);
        worst = worst.max(w);
        failures += f.len();
    }
    Verdict {
        id: 4,
        pass: failures == 0,
        detail: format!("worst relative error {worst:.1e}, {failures} probes at or above 1e-4"),
    }
}

fn experiment(gen_toml: &str, seed: u64, opts: &ExperimentOptions) -> (ExperimentReport, Duration) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut g = GenConfig::from_toml(gen_toml).unwrap();
    g.seed = seed;
    generate(&g, dir.path()).unwrap();
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let data = TiledData::load(dir.path(), &cfg).unwrap();
    let (r, _) = run_experiment(&data, &cfg, opts).unwrap();
    (r, start.elapsed())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("null".into(), |x| format!("{x:.3}"))
}

fn null_calibration() -> Verdict {
    let (r, t) = experiment(NULL_SET, 0, &ExperimentOptions::default());
    let acc = r.klotski_test_accuracy;
    Verdict {
        id: 5,
        pass: acc.is_some_and(|a| (0.45..=0.55).contains(&a)) && t < Duration::from_secs(600),
        detail: format!(
            "rho_p = rho_n: KlotskiNet held-out accuracy {} (want [0.45, 0.55]), pipeline {:.0}s",
            fmt(acc),
            t.as_secs_f64()
        ),
    }
}

fn detection() -> Verdict {
    let opts = ExperimentOptions {
        artifact: Some("stripe".into()),
        ..ExperimentOptions::default()
    };
    let (r, _) = experiment(DETECT_SET, 0, &opts);
    let acc = r.klotski_test_accuracy;
    let auc = r.separation_auc;
    Verdict {
        id: 6,
        pass: acc.is_some_and(|a| a >= 0.75) && auc.is_some_and(|a| a >= 0.9),
        detail: format!(
            "stripe 0.9/0.1: KlotskiNet accuracy {} (want >= 0.75), separation AUC of phi_1 {} (want >= 0.9)",
            fmt(acc),
            fmt(auc)
        ),
    }
}

fn biased_runs() -> Vec<Verdict> {
    let full = ExperimentOptions {
        artifact: Some("stripe".into()),
        theta_sweep: vec![0.02, 0.06, 0.12],
        baselines: true,
        debias: true,
    };
    let (r, _) = experiment(BIASED_SET, 0, &full);

    let acc = r.drop.drop.accuracy;
    let auc = r.drop.drop.roc_auc;
    let trend: Vec<Option<f64>> = r.theta_sweep.iter().map(|(_, d)| d.drop.accuracy).collect();
    let nondecreasing = trend.iter().all(Option::is_some)
        && trend.windows(2).all(|w| w[1].unwrap() >= w[0].unwrap());
    let c7 = Verdict {
        id: 7,
        pass: acc.is_some_and(|a| a >= 0.10) && auc.is_some_and(|a| a > 0.0) && nondecreasing,
        detail: format!(
            "theta 0.12, k_used 5: accuracy drop {} (want >= 0.10), AUC drop {} (want > 0); drops at theta 0.02/0.06/0.12 = [{}]",
            fmt(acc),
            fmt(auc),
            trend.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(", ")
        ),
    };

    let d = r.debias.as_ref().unwrap();
    let before = d.biased_model.drop.accuracy;
    let after = d.debiased_model.drop.accuracy;
    let c8 = Verdict {
        id: 8,
        pass: matches!((before, after), (Some(b), Some(a)) if a < b),
        detail: format!(
            "removed {} training samples at theta 0.05: biased-split accuracy drop {} -> {}",
            d.removed,
            fmt(before),
            fmt(after)
        ),
    };

    let baselines = ExperimentOptions {
        baselines: true,
        ..ExperimentOptions::default()
    };
    let mut means = vec![r.mean_sweep_drop.clone()];
    for seed in 1..5 {
        means.push(experiment(BIASED_SET, seed, &baselines).0.mean_sweep_drop);
    }
    let avg = |fam: &str| means.iter().map(|m| m[fam]).sum::<f64>() / means.len() as f64;
    let (bd, pca, coord) = (avg("bd2a"), avg("pca"), avg("coordinate"));
    let per_seed: Vec<String> = means
        .iter()
        .map(|m| format!("({:.3}, {:.3}, {:.3})", m["bd2a"], m["pca"], m["coordinate"]))
        .collect();
    let c9 = Verdict {
        id: 9,
        pass: bd - pca >= 0.0 && pca - coord >= 0.0,
        detail: format!(
            "mean per-direction drop over 5 seeds: bd2a {bd:.3}, pca {pca:.3}, coordinate {coord:.3}; per seed {}",
            per_seed.join(" ")
        ),
    };
    vec![c7, c8, c9]
}

fn determinism() -> Verdict {
    use std::process::Command;
    let gen = "seed = 9\nn_train = 80\nn_val = 20\nn_test = 60\nheight = 40\nwidth = 40\n";
    let pipe = "embed_dim = 12\nk_directions = 8\nk_used = 3\nepochs = 3\nmil_epochs = 3\n";
    let run = |dir: &std::path::Path| {
        std::fs::write(dir.join("gen.toml"), gen).unwrap();
        std::fs::write(dir.join("pipe.toml"), pipe).unwrap();
        let stages: [&[&str]; 10] = [
            &["generate", "--gen-config", "gen.toml", "--out", "data"],
            &["train-klotski", "--data", "data"],
            &["embed", "--data", "data", "--split", "train"],
            &["embed", "--data", "data", "--split", "test"],
            &["bd2a", "--polarity", "both"],
            &["select"],
            &["train-mil", "--data", "data"],
            &["eval", "--data", "data"],
            &["sweep", "--data", "data"],
            &["curve"],
        ];
        for s in stages {
            let status = Command::new(env!("CARGO_BIN_EXE_biaslens"))
                .current_dir(dir)
                .env("BIASLENS_LOG", "error")
                .args(["--config", "pipe.toml", "--seed", "9", "--out", "w"])
                .args(s)
                .status()
                .unwrap();
            assert!(status.success(), "{s:?}");
        }
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    let files = [
        "w/klotski.blsc",
        "w/mil.blsc",
        "w/embeddings_train.blem",
        "w/embeddings_test.blem",
        "w/directions_positive.bldb",
        "w/directions_negative.bldb",
        "w/split.json",
        "w/report.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    Verdict {
        id: 10,
        pass: differing.is_empty(),
        detail: format!("{} artifacts compared across two CLI runs, differing: {differing:?}", files.len()),
    }
}

fn main() {
    // runs without the libtest harness so the verdicts always reach stdout;
    // a name filter that does not match skips the run, as libtest would
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut verdicts = Vec::new();
    for f in [leading_pair_equivalence, constraint_suite, stationarity_check, gradient] {
        let v = f();
        v.print();
        verdicts.push(v);
    }
    for f in [null_calibration, detection] {
        let v = f();
        v.print();
        verdicts.push(v);
    }
    for v in biased_runs() {
        v.print();
        verdicts.push(v);
    }
    let v = determinism();
    v.print();
    verdicts.push(v);

    let failed: Vec<u8> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", verdicts.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
