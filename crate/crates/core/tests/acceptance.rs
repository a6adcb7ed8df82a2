//! Acceptance gate. Each test prints one `PASS`/`FAIL` line (written straight
//! to stderr so it survives output capture) and then asserts.

use quantal::game::{make_random_game, stream_rng, Dims, LeaderPolicy, MarkovGame};
use quantal::harness::{
    generate_offline_dataset, mle_benchmark, offline_benchmark, online_trace, pessimism_valid, quantile, run_cell,
    Algorithm, AlgorithmConfig, BetaSpec, ExperimentConfig, GameSource, PolicySampler, SweepConfig,
};
use quantal::mle::{beta_linear, covariance_data, fit_mle_myopic, rank_diagnostic, ChoiceData, FitOptions};
use quantal::offline::Scheme;
use quantal::oracle::{
    brute_force_qse, draw_choices, empirical_coverage, entropy_objective_oracle, run_battery, soft_tables,
    BatteryConfig, CoverageSetup,
};
use quantal::planner::{solve_qse_myopic, PrescriptionGrid};
use quantal::response::{advantage_bound_for, quantal_response};
use rand::Rng;
use rayon::prelude::*;
use std::io::Write;
use std::time::Instant;

fn verdict(id: usize, name: &str, pass: bool, detail: String, started: Instant) -> bool {
    let line = format!(
        "{} [{id:>2}] {name}: {detail} ({:.1}s)\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = (xs.iter().map(|x| x.ln()).collect(), ys.iter().map(|y| y.ln()).collect());
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

fn config(game: GameSource, kind: Algorithm, scheme: Option<Scheme>, beta: BetaSpec, c1: f64, g2: f64) -> ExperimentConfig {
    ExperimentConfig {
        name: "acceptance".into(),
        game,
        algorithm: AlgorithmConfig {
            kind,
            scheme,
            beta,
            beta_scale: 1.0,
            c1,
            gamma2_scale: g2,
            delta: 0.1,
            mesh: 0,
            sample_size: 64,
            class_extra: 5,
            policies: 8,
        },
        sweep: SweepConfig { episodes: vec![1], seeds: vec![0] },
        out: None,
    }
}

#[test]
fn criterion_01_quantal_response_exactness() {
    let t0 = Instant::now();
    let mut rng = stream_rng(101, 0);
    let mut worst_inv: f64 = 0.0;
    let mut worst_ref: f64 = 0.0;
    let mut worst_gain = f64::NEG_INFINITY;
    let mut farsighted = 0;
    for i in 0..100u64 {
        let dims = Dims::new(rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(2..=3), rng.random_range(1..=3));
        let gamma = [0.0, 0.9, 1.0][rng.random_range(0..3)];
        let eta = [0.5, 1.0, 5.0][rng.random_range(0..3)];
        let game = make_random_game(dims, gamma, eta, None, 1000 + i).unwrap();
        let policy = LeaderPolicy::random(dims, &mut rng);
        let sol = quantal_response(&game, &policy).unwrap();
        worst_inv = worst_inv.max(sol.invariant_violation());
        let reference = soft_tables(&game, &policy, game.follower_reward());
        for h in 0..dims.horizon {
            for s in 0..dims.states {
                for (x, y) in sol.q_row(h, s).iter().zip(reference.q_row(h, s)) {
                    worst_ref = worst_ref.max((x - y).abs());
                }
                for (x, y) in sol.nu_row(h, s).iter().zip(reference.nu_row(h, s)) {
                    worst_ref = worst_ref.max((x - y).abs());
                }
            }
        }
        if gamma == 1.0 {
            farsighted += 1;
            let mesh = if dims.follower_actions <= 2 { 1000 } else { 100 };
            let rep = entropy_objective_oracle(&game, &policy, &sol, mesh, 200, i);
            worst_gain = worst_gain.max(rep.max_row_gain).max(rep.max_joint_gain);
        }
    }
    let pass = worst_inv <= 1e-10 && worst_ref <= 1e-10 && worst_gain <= 1e-4;
    let detail = format!(
        "100 games, invariant {worst_inv:.1e}, reference {worst_ref:.1e}, best objective gain {worst_gain:.1e} over {farsighted} gamma=1 games"
    );
    assert!(verdict(1, "quantal response exactness", pass, detail, t0));
}

#[test]
fn criterion_02_lemma_battery() {
    let t0 = Instant::now();
    let report = run_battery(&BatteryConfig { instances: 1000, seed: 0, tolerance: 1e-9 });
    let violations: usize = report.checks.iter().map(|c| c.violations).sum();
    let worst = report.checks.iter().min_by(|a, b| a.min_slack.total_cmp(&b.min_slack)).unwrap();
    let detail = format!(
        "{} checks, {violations} violations, min slack {:.1e} ({})",
        report.checks.len(),
        worst.min_slack,
        worst.name
    );
    let pass = verdict(2, "lemma battery", report.passed(), detail, t0);
    if !pass {
        let _ = std::io::stderr().write_all(report.slack_table().as_bytes());
    }
    assert!(pass);
}

#[test]
fn criterion_03_exact_qse() {
    let t0 = Instant::now();
    let mut rng = stream_rng(303, 0);
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let dims = Dims::new(rng.random_range(1..=2), 2, 2, rng.random_range(1..=2));
        let eta = [0.5, 1.0, 5.0][rng.random_range(0..3)];
        let game = make_random_game(dims, 0.0, eta, None, 3000 + i).unwrap();
        let grid = PrescriptionGrid::for_dims(dims, 2).unwrap();
        let (_, j_dp) = solve_qse_myopic(&game, &grid).unwrap();
        let (_, j_bf) = brute_force_qse(&game, &grid).unwrap();
        worst = worst.max((j_dp - j_bf).abs());
    }
    let pass = worst <= 1e-9;
    assert!(verdict(3, "exact QSE", pass, format!("50 games, max |J_dp - J_bf| = {worst:.1e}"), t0));
}

#[test]
fn criterion_04_mle_rate() {
    let t0 = Instant::now();
    let bench = mle_benchmark();
    let ts = [250usize, 1000, 4000];
    let mut setup = CoverageSetup {
        nb: 3,
        d: 3,
        eta: bench.game.rationality(),
        theta_star: bench.theta_star.clone(),
        designs: bench.designs(50, 4),
        samples: 0,
        beta: 0.0,
        fit: FitOptions::default(),
        set_samples: 0,
        c_eta: 1.0,
    };
    let mut medians = Vec::new();
    for &t in &ts {
        setup.samples = t;
        let errs: Vec<f64> = (0..20u64)
            .into_par_iter()
            .map(|seed| {
                let data = draw_choices(&setup, 40_000 + seed);
                let fit = fit_mle_myopic(&data, setup.fit, None).unwrap();
                let sigma = covariance_data(&setup.theta_star, &data);
                let diff = nalgebra::DVector::from_iterator(3, fit.theta.iter().zip(&setup.theta_star).map(|(a, b)| a - b));
                (diff.transpose() * &sigma * &diff)[(0, 0)].max(0.0).sqrt()
            })
            .collect();
        medians.push(median(errs));
    }
    let xs: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let s = slope(&xs, &medians);
    let pass = s <= -0.35;
    let detail = format!("median Sigma-norm error {medians:.4?} at T = {ts:?}, log-log slope {s:.3}");
    assert!(verdict(4, "MLE rate", pass, detail, t0));
}

#[test]
fn criterion_05_confidence_coverage() {
    let t0 = Instant::now();
    let bench = mle_benchmark();
    let t = 500;
    let eta = bench.game.rationality();
    let setup = CoverageSetup {
        nb: 3,
        d: 3,
        eta,
        theta_star: bench.theta_star.clone(),
        designs: bench.designs(50, 5),
        samples: t,
        beta: beta_linear(1.0, 3, 1, eta, t, 0.1),
        fit: FitOptions::default(),
        set_samples: 16,
        c_eta: 1.0 / eta + advantage_bound_for(0.0, eta, 1, 3),
    };
    let rep = empirical_coverage(&setup, 200, 55).unwrap();
    let pass = rep.coverage >= 0.9 && rep.accuracy_violations == 0;
    let detail = format!(
        "coverage {}/{} = {:.3}, {} members checked, {} accuracy violations (min slack {:.3})",
        rep.covered, rep.reps, rep.coverage, rep.members_checked, rep.accuracy_violations, rep.min_accuracy_slack
    );
    assert!(verdict(5, "confidence coverage", pass, detail, t0));
}

#[test]
fn criterion_06_pessimism_validity() {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for scheme in [Scheme::S2, Scheme::S3] {
        let cfg = config(
            GameSource::BenchmarkOffline,
            Algorithm::MlePvi,
            Some(scheme),
            BetaSpec::Token("linear".into()),
            1.0,
            1.0,
        );
        let recs: Vec<_> = (0..100u64).into_par_iter().map(|seed| run_cell(&cfg, 200, seed)).collect();
        // J is evaluated exactly, so the Monte Carlo allowance is zero
        let ok = recs.iter().filter(|r| pessimism_valid(r, 1e-9)).count();
        pass &= ok >= 90;
        parts.push(format!("{scheme} {ok}/100"));
    }
    assert!(verdict(6, "pessimism validity", pass, format!("E W_hat <= J(pi_hat): {}", parts.join(", ")), t0));
}

#[test]
fn criterion_07_offline_consistency() {
    let t0 = Instant::now();
    let cfg = config(GameSource::BenchmarkOffline, Algorithm::MlePvi, Some(Scheme::S3), BetaSpec::Token("linear".into()), 0.01, 1e-9);
    let horizon = offline_benchmark().dims().horizon as f64;
    let ts = [100usize, 400, 1600];
    let medians: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let subs: Vec<f64> = (0..20u64).into_par_iter().map(|seed| run_cell(&cfg, t, seed).subopt).collect();
            median(subs)
        })
        .collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let pass = monotone && medians[2] <= 0.15 * horizon;
    let detail = format!("median SubOpt {medians:.4?} at T = {ts:?}, cap {:.2}", 0.15 * horizon);
    assert!(verdict(7, "offline consistency", pass, detail, t0));
}

#[test]
fn criterion_08_online_sublinearity() {
    let t0 = Instant::now();
    let cfg = config(
        GameSource::BenchmarkOnline,
        Algorithm::MleOvi,
        Some(Scheme::S5),
        BetaSpec::Token("linear-online".into()),
        0.1,
        1e-12,
    );
    let horizon = 2000;
    let checkpoints = [250usize, 500, 1000, 2000];
    let traces: Vec<Vec<f64>> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let tr = online_trace(&cfg, horizon, seed).unwrap();
            checkpoints.iter().map(|&t| tr.episodes[t - 1].cum_regret).collect()
        })
        .collect();
    let med: Vec<f64> = (0..checkpoints.len()).map(|k| median(traces.iter().map(|t| t[k]).collect())).collect();
    let xs: Vec<f64> = checkpoints.iter().map(|&t| t as f64).collect();
    let s = slope(&xs, &med);
    let avg_first = med[0] / 250.0;
    let avg_last = med[3] / 2000.0;
    let pass = s <= 0.85 && avg_last <= 0.5 * avg_first;
    let detail = format!(
        "median Reg {med:.3?} at t = {checkpoints:?}, slope {s:.3}, Reg/T {avg_first:.4} -> {avg_last:.4}"
    );
    assert!(verdict(8, "online sublinearity", pass, detail, t0));
}

#[test]
fn criterion_09_farsighted_finite_class() {
    let t0 = Instant::now();
    let cfg = config(GameSource::BenchmarkFarsighted, Algorithm::Omle, None, BetaSpec::Token("farsighted".into()), 1.0, 1.0);
    let ts = [100usize, 250, 500];
    let mut covered = 0;
    let mut avg = Vec::new();
    for &t in &ts {
        let runs: Vec<(bool, f64)> = (0..10u64)
            .into_par_iter()
            .map(|seed| {
                let tr = online_trace(&cfg, t, seed).unwrap();
                (tr.always_covered().unwrap_or(false), tr.regret() / t as f64)
            })
            .collect();
        if t == *ts.last().unwrap() {
            covered = runs.iter().filter(|r| r.0).count();
        }
        avg.push(median(runs.iter().map(|r| r.1).collect()));
    }
    let decreasing = avg.windows(2).all(|w| w[1] < w[0]);
    let pass = covered >= 9 && decreasing;
    let detail = format!("truth covered every episode in {covered}/10 seeds (T=500), median Reg/T {avg:.4?} at T = {ts:?}");
    assert!(verdict(9, "farsighted finite class", pass, detail, t0));
}

fn tabular_rank(game: &MarkovGame, sampler: &PolicySampler) -> quantal::mle::RankDiagnostic {
    let info = quantal::game::PublicInfo::tabular(game);
    let dims = game.dims();
    let ds = generate_offline_dataset(game, sampler, 500, 10).unwrap();
    let data = ChoiceData::from_dataset(&ds, &info.features, 0, game.rationality());
    let theta: Vec<f64> = game.follower_reward()[..dims.sab()].to_vec();
    let sigma = covariance_data(&theta, &data);
    let mut visited: Vec<usize> = ds.episodes.iter().map(|e| e.steps[0].state).collect();
    visited.sort_unstable();
    visited.dedup();
    rank_diagnostic(&sigma, &info.features, 0, &visited)
}

#[test]
fn criterion_10_single_policy_degeneracy() {
    let t0 = Instant::now();
    let game = offline_benchmark();
    let dims = game.dims();
    let mut rng = stream_rng(10, 0);
    let fixed = tabular_rank(&game, &PolicySampler::Fixed(LeaderPolicy::random(dims, &mut rng)));
    let diverse = tabular_rank(&game, &PolicySampler::GridPerState(PrescriptionGrid::for_dims(dims, 0).unwrap()));
    let pass = fixed.deficient && fixed.null_dim >= dims.states && !diverse.deficient;
    let detail = format!(
        "single policy: rank {}/{} null {} flagged {}; diverse policies: null {} flagged {}",
        fixed.rank, fixed.dim, fixed.null_dim, fixed.deficient, diverse.null_dim, diverse.deficient
    );
    assert!(verdict(10, "single-policy degeneracy", pass, detail, t0));
}
