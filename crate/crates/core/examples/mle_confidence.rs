//! Follower-parameter MLE, confidence set and the single-policy rank failure.
use quantal::game::{stream_rng, LeaderPolicy, PublicInfo};
use quantal::harness::{generate_offline_dataset, offline_benchmark, online_benchmark, PolicySampler};
use quantal::mle::{
    beta_linear, confidence_set, covariance_data, fit_mle_myopic, rank_diagnostic, ChoiceData, FitOptions, SetOptions,
};
use quantal::planner::PrescriptionGrid;
use quantal::response::advantage_bound;

fn centered(theta: &[f64]) -> Vec<f64> {
    let mean = theta.iter().sum::<f64>() / theta.len() as f64;
    theta.iter().map(|x| x - mean).collect()
}

fn main() -> quantal::Result<()> {
    let bench = online_benchmark();
    let (game, info) = (&bench.game, &bench.info);
    let grid = PrescriptionGrid::for_dims(game.dims(), 0)?;
    let eta = game.rationality();
    let theta_star = &bench.params.follower_params[0];
    for t in [100, 1000, 10000] {
        let ds = generate_offline_dataset(game, &PolicySampler::GridPerState(grid.clone()), t, 1)?;
        let data = ChoiceData::from_dataset(&ds, &info.features, 0, eta);
        let fit = fit_mle_myopic(&data, FitOptions::default(), None)?;
        let beta = beta_linear(1.0, info.features.dim(), game.dims().horizon, eta, t, 0.1);
        let opts = SetOptions::new(10.0, 1.0 / eta + advantage_bound(game));
        let set = confidence_set(&data, &fit, beta, opts, &mut stream_rng(1, 0))?;
        // features sum to one, so theta is identified only up to a constant shift
        println!(
            "T = {t:>5}: centered theta_hat {:.3?} (truth {:.3?}), {} iterations, truth in set: {}",
            centered(&fit.theta),
            centered(theta_star),
            fit.iterations,
            set.contains(&data, theta_star)?
        );
    }

    // tabular embedding: one fixed policy leaves most directions unidentified
    let game = offline_benchmark();
    let info = PublicInfo::tabular(&game);
    let dims = game.dims();
    let theta = game.follower_reward()[..dims.sab()].to_vec();
    let fixed = PolicySampler::Fixed(LeaderPolicy::random(dims, &mut stream_rng(2, 0)));
    let diverse = PolicySampler::GridPerState(PrescriptionGrid::for_dims(dims, 0)?);
    for (name, sampler) in [("fixed policy", fixed), ("diverse policies", diverse)] {
        let ds = generate_offline_dataset(&game, &sampler, 500, 3)?;
        let data = ChoiceData::from_dataset(&ds, &info.features, 0, game.rationality());
        let rank = rank_diagnostic(&covariance_data(&theta, &data), &info.features, 0, &[0, 1]);
        println!(
            "{name:>16}: rank {}/{}, null {} (structural {}), deficient {}",
            rank.rank, rank.dim, rank.null_dim, rank.structural_null_dim, rank.deficient
        );
    }
    Ok(())
}
