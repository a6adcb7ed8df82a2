//! Structural invariants over randomized inputs.

use proptest::prelude::*;
use quantal::game::{make_random_game, stream_rng, Dims, IdentificationConstraint, PublicInfo};
use quantal::harness::{
    farsighted_benchmark_with, generate_offline_dataset, offline_benchmark, policy_class, PolicySampler,
};
use quantal::mle::{confidence_set, fit_mle_myopic, nll_myopic, ChoiceData, FitOptions, SetOptions};
use quantal::offline::{mle_pvi, LinearConfig, Scheme};
use quantal::online::{run_online, Evaluator, OmleLearner, SimulatedEnvironment};
use quantal::planner::PrescriptionGrid;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_dataset_shape(seed in 0u64..10_000, t in 0usize..60) {
        let game = make_random_game(Dims::new(3, 2, 2, 3), 0.5, 1.0, None, seed).unwrap();
        let grid = PrescriptionGrid::for_dims(game.dims(), 0).unwrap();
        let ds = generate_offline_dataset(&game, &PolicySampler::GridPerState(grid), t, seed).unwrap();
        prop_assert_eq!(ds.len(), t);
        for ep in &ds.episodes {
            prop_assert_eq!(ep.steps.len(), 3);
            prop_assert!(ep.policy_id < ds.policies.len());
        }
    }

    #[test]
    fn prop_confidence_members_pass_sublevel_test(seed in 0u64..10_000, beta in 0.5f64..20.0) {
        let game = offline_benchmark();
        let info = PublicInfo::tabular(&game);
        let grid = PrescriptionGrid::for_dims(game.dims(), 0).unwrap();
        let ds = generate_offline_dataset(&game, &PolicySampler::GridPerState(grid), 80, seed).unwrap();
        let data = ChoiceData::from_dataset(&ds, &info.features, 0, 1.0);
        let fit = fit_mle_myopic(&data, FitOptions::default(), None).unwrap();
        let mut opts = SetOptions::new(10.0, 4.0);
        opts.sample_size = 12;
        let set = confidence_set(&data, &fit, beta, opts, &mut stream_rng(seed, 1)).unwrap();
        prop_assert!(set.contains(&data, &set.center).unwrap());
        for theta in &set.theta_sample {
            prop_assert!(nll_myopic(theta, &data).unwrap() <= set.min_nll + beta + 1e-9);
        }
    }

    #[test]
    fn prop_pessimistic_estimate_truncated(seed in 0u64..10_000, t in 0usize..120, si in 0usize..3) {
        let game = offline_benchmark();
        let info = PublicInfo::tabular(&game);
        let dims = game.dims();
        let grid = PrescriptionGrid::for_dims(dims, 0).unwrap();
        let ds = generate_offline_dataset(&game, &PolicySampler::GridPerState(grid.clone()), t, seed).unwrap();
        let scheme = [Scheme::S1, Scheme::S2, Scheme::S3][si];
        let mut cfg = LinearConfig::new(scheme, 5.0, 0.1);
        cfg.sample_size = 6;
        let est = mle_pvi(&info, &ds, &grid, &cfg).unwrap();
        for h in 0..dims.horizon {
            let cap = (dims.horizon - h) as f64;
            for &u in &est.u_hat[h * dims.sab()..(h + 1) * dims.sab()] {
                prop_assert!((0.0..=cap + 1e-12).contains(&u));
            }
        }
    }

    #[test]
    fn prop_constrained_class(seed in 0u64..10_000) {
        let dims = Dims::new(2, 2, 3, 2);
        let b = farsighted_benchmark_with(dims, 4, 3, seed).unwrap();
        let c = IdentificationConstraint::sum_to_half(3);
        for m in &b.models {
            prop_assert!(c.max_residual(dims, m.follower_reward()) <= 1e-10);
        }
        prop_assert_eq!(&b.models[b.true_index], &b.truth);
    }

    #[test]
    fn prop_regret_trace_consistent(seed in 0u64..10_000) {
        let dims = Dims::new(2, 2, 2, 2);
        let b = farsighted_benchmark_with(dims, 3, 3, seed).unwrap();
        let eval = Evaluator::over_class(b.truth.clone(), &b.policies).unwrap();
        let mut learner = OmleLearner::new(b.models.clone(), b.policies.clone(), 20.0).unwrap();
        let mut env = SimulatedEnvironment::new(b.truth.clone(), PublicInfo::tabular(&b.truth), seed);
        let trace = run_online(&mut env, &mut learner, &eval, 25).unwrap();
        let cum: Vec<f64> = trace.episodes.iter().map(|e| e.cum_regret).collect();
        prop_assert!(cum.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(trace.recompute(), cum);
    }
}

#[test]
fn policy_class_is_deterministic() {
    let dims = Dims::new(2, 2, 2, 3);
    assert_eq!(policy_class(dims, 5, 9).unwrap(), policy_class(dims, 5, 9).unwrap());
}
