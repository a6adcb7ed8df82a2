//! Offline MLE-PVI under the three pessimistic schemes, plus the finite-class
//! learners (MLE-BCP for a myopic follower, PMLE for a farsighted one).
use quantal::harness::{
    farsighted_benchmark, generate_offline_dataset, make_finite_classes, offline_benchmark, policy_class, PolicySampler,
};
use quantal::game::PublicInfo;
use quantal::mle::{beta_farsighted, beta_finite_class, beta_linear};
use quantal::offline::{mle_bcp, mle_pvi, pmle_farsighted, LinearConfig, Scheme};
use quantal::planner::{evaluate_j, solve_qse_myopic, PrescriptionGrid};

fn main() -> quantal::Result<()> {
    let game = offline_benchmark();
    let info = PublicInfo::tabular(&game);
    let dims = game.dims();
    let grid = PrescriptionGrid::for_dims(dims, 0)?;
    let (_, j_star) = solve_qse_myopic(&game, &grid)?;
    println!("J* = {j_star:.4}");
    for t in [100, 400, 1600] {
        let ds = generate_offline_dataset(&game, &PolicySampler::GridPerState(grid.clone()), t, 5)?;
        let beta = beta_linear(1.0, info.features.dim(), dims.horizon, game.rationality(), t, 0.1);
        for scheme in [Scheme::S1, Scheme::S2, Scheme::S3] {
            let mut cfg = LinearConfig::new(scheme, beta, 0.01);
            cfg.gamma2_scale = 1e-9;
            cfg.sample_size = 16;
            let est = mle_pvi(&info, &ds, &grid, &cfg)?;
            let j = evaluate_j(&game, &est.policy)?;
            println!(
                "T = {t:>4} {scheme}: J(pi_hat) = {j:.4}, subopt {:.4}, pessimistic estimate {:.4}",
                j_star - j,
                est.initial_value(&info.init_dist)
            );
        }
    }

    let policies = policy_class(dims, 8, 0)?;
    let classes = make_finite_classes(&game, &policies, 5, 0)?;
    let ds = generate_offline_dataset(&game, &PolicySampler::GridPerState(grid.clone()), 400, 6)?;
    let n = classes.values.len() * classes.rewards.len();
    let bcp = mle_bcp(&info, &ds, &classes, &policies, beta_finite_class(1, dims.horizon, n, 0.1))?;
    println!("MLE-BCP picks policy {} (J = {:.4})", bcp.policy_index, evaluate_j(&game, &policies[bcp.policy_index])?);

    let b = farsighted_benchmark();
    let ds = generate_offline_dataset(&b.truth, &PolicySampler::UniformOver(b.policies.clone()), 300, 7)?;
    let res = pmle_farsighted(&b.models, &b.policies, &ds, beta_farsighted(300, 3, b.models.len(), 0.1))?;
    println!(
        "PMLE: confidence set {:?} (truth {}), picks policy {} with pessimistic value {:.4}, true J {:.4}",
        res.confidence,
        b.true_index,
        res.policy_index,
        res.pessimistic_values[res.policy_index],
        evaluate_j(&b.truth, &b.policies[res.policy_index])?
    );
    Ok(())
}
