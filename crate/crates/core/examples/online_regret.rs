//! Online learners against the simulator: MLE-OVI on the linear benchmark,
//! GOLF over finite function classes and OMLE over a finite model class.
use quantal::harness::{
    farsighted_benchmark, make_finite_classes, offline_benchmark, policy_class, online_benchmark,
};
use quantal::game::PublicInfo;
use quantal::mle::{beta_farsighted, beta_finite_class, beta_linear_online};
use quantal::offline::{LinearConfig, Scheme};
use quantal::online::{run_online, Evaluator, GolfLearner, OmleLearner, OviLearner, RegretTrace, SimulatedEnvironment};
use quantal::planner::PrescriptionGrid;

fn show(name: &str, trace: &RegretTrace) {
    let n = trace.episodes.len();
    let marks: Vec<String> =
        [n / 8, n / 4, n / 2, n].iter().map(|&t| format!("{t}:{:.1}", trace.episodes[t - 1].cum_regret)).collect();
    println!("{name:>8}: J* = {:.4}, cumulative regret {}", trace.j_star, marks.join("  "));
}

fn main() -> quantal::Result<()> {
    let t = 800;
    let bench = online_benchmark();
    let grid = PrescriptionGrid::for_dims(bench.game.dims(), 0)?;
    let beta = beta_linear_online(1.0, 4, 2, 1.0, t, 0.1);
    let mut cfg = LinearConfig::new(Scheme::S5, beta, 0.1);
    cfg.gamma2_scale = 1e-12;
    cfg.log_episodes = Some(t);
    let mut ovi = OviLearner::new(bench.info.clone(), grid.clone(), cfg)?;
    let evaluator = Evaluator::myopic(bench.game.clone(), &grid)?;
    let mut env = SimulatedEnvironment::new(bench.game.clone(), bench.info.clone(), 1);
    show("MLE-OVI", &run_online(&mut env, &mut ovi, &evaluator, t)?);

    let game = offline_benchmark();
    let info = PublicInfo::tabular(&game);
    let grid = PrescriptionGrid::for_dims(game.dims(), 0)?;
    let policies = policy_class(game.dims(), 8, 0)?;
    let classes = make_finite_classes(&game, &policies, 5, 0)?;
    let n = classes.values.len() * classes.rewards.len();
    let mut golf = GolfLearner::new(info.clone(), classes, grid.clone(), beta_finite_class(t, 2, n, 0.1))?;
    let evaluator = Evaluator::myopic(game.clone(), &grid)?.with_true_member(0);
    let mut env = SimulatedEnvironment::new(game.clone(), info, 2);
    show("GOLF", &run_online(&mut env, &mut golf, &evaluator, t)?);

    let b = farsighted_benchmark();
    let mut omle = OmleLearner::new(b.models.clone(), b.policies.clone(), beta_farsighted(t, 3, b.models.len(), 0.1))?;
    let evaluator = Evaluator::over_class(b.truth.clone(), &b.policies)?.with_true_member(b.true_index);
    let mut env = SimulatedEnvironment::new(b.truth.clone(), PublicInfo::tabular(&b.truth), 3);
    let trace = run_online(&mut env, &mut omle, &evaluator, t)?;
    show("OMLE", &trace);
    println!("truth kept in the model confidence set every episode: {:?}", trace.always_covered());
    Ok(())
}
