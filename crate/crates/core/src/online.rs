//! Episodic online learning with optimism and regret accounting.
//!
//! A learner only talks to an [`Environment`], which exposes public
//! structure and plays announced policies. The true game is held by an
//! [`Evaluator`] that scores policies for the regret trace and is never
//! handed to the learner.

use crate::error::{Error, Result};
use crate::game::{stream_rng, Dataset, LeaderPolicy, MarkovGame, PublicInfo, Trajectory};
use crate::mle::farsighted_step_loss;
use crate::offline::{chain_confidence, linear_value_iteration, model_confidence, model_value, ClassConfidence, FiniteClasses, LinearConfig};
use crate::planner::{evaluate_j, prescription_argmax, solve_qse_myopic, ModelSet, PrescriptionGrid};
use crate::response::{prescribed_reward, quantal_response, soft_max_into, FollowerSolution};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a learner can do with the world: read public structure, announce a
/// policy and observe one episode.
pub trait Environment {
    fn info(&self) -> &PublicInfo;
    fn play(&mut self, policy: &LeaderPolicy) -> Result<Trajectory>;
}

/// Simulator backed by a hidden game.
pub struct SimulatedEnvironment {
    game: MarkovGame,
    info: PublicInfo,
    rng: ChaCha8Rng,
    cached: Option<(LeaderPolicy, FollowerSolution)>,
}

impl SimulatedEnvironment {
    pub fn new(game: MarkovGame, info: PublicInfo, seed: u64) -> Self {
        SimulatedEnvironment { game, info, rng: stream_rng(seed, 7), cached: None }
    }
}

impl Environment for SimulatedEnvironment {
    fn info(&self) -> &PublicInfo {
        &self.info
    }

    fn play(&mut self, policy: &LeaderPolicy) -> Result<Trajectory> {
        let stale = self.cached.as_ref().is_none_or(|(p, _)| p != policy);
        if stale {
            self.cached = Some((policy.clone(), quantal_response(&self.game, policy)?));
        }
        let resp = &self.cached.as_ref().unwrap().1;
        crate::game::sample_trajectory(&self.game, policy, resp, 0, &mut self.rng)
    }
}

/// Scores announced policies against the true game; evaluation only.
pub struct Evaluator {
    game: MarkovGame,
    j_star: f64,
    true_member: Option<usize>,
}

impl Evaluator {
    pub fn new(game: MarkovGame, j_star: f64) -> Self {
        Evaluator { game, j_star, true_member: None }
    }

    /// Reference value: the grid QSE of a myopic game.
    pub fn myopic(game: MarkovGame, grid: &PrescriptionGrid) -> Result<Self> {
        let (_, j) = solve_qse_myopic(&game, grid)?;
        Ok(Evaluator::new(game, j))
    }

    /// Reference value: the best policy of a finite class.
    pub fn over_class(game: MarkovGame, policies: &[LeaderPolicy]) -> Result<Self> {
        let mut best = f64::NEG_INFINITY;
        for p in policies {
            best = best.max(evaluate_j(&game, p)?);
        }
        Ok(Evaluator::new(game, best))
    }

    /// Index of the true model in the learner's class, for coverage tracking.
    pub fn with_true_member(mut self, index: usize) -> Self {
        self.true_member = Some(index);
        self
    }

    pub fn j_star(&self) -> f64 {
        self.j_star
    }

    pub fn value(&self, policy: &LeaderPolicy) -> Result<f64> {
        evaluate_j(&self.game, policy)
    }
}

/// A learner's announcement for the next episode.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub policy: LeaderPolicy,
    /// Value the learner believes the policy attains (optimistic estimate).
    pub optimistic_value: f64,
    /// Class indices currently in the confidence set, when the learner has one.
    pub members: Option<Vec<usize>>,
}

pub trait OnlineLearner {
    fn name(&self) -> String;
    fn propose(&mut self) -> Result<Proposal>;
    /// Called with the trajectory generated by the last proposal.
    fn observe(&mut self, trajectory: &Trajectory) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// 1-based episode index.
    pub t: usize,
    pub j_pi: f64,
    pub subopt: f64,
    pub cum_regret: f64,
    pub optimistic_value: f64,
    pub sampled_return: f64,
    /// Whether the true model was in the learner's confidence set.
    pub truth_in_set: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct RegretTrace {
    pub learner: String,
    pub j_star: f64,
    pub episodes: Vec<EpisodeRecord>,
    pub dataset: Dataset,
}

impl RegretTrace {
    pub fn regret(&self) -> f64 {
        self.episodes.last().map_or(0.0, |e| e.cum_regret)
    }

    /// `Reg(t)` recomputed from the per-episode values.
    pub fn recompute(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.episodes
            .iter()
            .map(|e| {
                acc += self.j_star - e.j_pi;
                acc
            })
            .collect()
    }

    pub fn coverage(&self) -> Option<f64> {
        let flags: Vec<bool> = self.episodes.iter().filter_map(|e| e.truth_in_set).collect();
        if flags.is_empty() {
            None
        } else {
            Some(flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
        }
    }

    /// True when the true model stayed in the set for every episode.
    pub fn always_covered(&self) -> Option<bool> {
        self.coverage().map(|c| c == 1.0)
    }
}

/// Runs `episodes` rounds of propose / play / observe.
pub fn run_online(
    env: &mut dyn Environment,
    learner: &mut dyn OnlineLearner,
    evaluator: &Evaluator,
    episodes: usize,
) -> Result<RegretTrace> {
    let mut dataset = Dataset::new(env.info().dims());
    let mut records = Vec::with_capacity(episodes);
    let mut acc = 0.0;
    for t in 1..=episodes {
        let prop = learner.propose()?;
        let mut traj = env.play(&prop.policy)?;
        let j_pi = evaluator.value(&prop.policy)?;
        let subopt = evaluator.j_star - j_pi;
        acc += subopt;
        let truth_in_set = match (&prop.members, evaluator.true_member) {
            (Some(m), Some(i)) => Some(m.contains(&i)),
            _ => None,
        };
        records.push(EpisodeRecord {
            t,
            j_pi,
            subopt,
            cum_regret: acc,
            optimistic_value: prop.optimistic_value,
            sampled_return: traj.steps.iter().map(|s| s.leader_reward).sum(),
            truth_in_set,
        });
        learner.observe(&traj)?;
        traj.policy_id = dataset.add_policy(prop.policy);
        dataset.push(traj);
    }
    Ok(RegretTrace { learner: learner.name(), j_star: evaluator.j_star, episodes: records, dataset })
}

/// Optimistic value iteration with follower MLE for linear myopic games
/// (schemes S4 and S5).
pub struct OviLearner {
    info: PublicInfo,
    grid: PrescriptionGrid,
    cfg: LinearConfig,
    data: Dataset,
    warm: Option<Vec<Vec<f64>>>,
    pending: Option<LeaderPolicy>,
}

impl OviLearner {
    /// `cfg.log_episodes` should hold the planned number of episodes.
    pub fn new(info: PublicInfo, grid: PrescriptionGrid, cfg: LinearConfig) -> Result<Self> {
        if !cfg.scheme.is_optimistic() {
            return Err(Error::Config(format!("{} is an offline scheme", cfg.scheme)));
        }
        if info.discount > 0.0 {
            return Err(Error::NotMyopic(info.discount));
        }
        let data = Dataset::new(info.dims());
        Ok(OviLearner { info, grid, cfg, data, warm: None, pending: None })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }
}

impl OnlineLearner for OviLearner {
    fn name(&self) -> String {
        format!("mle-ovi-{}", self.cfg.scheme)
    }

    fn propose(&mut self) -> Result<Proposal> {
        let mut cfg = self.cfg;
        cfg.seed = self.cfg.seed.wrapping_add(self.data.len() as u64);
        let est = linear_value_iteration(&self.info, &self.data, &self.grid, &cfg, self.warm.as_deref())?;
        if !self.data.is_empty() {
            self.warm = Some(est.theta_hat.clone());
        }
        let value = est.initial_value(&self.info.init_dist);
        self.pending = Some(est.policy.clone());
        Ok(Proposal { policy: est.policy, optimistic_value: value, members: None })
    }

    fn observe(&mut self, trajectory: &Trajectory) -> Result<()> {
        let policy = self.pending.take().ok_or_else(|| Error::Config("observe before propose".into()))?;
        let mut traj = trajectory.clone();
        traj.policy_id = self.data.add_policy(policy);
        self.data.push(traj);
        Ok(())
    }
}

/// Global optimism over finite value and reward classes with a GOLF-style
/// Bellman loss.
pub struct GolfLearner {
    info: PublicInfo,
    classes: FiniteClasses,
    grid: PrescriptionGrid,
    beta: f64,
    /// `[k][u][h][s]`: `max_alpha <U_u(h, s), alpha (x) nu^{alpha, theta_k}>` and its grid index.
    greedy: Vec<f64>,
    greedy_idx: Vec<usize>,
    /// `[h][k]` running negative log-likelihood.
    nll: Vec<Vec<f64>>,
    /// `[h][u][next]` running squared Bellman loss; `next` indexes `(u', k')`
    /// below the last step and is a single slot at the last step.
    loss: Vec<Vec<Vec<f64>>>,
    pending: Option<LeaderPolicy>,
    episodes: usize,
}

impl GolfLearner {
    pub fn new(info: PublicInfo, classes: FiniteClasses, grid: PrescriptionGrid, beta: f64) -> Result<Self> {
        let dims = info.dims();
        if classes.values.is_empty() || classes.rewards.is_empty() {
            return Err(Error::Config("function classes must be nonempty".into()));
        }
        let n = dims.horizon * dims.sab();
        if classes.values.iter().chain(&classes.rewards).any(|t| t.len() != n) {
            return Err(Error::DimensionMismatch("class member table length".into()));
        }
        let (nu_, nk, hor, ns) = (classes.values.len(), classes.rewards.len(), dims.horizon, dims.states);
        let mut greedy = vec![0.0; nk * nu_ * hor * ns];
        let mut greedy_idx = vec![0; nk * nu_ * hor * ns];
        for k in 0..nk {
            for u in 0..nu_ {
                for h in 0..hor {
                    for s in 0..ns {
                        let off = h * dims.sab() + dims.idx(s, 0, 0);
                        let ub = &classes.values[u][off..off + dims.ab()];
                        let rb = &classes.rewards[k][off..off + dims.ab()];
                        let (gi, v) = prescription_argmax(ub, ModelSet::Single(rb), info.rationality, None, &grid)?;
                        let i = ((k * nu_ + u) * hor + h) * ns + s;
                        greedy[i] = v;
                        greedy_idx[i] = gi;
                    }
                }
            }
        }
        let loss = (0..hor).map(|h| vec![vec![0.0; if h + 1 == hor { 1 } else { nu_ * nk }]; nu_]).collect();
        Ok(GolfLearner {
            nll: vec![vec![0.0; nk]; hor],
            loss,
            info,
            classes,
            grid,
            beta,
            greedy,
            greedy_idx,
            pending: None,
            episodes: 0,
        })
    }

    fn g(&self, k: usize, u: usize, h: usize, s: usize) -> (f64, usize) {
        let d = self.info.dims();
        let i = ((k * self.classes.values.len() + u) * d.horizon + h) * d.states + s;
        (self.greedy[i], self.greedy_idx[i])
    }

    pub fn confidence(&self) -> ClassConfidence {
        let dims = self.info.dims();
        let nk = self.classes.rewards.len();
        let reward_ok: Vec<Vec<usize>> = self
            .nll
            .iter()
            .map(|row| {
                let min = row.iter().copied().fold(f64::INFINITY, f64::min);
                (0..nk).filter(|&k| row[k] <= min + self.beta).collect()
            })
            .collect();
        let hor = dims.horizon as f64;
        let loss = |h: usize, u: usize, next: Option<(usize, usize)>| -> f64 {
            match next {
                None => self.loss[h][u][0],
                Some((u2, k2)) => self.loss[h][u][u2 * nk + k2],
            }
        };
        chain_confidence(dims, self.classes.values.len(), reward_ok, hor * hor * self.beta, &loss)
    }

    /// Whether the fixed pair `(U_u, theta_k)` (same member at every step)
    /// passes both sublevel tests at every step.
    pub fn pair_in_confidence(&self, u: usize, k: usize) -> bool {
        let dims = self.info.dims();
        let nk = self.classes.rewards.len();
        let hh = (dims.horizon * dims.horizon) as f64;
        (0..dims.horizon).all(|h| {
            let min_nll = self.nll[h].iter().copied().fold(f64::INFINITY, f64::min);
            let slot = if h + 1 == dims.horizon { 0 } else { u * nk + k };
            let min_loss = self.loss[h].iter().map(|row| row[slot]).fold(f64::INFINITY, f64::min);
            self.nll[h][k] <= min_nll + self.beta && self.loss[h][u][slot] <= min_loss + hh * self.beta
        })
    }
}

impl OnlineLearner for GolfLearner {
    fn name(&self) -> String {
        "mle-golf".into()
    }

    fn propose(&mut self) -> Result<Proposal> {
        let dims = self.info.dims();
        let conf = self.confidence();
        if conf.is_empty() {
            return Err(Error::EmptyConfidenceSet(format!("episode {}: no class pair passes both tests", self.episodes + 1)));
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for &u in &conf.values[0] {
            for &k in &conf.rewards[0] {
                let v: f64 = (0..dims.states).map(|s| self.info.init_dist[s] * self.g(k, u, 0, s).0).sum();
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((u, k, v));
                }
            }
        }
        let (mut u, mut k, value) = best.unwrap();
        let mut policy = LeaderPolicy::uniform(dims);
        for h in 0..dims.horizon {
            for s in 0..dims.states {
                policy.set_prescription(h, s, self.grid.get(self.g(k, u, h, s).1));
            }
            if let Some((u2, k2)) = conf.witness[h][u] {
                u = u2;
                k = k2;
            }
        }
        // members: reward indices passing the likelihood test at every step
        let members = (0..self.classes.rewards.len()).filter(|k| conf.rewards.iter().all(|r| r.contains(k))).collect();
        self.pending = Some(policy.clone());
        Ok(Proposal { policy, optimistic_value: value, members: Some(members) })
    }

    fn observe(&mut self, trajectory: &Trajectory) -> Result<()> {
        let policy = self.pending.take().ok_or_else(|| Error::Config("observe before propose".into()))?;
        let dims = self.info.dims();
        let (na, nb) = (dims.leader_actions, dims.follower_actions);
        let (nu_, nk) = (self.classes.values.len(), self.classes.rewards.len());
        let eta = self.info.rationality;
        let mut rbuf = vec![0.0; nb];
        let mut nu = vec![0.0; nb];
        for (h, st) in trajectory.steps.iter().enumerate() {
            let off = h * dims.sab() + dims.idx(st.state, 0, 0);
            let pres = policy.prescription(h, st.state);
            for k in 0..nk {
                prescribed_reward(&self.classes.rewards[k][off..off + dims.ab()], pres, na, nb, &mut rbuf);
                let v = soft_max_into(eta, &rbuf, &mut nu);
                self.nll[h][k] += eta * (v - rbuf[st.follower_action]);
            }
            let cell = h * dims.sab() + dims.idx(st.state, st.leader_action, st.follower_action);
            for u in 0..nu_ {
                let pred = self.classes.values[u][cell] - st.leader_reward;
                if h + 1 == dims.horizon {
                    self.loss[h][u][0] += pred * pred;
                } else {
                    for u2 in 0..nu_ {
                        for k2 in 0..nk {
                            let e = pred - self.g(k2, u2, h + 1, st.next_state).0;
                            self.loss[h][u][u2 * nk + k2] += e * e;
                        }
                    }
                }
            }
        }
        self.episodes += 1;
        Ok(())
    }
}

/// Optimistic MLE over a finite class of farsighted models.
pub struct OmleLearner {
    models: Vec<MarkovGame>,
    policies: Vec<LeaderPolicy>,
    beta: f64,
    /// `[m][pi]` value table `J(pi, M)`.
    values: Vec<Vec<f64>>,
    responses: Vec<Vec<FollowerSolution>>,
    /// `[m][h]` generalized negative log-likelihood.
    nll: Vec<Vec<f64>>,
    pending: Option<usize>,
}

impl OmleLearner {
    pub fn new(models: Vec<MarkovGame>, policies: Vec<LeaderPolicy>, beta: f64) -> Result<Self> {
        if models.is_empty() || policies.is_empty() {
            return Err(Error::Config("model and policy classes must be nonempty".into()));
        }
        let hor = models[0].dims().horizon;
        let mut values = Vec::with_capacity(models.len());
        let mut responses = Vec::with_capacity(models.len());
        for m in &models {
            let mut vrow = Vec::with_capacity(policies.len());
            let mut rrow = Vec::with_capacity(policies.len());
            for p in &policies {
                vrow.push(model_value(m, p)?);
                rrow.push(quantal_response(m, p)?);
            }
            values.push(vrow);
            responses.push(rrow);
        }
        let nll = vec![vec![0.0; hor]; models.len()];
        Ok(OmleLearner { models, policies, beta, values, responses, nll, pending: None })
    }

    pub fn confidence(&self) -> Vec<usize> {
        model_confidence(&self.nll, self.beta)
    }
}

impl OnlineLearner for OmleLearner {
    fn name(&self) -> String {
        "omle".into()
    }

    fn propose(&mut self) -> Result<Proposal> {
        let conf = self.confidence();
        if conf.is_empty() {
            return Err(Error::EmptyModelSet);
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for pi in 0..self.policies.len() {
            for &m in &conf {
                if self.values[m][pi] > best.1 {
                    best = (pi, self.values[m][pi]);
                }
            }
        }
        self.pending = Some(best.0);
        Ok(Proposal { policy: self.policies[best.0].clone(), optimistic_value: best.1, members: Some(conf) })
    }

    fn observe(&mut self, trajectory: &Trajectory) -> Result<()> {
        let pi = self.pending.take().ok_or_else(|| Error::Config("observe before propose".into()))?;
        for (m, model) in self.models.iter().enumerate() {
            for (h, st) in trajectory.steps.iter().enumerate() {
                self.nll[m][h] += farsighted_step_loss(model, &self.responses[m][pi], h, st);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{make_random_game, Dims, FeatureMap, IdentificationConstraint};
    use crate::offline::Scheme;
    use crate::planner::leader_values;

    #[test]
    fn test_regret_recompute_bit_exact() {
        let g = make_random_game(Dims::new(2, 2, 2, 2), 0.0, 1.0, None, 1).unwrap();
        let info = PublicInfo::tabular(&g);
        let grid = PrescriptionGrid::for_dims(g.dims(), 2).unwrap();
        let mut cfg = LinearConfig::new(Scheme::S5, 1.0, 0.02);
        cfg.gamma2_scale = 1e-9;
        cfg.log_episodes = Some(30);
        let mut learner = OviLearner::new(info.clone(), grid.clone(), cfg).unwrap();
        let mut env = SimulatedEnvironment::new(g.clone(), info, 3);
        let eval = Evaluator::myopic(g, &grid).unwrap();
        let trace = run_online(&mut env, &mut learner, &eval, 30).unwrap();
        let again = trace.recompute();
        for (e, r) in trace.episodes.iter().zip(&again) {
            assert_eq!(e.cum_regret.to_bits(), r.to_bits());
            assert!(e.subopt >= -1e-12);
        }
        assert_eq!(trace.dataset.len(), 30);
        assert!(trace.episodes[0].cum_regret <= 2.0);
    }

    #[test]
    fn test_ovi_rejects_offline_scheme() {
        let g = make_random_game(Dims::new(2, 2, 2, 2), 0.0, 1.0, None, 1).unwrap();
        let grid = PrescriptionGrid::for_dims(g.dims(), 0).unwrap();
        assert!(OviLearner::new(PublicInfo::tabular(&g), grid, LinearConfig::new(Scheme::S3, 1.0, 1.0)).is_err());
    }

    #[test]
    fn test_golf_collapsed_classes() {
        let g = make_random_game(Dims::new(2, 2, 2, 2), 0.0, 1.0, None, 2).unwrap();
        let grid = PrescriptionGrid::for_dims(g.dims(), 2).unwrap();
        let (pi_star, _) = solve_qse_myopic(&g, &grid).unwrap();
        let u_star = leader_values(&g, &pi_star, &quantal_response(&g, &pi_star).unwrap()).unwrap().u_table().to_vec();
        let classes = FiniteClasses { values: vec![u_star], rewards: vec![g.follower_reward().to_vec()] };
        let info = PublicInfo::of(&g, FeatureMap::one_hot(g.dims()));
        let mut learner = GolfLearner::new(info.clone(), classes, grid.clone(), 5.0).unwrap();
        let mut env = SimulatedEnvironment::new(g.clone(), info, 1);
        let eval = Evaluator::myopic(g, &grid).unwrap().with_true_member(0);
        let trace = run_online(&mut env, &mut learner, &eval, 5).unwrap();
        assert!(trace.regret().abs() < 1e-9);
        assert_eq!(trace.always_covered(), Some(true));
    }

    #[test]
    fn test_omle_single_model() {
        let c = IdentificationConstraint::sum_to_half(2);
        let g = make_random_game(Dims::new(2, 2, 2, 2), 1.0, 1.0, Some(&c), 4).unwrap();
        let det = PrescriptionGrid::for_dims(g.dims(), 0).unwrap();
        let policies: Vec<LeaderPolicy> = (0..4).map(|i| LeaderPolicy::constant(g.dims(), det.get(i)).unwrap()).collect();
        let mut learner = OmleLearner::new(vec![g.clone()], policies.clone(), 1.0).unwrap();
        let mut env = SimulatedEnvironment::new(g.clone(), PublicInfo::tabular(&g), 1);
        let eval = Evaluator::over_class(g, &policies).unwrap().with_true_member(0);
        let trace = run_online(&mut env, &mut learner, &eval, 10).unwrap();
        assert!(trace.regret().abs() < 1e-12);
        assert_eq!(trace.coverage(), Some(1.0));
    }
}
