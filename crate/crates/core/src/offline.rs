//! Learning a leader policy from a fixed dataset.
//!
//! Linear games use pessimistic value iteration on ridge estimates of the
//! leader's `U` combined with a follower MLE (schemes S1-S3). Finite
//! function classes use Bellman-consistent pessimism, and finite model
//! classes of farsighted games use the generalized likelihood.

use crate::error::{Error, Result};
use crate::game::{stream_rng, Dataset, Dims, FeatureMap, LeaderPolicy, MarkovGame, PublicInfo, Step};
use crate::mle::{
    confidence_set, covariance_sum, covariance_under, fit_mle_myopic, nll_farsighted, nll_reward_table,
    policy_features, trace_product, ChoiceData, FitOptions, MleFit, SetOptions,
};
use crate::planner::{leader_values, pair_value, prescription_argmax, ModelSet, PrescriptionGrid};
use crate::response::{advantage_bound_for, prescribed_reward, quantal_response, soft_max_into};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How the follower's uncertainty enters the per-state objective.
/// S1-S3 are pessimistic (offline), S4-S5 optimistic (online).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Worst case over the confidence set.
    S1,
    /// Best case over the confidence set minus `Gamma2`.
    S2,
    /// MLE response minus `Gamma2`.
    S3,
    /// Best case over the confidence set.
    S4,
    /// MLE response plus `Gamma2`.
    S5,
}

impl Scheme {
    pub fn is_optimistic(self) -> bool {
        matches!(self, Scheme::S4 | Scheme::S5)
    }
    fn uses_set(self) -> bool {
        matches!(self, Scheme::S1 | Scheme::S2 | Scheme::S4)
    }
    fn uses_gamma2(self) -> bool {
        matches!(self, Scheme::S2 | Scheme::S3 | Scheme::S5)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scheme::S1),
            "S2" => Ok(Scheme::S2),
            "S3" => Ok(Scheme::S3),
            "S4" => Ok(Scheme::S4),
            "S5" => Ok(Scheme::S5),
            _ => Err(Error::Config(format!("unknown scheme {s:?}"))),
        }
    }
}

/// `C3 = eta^2 e^{2 eta B_A} (2 + eta B_A e^{2 eta B_A}) / 2`.
pub fn c3(eta: f64, advantage_bound: f64) -> f64 {
    let e = (2.0 * eta * advantage_bound).exp();
    eta * eta * e * (2.0 + eta * advantage_bound * e) / 2.0
}

/// Constants feeding `Gamma2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseConstants {
    pub eta: f64,
    pub horizon: usize,
    pub advantage_bound: f64,
    /// `C_eta = 1/eta + B_A`.
    pub c_eta: f64,
    pub c3: f64,
    /// `B_Theta`.
    pub param_bound: f64,
}

impl ResponseConstants {
    pub fn new(eta: f64, gamma: f64, horizon: usize, follower_actions: usize, param_bound: f64) -> Self {
        let b_a = advantage_bound_for(gamma, eta, horizon, follower_actions);
        Self::with_advantage_bound(eta, horizon, b_a, param_bound)
    }

    pub fn with_advantage_bound(eta: f64, horizon: usize, advantage_bound: f64, param_bound: f64) -> Self {
        ResponseConstants {
            eta,
            horizon,
            advantage_bound,
            c_eta: 1.0 / eta + advantage_bound,
            c3: c3(eta, advantage_bound),
            param_bound,
        }
    }

    /// `xi = sqrt(tr(Psi^+ Sigma_s)) sqrt(8 C_eta^2 beta + 4 B_Theta^2)` with `psi_pinv = Psi^+`.
    pub fn xi(&self, psi_pinv: &DMatrix<f64>, sigma_s: &DMatrix<f64>, beta: f64) -> f64 {
        let tr = trace_product(psi_pinv, sigma_s).max(0.0);
        tr.sqrt() * (8.0 * self.c_eta * self.c_eta * beta + 4.0 * self.param_bound * self.param_bound).sqrt()
    }

    /// `2 B_U (eta xi + C3 xi^2)` with `B_U = H`.
    pub fn gamma2_from_xi(&self, xi: f64) -> f64 {
        2.0 * self.horizon as f64 * (self.eta * xi + self.c3 * xi * xi)
    }

    pub fn gamma2(&self, psi_pinv: &DMatrix<f64>, sigma_s: &DMatrix<f64>, beta: f64) -> f64 {
        self.gamma2_from_xi(self.xi(psi_pinv, sigma_s, beta))
    }
}

/// `Gamma1` coefficient `c1 d H sqrt(log(2 d H N / delta))` with `N = T`
/// offline and `N = T^2` online.
pub fn gamma1_coef(c1: f64, d: usize, horizon: usize, episodes: usize, delta: f64, online: bool) -> f64 {
    let t = episodes.max(1) as f64;
    let n = if online { t * t } else { t };
    let inner = (2.0 * d as f64 * horizon as f64 * n / delta).ln().max(0.0);
    c1 * d as f64 * horizon as f64 * inner.sqrt()
}

/// Ridge regression of `u + W_{h+1}(s')` on features, and the
/// elliptical bonus.
#[derive(Clone, Debug)]
pub struct RidgeFit {
    pub omega: Vec<f64>,
    /// `Lambda = I + sum phi phi^T`.
    pub kernel: DMatrix<f64>,
    pub kernel_inv: DMatrix<f64>,
    /// `Gamma1(s, a, b)` at this step, `[s][a][b]`.
    pub gamma1: Vec<f64>,
}

pub fn ridge_and_gamma1(features: &FeatureMap, h: usize, steps: &[&Step], w_next: &[f64], coef: f64) -> RidgeFit {
    let dims = features.dims();
    let d = features.dim();
    let mut kernel = DMatrix::<f64>::identity(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for st in steps {
        let phi = DVector::from_column_slice(features.phi(h, st.state, st.leader_action, st.follower_action));
        let y = st.leader_reward + w_next.get(st.next_state).copied().unwrap_or(0.0);
        kernel.syger(1.0, &phi, &phi, 1.0);
        rhs.axpy(y, &phi, 1.0);
    }
    let chol = kernel.clone().cholesky().expect("I + sum phi phi^T is positive definite");
    let omega = chol.solve(&rhs);
    let kernel_inv = chol.inverse();
    let mut gamma1 = Vec::with_capacity(dims.sab());
    for s in 0..dims.states {
        for a in 0..dims.leader_actions {
            for b in 0..dims.follower_actions {
                let phi = DVector::from_column_slice(features.phi(h, s, a, b));
                let q = (phi.transpose() * &kernel_inv * &phi)[(0, 0)].max(0.0);
                gamma1.push(coef * q.sqrt());
            }
        }
    }
    RidgeFit { omega: omega.iter().copied().collect(), kernel, kernel_inv, gamma1 }
}

/// Settings shared by the offline and online linear learners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub scheme: Scheme,
    pub beta: f64,
    pub c1: f64,
    pub delta: f64,
    /// Multiplier on `Gamma2`; 1 keeps the full-strength bonus.
    pub gamma2_scale: f64,
    /// `B_Theta`.
    pub param_bound: f64,
    pub sample_size: usize,
    pub bisection_steps: usize,
    pub seed: u64,
    /// Episode count inside the `Gamma1` logarithm; the dataset size when unset.
    pub log_episodes: Option<usize>,
}

impl LinearConfig {
    pub fn new(scheme: Scheme, beta: f64, c1: f64) -> Self {
        LinearConfig {
            scheme,
            beta,
            c1,
            delta: 0.1,
            gamma2_scale: 1.0,
            param_bound: 10.0,
            sample_size: 64,
            bisection_steps: 40,
            seed: 0,
            log_episodes: None,
        }
    }
}

/// Output of the linear value iteration.
#[derive(Clone, Debug)]
pub struct PessimisticEstimate {
    pub scheme: Scheme,
    pub dims: Dims,
    /// Truncated `U_hat`, `[h][s][a][b]`, inside `[0, H - h]` (0-based `h`).
    pub u_hat: Vec<f64>,
    /// `W_hat`, `[h][s]`.
    pub w_hat: Vec<f64>,
    pub omega: Vec<Vec<f64>>,
    pub kernels: Vec<DMatrix<f64>>,
    /// `Gamma1`, `[h][s][a][b]`.
    pub gamma1: Vec<f64>,
    pub theta_hat: Vec<Vec<f64>>,
    pub fits: Vec<Option<MleFit>>,
    /// Confidence-set sample per step (just `theta_hat` for S3/S5).
    pub theta_samples: Vec<Vec<Vec<f64>>>,
    pub policy: LeaderPolicy,
}

impl PessimisticEstimate {
    pub fn w(&self, h: usize, s: usize) -> f64 {
        self.w_hat[h * self.dims.states + s]
    }

    /// `E_{rho0} W_hat_1`.
    pub fn initial_value(&self, init_dist: &[f64]) -> f64 {
        init_dist.iter().enumerate().map(|(s, p)| p * self.w(0, s)).sum()
    }
}

/// One backward pass of ridge + follower MLE + per-state scheme argmax.
///
/// `warm` seeds the MLE per step (used online). Shared by the offline
/// (pessimistic) and online (optimistic) linear learners.
pub fn linear_value_iteration(
    info: &PublicInfo,
    dataset: &Dataset,
    grid: &PrescriptionGrid,
    cfg: &LinearConfig,
    warm: Option<&[Vec<f64>]>,
) -> Result<PessimisticEstimate> {
    let dims = info.dims();
    if dataset.dims != dims {
        return Err(Error::DimensionMismatch("dataset vs features".into()));
    }
    if grid.shape() != (dims.leader_actions, dims.follower_actions) {
        return Err(Error::DimensionMismatch("grid vs game".into()));
    }
    let features = &info.features;
    let (ns, na, nb, hor) = (dims.states, dims.leader_actions, dims.follower_actions, dims.horizon);
    let d = features.dim();
    let eta = info.rationality;
    let optimistic = cfg.scheme.is_optimistic();
    let t = cfg.log_episodes.unwrap_or(dataset.len());
    let coef = gamma1_coef(cfg.c1, d, hor, t, cfg.delta, optimistic);
    let consts = ResponseConstants::new(eta, 0.0, hor, nb, cfg.param_bound);
    let fit_opts = FitOptions { bound: cfg.param_bound, ..FitOptions::default() };

    let mut u_hat = vec![0.0; hor * dims.sab()];
    let mut w_hat = vec![0.0; hor * ns];
    let mut gamma1 = vec![0.0; hor * dims.sab()];
    let mut omega = vec![Vec::new(); hor];
    let mut kernels = vec![DMatrix::zeros(0, 0); hor];
    let mut theta_hat = vec![vec![0.0; d]; hor];
    let mut fits = vec![None; hor];
    let mut theta_samples = vec![Vec::new(); hor];
    let mut policy = LeaderPolicy::uniform(dims);
    let grid_feats: Vec<Vec<Vec<f64>>> = (0..hor * ns)
        .map(|hs| grid.iter().map(|alpha| policy_features(features, alpha, hs / ns, hs % ns)).collect())
        .collect();

    for h in (0..hor).rev() {
        let steps: Vec<&Step> = dataset.episodes.iter().map(|ep| &ep.steps[h]).collect();
        let w_next: Vec<f64> = if h + 1 < hor { w_hat[(h + 1) * ns..(h + 2) * ns].to_vec() } else { vec![0.0; ns] };
        let ridge = ridge_and_gamma1(features, h, &steps, &w_next, coef);
        let cap = (hor - h) as f64;
        let base = h * dims.sab();
        for s in 0..ns {
            for a in 0..na {
                for b in 0..nb {
                    let k = dims.idx(s, a, b);
                    let mean: f64 = features.phi(h, s, a, b).iter().zip(&ridge.omega).map(|(x, y)| x * y).sum();
                    let g1 = ridge.gamma1[k];
                    let v = if optimistic { mean + g1 } else { mean - g1 };
                    u_hat[base + k] = v.clamp(0.0, cap);
                    gamma1[base + k] = g1;
                }
            }
        }

        let data = ChoiceData::from_dataset(dataset, features, h, eta);
        let (center, sample) = if data.is_empty() {
            (vec![0.0; d], vec![vec![0.0; d]])
        } else {
            let fit = fit_mle_myopic(&data, fit_opts, warm.map(|w| w[h].as_slice()))?;
            let center = fit.theta.clone();
            let sample = if cfg.scheme.uses_set() {
                let opts = SetOptions {
                    sample_size: cfg.sample_size,
                    bound: cfg.param_bound,
                    c_eta: consts.c_eta,
                    bisection_steps: cfg.bisection_steps,
                };
                let mut rng = stream_rng(cfg.seed, 1000 + h as u64);
                confidence_set(&data, &fit, cfg.beta, opts, &mut rng)?.theta_sample
            } else {
                vec![center.clone()]
            };
            fits[h] = Some(fit);
            (center, sample)
        };
        // Psi^+ per model for Gamma2
        let pinvs: Vec<DMatrix<f64>> = if cfg.scheme.uses_gamma2() {
            sample
                .iter()
                .map(|th| {
                    let psi = if data.is_empty() { DMatrix::identity(d, d) } else { covariance_sum(th, &data) + DMatrix::identity(d, d) };
                    psi.cholesky().expect("Psi is positive definite").inverse()
                })
                .collect()
        } else {
            Vec::new()
        };
        let rewards: Vec<Vec<f64>> = sample.iter().map(|th| features.reward_step(h, th)).collect();

        for s in 0..ns {
            let lo = dims.idx(s, 0, 0);
            let u_state = &u_hat[base + lo..base + lo + dims.ab()];
            let blocks: Vec<Vec<f64>> = rewards.iter().map(|r| r[lo..lo + dims.ab()].to_vec()).collect();
            let feats = &grid_feats[h * ns + s];
            let sign = if optimistic { 1.0 } else { -1.0 };
            let pen = |gi: usize, mi: usize, nu: &[f64]| -> f64 {
                let sigma_s = covariance_under(&feats[gi], nb, d, nu);
                sign * cfg.gamma2_scale * consts.gamma2(&pinvs[mi], &sigma_s, cfg.beta)
            };
            let models = match cfg.scheme {
                Scheme::S1 => ModelSet::Min(&blocks),
                Scheme::S2 | Scheme::S4 => ModelSet::Max(&blocks),
                Scheme::S3 | Scheme::S5 => ModelSet::Single(&blocks[0]),
            };
            let penalty: Option<&dyn Fn(usize, usize, &[f64]) -> f64> =
                if cfg.scheme.uses_gamma2() { Some(&pen) } else { None };
            let (gi, val) = prescription_argmax(u_state, models, eta, penalty, grid)?;
            policy.set_prescription(h, s, grid.get(gi));
            w_hat[h * ns + s] = val;
        }
        omega[h] = ridge.omega;
        kernels[h] = ridge.kernel;
        theta_hat[h] = center;
        theta_samples[h] = sample;
    }
    Ok(PessimisticEstimate {
        scheme: cfg.scheme,
        dims,
        u_hat,
        w_hat,
        omega,
        kernels,
        gamma1,
        theta_hat,
        fits,
        theta_samples,
        policy,
    })
}

/// Offline pessimistic value iteration with MLE for a myopic follower.
pub fn mle_pvi(info: &PublicInfo, dataset: &Dataset, grid: &PrescriptionGrid, cfg: &LinearConfig) -> Result<PessimisticEstimate> {
    if info.discount > 0.0 {
        return Err(Error::NotMyopic(info.discount));
    }
    if cfg.scheme.is_optimistic() {
        return Err(Error::Config(format!("{} is an online scheme", cfg.scheme)));
    }
    linear_value_iteration(info, dataset, grid, cfg, None)
}

/// Finite classes of leader value tables `U` and follower reward tables,
/// both `[h][s][a][b]`. Steps pick class members independently.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteClasses {
    pub values: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
}

impl FiniteClasses {
    fn validate(&self, dims: Dims) -> Result<()> {
        if self.values.is_empty() || self.rewards.is_empty() {
            return Err(Error::Config("function classes must be nonempty".into()));
        }
        let n = dims.horizon * dims.sab();
        if self.values.iter().chain(&self.rewards).any(|t| t.len() != n) {
            return Err(Error::DimensionMismatch("class member table length".into()));
        }
        Ok(())
    }
}

/// Indices of class members passing both sublevel tests at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassConfidence {
    /// Reward indices passing the MLE test, per step.
    pub rewards: Vec<Vec<usize>>,
    /// Value indices with a feasible continuation, per step.
    pub values: Vec<Vec<usize>>,
    /// For a value index at step `h < H-1`: one feasible `(U, theta)` at `h + 1`.
    pub witness: Vec<Vec<Option<(usize, usize)>>>,
}

impl ClassConfidence {
    pub fn is_empty(&self) -> bool {
        self.values[0].is_empty() || self.rewards[0].is_empty()
    }
}

/// MLE sublevel test per step over a finite reward class.
pub fn reward_class_confidence(rewards: &[Vec<f64>], dataset: &Dataset, eta: f64, beta: f64) -> Vec<Vec<usize>> {
    (0..dataset.dims.horizon)
        .map(|h| {
            let nll: Vec<f64> = rewards.iter().map(|r| nll_reward_table(r, dataset, h, eta)).collect();
            let min = nll.iter().copied().fold(f64::INFINITY, f64::min);
            (0..rewards.len()).filter(|&k| nll[k] <= min + beta).collect()
        })
        .collect()
}

/// Backward chaining of the Bellman-loss test given per-step losses
/// `loss(h, u, next)` where `next` ranges over feasible `(u', k')` at `h + 1`
/// (`None` at the last step).
pub(crate) fn chain_confidence(
    dims: Dims,
    n_values: usize,
    reward_ok: Vec<Vec<usize>>,
    bellman_beta: f64,
    loss: &dyn Fn(usize, usize, Option<(usize, usize)>) -> f64,
) -> ClassConfidence {
    let hor = dims.horizon;
    let mut values = vec![Vec::new(); hor];
    let mut witness = vec![vec![None; n_values]; hor];
    for h in (0..hor).rev() {
        let nexts: Vec<Option<(usize, usize)>> = if h + 1 == hor {
            vec![None]
        } else {
            let mut v = Vec::new();
            for &u in &values[h + 1] {
                for &k in &reward_ok[h + 1] {
                    v.push(Some((u, k)));
                }
            }
            v
        };
        let mut ok = vec![false; n_values];
        for next in nexts {
            let losses: Vec<f64> = (0..n_values).map(|u| loss(h, u, next)).collect();
            let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
            for u in 0..n_values {
                if !ok[u] && losses[u] - min <= bellman_beta {
                    ok[u] = true;
                    witness[h][u] = next;
                }
            }
        }
        values[h] = (0..n_values).filter(|&u| ok[u]).collect();
    }
    ClassConfidence { rewards: reward_ok, values, witness }
}

/// Myopic `nu^{alpha, r}(.|s)` from a full reward table.
fn table_response(reward: &[f64], dims: Dims, h: usize, s: usize, prescription: &[f64], eta: f64) -> Vec<f64> {
    let off = h * dims.sab() + dims.idx(s, 0, 0);
    let mut rbuf = vec![0.0; dims.follower_actions];
    let mut nu = vec![0.0; dims.follower_actions];
    prescribed_reward(&reward[off..off + dims.ab()], prescription, dims.leader_actions, dims.follower_actions, &mut rbuf);
    soft_max_into(eta, &rbuf, &mut nu);
    nu
}

fn block(table: &[f64], dims: Dims, h: usize, s: usize) -> &[f64] {
    let off = h * dims.sab() + dims.idx(s, 0, 0);
    &table[off..off + dims.ab()]
}

/// Joint confidence set for a fixed policy (offline Bellman loss).
pub fn bcp_confidence(
    info: &PublicInfo,
    dataset: &Dataset,
    classes: &FiniteClasses,
    policy: &LeaderPolicy,
    beta: f64,
) -> ClassConfidence {
    let dims = info.dims();
    let eta = info.rationality;
    let reward_ok = reward_class_confidence(&classes.rewards, dataset, eta, beta);
    let hor = dims.horizon as f64;
    // continuation value <U_{h+1}(s'), pi (x) nu^{pi,theta}(s')> per (h, s', u', k')
    let cont = |h: usize, s: usize, u: usize, k: usize| -> f64 {
        let pres = policy.prescription(h, s);
        let nu = table_response(&classes.rewards[k], dims, h, s, pres, eta);
        pair_value(block(&classes.values[u], dims, h, s), pres, &nu, dims.leader_actions, dims.follower_actions)
    };
    let mut table = std::collections::HashMap::new();
    for h in 1..dims.horizon {
        for s in 0..dims.states {
            for u in 0..classes.values.len() {
                for k in 0..classes.rewards.len() {
                    table.insert((h, s, u, k), cont(h, s, u, k));
                }
            }
        }
    }
    let loss = |h: usize, u: usize, next: Option<(usize, usize)>| -> f64 {
        dataset
            .episodes
            .iter()
            .map(|ep| {
                let st = &ep.steps[h];
                let y = st.leader_reward + next.map_or(0.0, |(u2, k2)| table[&(h + 1, st.next_state, u2, k2)]);
                let pred = classes.values[u][h * dims.sab() + dims.idx(st.state, st.leader_action, st.follower_action)];
                (pred - y).powi(2)
            })
            .sum()
    };
    chain_confidence(dims, classes.values.len(), reward_ok, hor * hor * beta, &loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcpResult {
    pub policy_index: usize,
    /// Pessimistic value per policy; `None` when its confidence set is empty.
    pub pessimistic_values: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Bellman-consistent pessimism over finite classes: for each policy the
/// smallest initial value over its joint confidence set, then the best policy.
pub fn mle_bcp(
    info: &PublicInfo,
    dataset: &Dataset,
    classes: &FiniteClasses,
    policies: &[LeaderPolicy],
    beta: f64,
) -> Result<BcpResult> {
    let dims = info.dims();
    classes.validate(dims)?;
    if policies.is_empty() {
        return Err(Error::Config("policy class must be nonempty".into()));
    }
    let eta = info.rationality;
    let mut values = Vec::with_capacity(policies.len());
    let mut skipped = Vec::new();
    for (pi_idx, pi) in policies.iter().enumerate() {
        let conf = bcp_confidence(info, dataset, classes, pi, beta);
        if conf.is_empty() {
            skipped.push(pi_idx);
            values.push(None);
            continue;
        }
        let mut worst = f64::INFINITY;
        for &u in &conf.values[0] {
            for &k in &conf.rewards[0] {
                let v: f64 = (0..dims.states)
                    .map(|s| {
                        let pres = pi.prescription(0, s);
                        let nu = table_response(&classes.rewards[k], dims, 0, s, pres, eta);
                        info.init_dist[s]
                            * pair_value(block(&classes.values[u], dims, 0, s), pres, &nu, dims.leader_actions, dims.follower_actions)
                    })
                    .sum();
                worst = worst.min(v);
            }
        }
        values.push(Some(worst));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    let (policy_index, _) =
        best.ok_or_else(|| Error::EmptyConfidenceSet(format!("all {} policies have empty sets", policies.len())))?;
    Ok(BcpResult { policy_index, pessimistic_values: values, skipped })
}

/// Models passing the generalized-likelihood sublevel test at every step.
/// A model with an infinite loss at any step is never included.
pub fn model_confidence(nll: &[Vec<f64>], beta: f64) -> Vec<usize> {
    let hor = nll.first().map_or(0, |v| v.len());
    let mins: Vec<f64> = (0..hor).map(|h| nll.iter().map(|l| l[h]).fold(f64::INFINITY, f64::min)).collect();
    (0..nll.len())
        .filter(|&m| (0..hor).all(|h| nll[m][h].is_finite() && nll[m][h] <= mins[h] + beta))
        .collect()
}

/// `J(pi, M)`: leader value when `M` is the true game.
pub fn model_value(model: &MarkovGame, policy: &LeaderPolicy) -> Result<f64> {
    let resp = quantal_response(model, policy)?;
    let vals = leader_values(model, policy, &resp)?;
    Ok(crate::planner::initial_value(model, &vals))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmleResult {
    pub policy_index: usize,
    /// Model attaining the pessimistic value of the chosen policy.
    pub pessimistic_model: usize,
    pub confidence: Vec<usize>,
    pub pessimistic_values: Vec<f64>,
    pub nll: Vec<Vec<f64>>,
}

/// Pessimistic MLE over a finite model class for a farsighted follower.
pub fn pmle_farsighted(
    models: &[MarkovGame],
    policies: &[LeaderPolicy],
    dataset: &Dataset,
    beta: f64,
) -> Result<PmleResult> {
    if models.is_empty() || policies.is_empty() {
        return Err(Error::Config("model and policy classes must be nonempty".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyData);
    }
    let nll: Vec<Vec<f64>> = models.iter().map(|m| nll_farsighted(m, dataset)).collect::<Result<_>>()?;
    let confidence = model_confidence(&nll, beta);
    if confidence.is_empty() {
        return Err(Error::EmptyModelSet);
    }
    let mut pess = Vec::with_capacity(policies.len());
    let mut argmins = Vec::with_capacity(policies.len());
    for pi in policies {
        let mut worst = (usize::MAX, f64::INFINITY);
        for &m in &confidence {
            let v = model_value(&models[m], pi)?;
            if v < worst.1 {
                worst = (m, v);
            }
        }
        pess.push(worst.1);
        argmins.push(worst.0);
    }
    let mut best = 0;
    for i in 1..pess.len() {
        if pess[i] > pess[best] {
            best = i;
        }
    }
    Ok(PmleResult { policy_index: best, pessimistic_model: argmins[best], confidence, pessimistic_values: pess, nll })
}
