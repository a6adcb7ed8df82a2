//! Brute-force verifiers. Everything here recomputes its quantities from the
//! game tables with plain loops (its own soft recursion, its own forward
//! pass over the trajectory distribution) so that it can be used to certify
//! the solvers and the structural inequalities they rely on.

use crate::error::{Error, Result};
use crate::game::{stream_rng, Dims, IdentificationConstraint, LeaderPolicy, MarkovGame};
use crate::mle::{confidence_set, fit_mle_myopic, nll_and_grad, nll_myopic, ChoiceData, FitOptions, SetOptions};
use crate::planner::PrescriptionGrid;
use crate::response::FollowerSolution;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;

/// Candidate budget for exhaustive policy search.
pub const MAX_CANDIDATES: u128 = 1_000_000;

fn lse(eta: f64, q: &[f64]) -> f64 {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + q.iter().map(|x| (eta * (x - m)).exp()).sum::<f64>().ln() / eta
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn l1(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * l1(p, q)
}

fn hellinger2(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

fn expect(p: &[f64], f: &[f64]) -> f64 {
    p.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// `(1 - x^H) / (1 - x)` for any `x >= 0`, `H` at `x = 1`.
pub fn geometric_sum(x: f64, horizon: usize) -> f64 {
    if (x - 1.0).abs() < 1e-12 {
        horizon as f64
    } else {
        (1.0 - x.powi(horizon as i32)) / (1.0 - x)
    }
}

/// Constant of the second-order term in the myopic and linear response bounds.
pub fn second_order_constant(eta: f64, b_a: f64) -> f64 {
    let e = (2.0 * eta * b_a).exp();
    eta * eta * e * (2.0 + eta * b_a * e) / 2.0
}

/// Follower tables `[h][s][b]` (`v` is `[h][s]`) recomputed from scratch.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTables {
    pub dims: Dims,
    pub eta: f64,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub adv: Vec<f64>,
    pub nu: Vec<f64>,
}

impl SoftTables {
    fn row(&self, table: usize, h: usize, s: usize) -> &[f64] {
        let nb = self.dims.follower_actions;
        let o = (h * self.dims.states + s) * nb;
        let t = match table {
            0 => &self.q,
            1 => &self.adv,
            _ => &self.nu,
        };
        &t[o..o + nb]
    }
    pub fn q_row(&self, h: usize, s: usize) -> &[f64] {
        self.row(0, h, s)
    }
    pub fn adv_row(&self, h: usize, s: usize) -> &[f64] {
        self.row(1, h, s)
    }
    pub fn nu_row(&self, h: usize, s: usize) -> &[f64] {
        self.row(2, h, s)
    }
    pub fn max_abs_adv(&self) -> f64 {
        self.adv.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `V`, `A` and `nu` implied by an arbitrary `Q` table.
    pub fn from_q(dims: Dims, eta: f64, q: Vec<f64>) -> Self {
        let nb = dims.follower_actions;
        let mut v = vec![0.0; dims.horizon * dims.states];
        let mut adv = vec![0.0; q.len()];
        let mut nu = vec![0.0; q.len()];
        for (i, row) in q.chunks(nb).enumerate() {
            v[i] = lse(eta, row);
            for b in 0..nb {
                adv[i * nb + b] = row[b] - v[i];
                nu[i * nb + b] = (eta * adv[i * nb + b]).exp();
            }
        }
        SoftTables { dims, eta, q, v, adv, nu }
    }

    pub fn from_solution(sol: &FollowerSolution) -> Self {
        let d = sol.dims();
        let mut q = Vec::new();
        let mut v = Vec::new();
        let mut adv = Vec::new();
        let mut nu = Vec::new();
        for h in 0..d.horizon {
            for s in 0..d.states {
                q.extend_from_slice(sol.q_row(h, s));
                adv.extend_from_slice(sol.adv_row(h, s));
                nu.extend_from_slice(sol.nu_row(h, s));
                v.push(sol.v(h, s));
            }
        }
        SoftTables { dims: d, eta: sol.eta(), q, v, adv, nu }
    }
}

/// `r^pi_h(s, b)` for a reward table `[h][s][a][b]`, laid out `[h][s][b]`.
pub fn prescribed_table(dims: Dims, policy: &LeaderPolicy, reward: &[f64]) -> Vec<f64> {
    let (ns, na, nb) = (dims.states, dims.leader_actions, dims.follower_actions);
    let mut out = vec![0.0; dims.horizon * ns * nb];
    for h in 0..dims.horizon {
        for s in 0..ns {
            for b in 0..nb {
                let mut acc = 0.0;
                for a in 0..na {
                    acc += policy.prob(h, s, b, a) * reward[h * dims.sab() + dims.idx(s, a, b)];
                }
                out[(h * ns + s) * nb + b] = acc;
            }
        }
    }
    out
}

/// `(P^pi_h x)(s, b) = sum_a pi(a|s,b) sum_s' P(s'|s,a,b) x(s')`.
fn prescribed_expectation(game: &MarkovGame, policy: &LeaderPolicy, h: usize, s: usize, b: usize, x: &[f64]) -> f64 {
    let na = game.dims().leader_actions;
    let mut acc = 0.0;
    for a in 0..na {
        let w = policy.prob(h, s, b, a);
        if w != 0.0 {
            acc += w * expect(game.p(h, s, a, b), x);
        }
    }
    acc
}

/// Soft backward recursion for the follower under `reward` (`[h][s][a][b]`).
pub fn soft_tables(game: &MarkovGame, policy: &LeaderPolicy, reward: &[f64]) -> SoftTables {
    let d = game.dims();
    let (ns, nb) = (d.states, d.follower_actions);
    let eta = game.rationality();
    let gamma = game.discount();
    let r_pi = prescribed_table(d, policy, reward);
    let mut q = vec![0.0; r_pi.len()];
    let mut v_next = vec![0.0; ns];
    for h in (0..d.horizon).rev() {
        let mut v = vec![0.0; ns];
        for s in 0..ns {
            let o = (h * ns + s) * nb;
            for b in 0..nb {
                let cont = if gamma > 0.0 { prescribed_expectation(game, policy, h, s, b, &v_next) } else { 0.0 };
                q[o + b] = r_pi[o + b] + gamma * cont;
            }
            v[s] = lse(eta, &q[o..o + nb]);
        }
        v_next = v;
    }
    SoftTables::from_q(d, eta, q)
}

/// Exact joint law of `(s_h, a_h, b_h)` under `(pi, nu)`: `joint[h][s][a][b]`
/// and the state marginals `state[h][s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    pub dims: Dims,
    pub state: Vec<f64>,
    pub joint: Vec<f64>,
}

impl Occupancy {
    pub fn state(&self, h: usize, s: usize) -> f64 {
        self.state[h * self.dims.states + s]
    }
    pub fn joint(&self, h: usize, s: usize, a: usize, b: usize) -> f64 {
        self.joint[h * self.dims.sab() + self.dims.idx(s, a, b)]
    }
}

/// Forward pass over the trajectory distribution; `nu` is `[h][s][b]`.
pub fn occupancy(game: &MarkovGame, policy: &LeaderPolicy, nu: &[f64]) -> Occupancy {
    let d = game.dims();
    let (ns, na, nb) = (d.states, d.leader_actions, d.follower_actions);
    let mut state = vec![0.0; d.horizon * ns];
    let mut joint = vec![0.0; d.horizon * d.sab()];
    state[..ns].copy_from_slice(game.init_dist());
    for h in 0..d.horizon {
        for s in 0..ns {
            let m = state[h * ns + s];
            for b in 0..nb {
                for a in 0..na {
                    let w = m * nu[(h * ns + s) * nb + b] * policy.prob(h, s, b, a);
                    joint[h * d.sab() + d.idx(s, a, b)] = w;
                    if h + 1 < d.horizon && w != 0.0 {
                        for (sp, p) in game.p(h, s, a, b).iter().enumerate() {
                            state[(h + 1) * ns + sp] += w * p;
                        }
                    }
                }
            }
        }
    }
    Occupancy { dims: d, state, joint }
}

/// `J(pi)` with the follower playing `nu`, by forward enumeration.
pub fn leader_return(game: &MarkovGame, policy: &LeaderPolicy, nu: &[f64]) -> f64 {
    let occ = occupancy(game, policy, nu);
    occ.joint.iter().zip(game.leader_reward()).map(|(w, u)| w * u).sum()
}

/// `J(pi)` under the game's quantal response, via the oracle's own recursion.
pub fn exact_j(game: &MarkovGame, policy: &LeaderPolicy) -> f64 {
    let t = soft_tables(game, policy, game.follower_reward());
    leader_return(game, policy, &t.nu)
}

/// Exhaustive search over grid-valued policies. Ties go to the lowest index
/// in mixed-radix order over `(h, s)`.
pub fn brute_force_qse(game: &MarkovGame, grid: &PrescriptionGrid) -> Result<(LeaderPolicy, f64)> {
    let d = game.dims();
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if grid.shape() != (d.leader_actions, d.follower_actions) {
        return Err(Error::DimensionMismatch("grid vs game".into()));
    }
    let slots = d.horizon * d.states;
    let mut count: u128 = 1;
    for _ in 0..slots {
        count = count.saturating_mul(grid.len() as u128);
        if count > MAX_CANDIDATES {
            return Err(Error::TooLarge(format!("{}^{} candidate policies", grid.len(), slots)));
        }
    }
    let decode = |mut idx: usize| -> LeaderPolicy {
        let mut policy = LeaderPolicy::uniform(d);
        for slot in 0..slots {
            let g = idx % grid.len();
            idx /= grid.len();
            policy.set_prescription(slot / d.states, slot % d.states, grid.get(g));
        }
        policy
    };
    let (best_idx, best_j) = (0..count as usize)
        .into_par_iter()
        .map(|i| (i, exact_j(game, &decode(i))))
        .reduce(
            || (usize::MAX, f64::NEG_INFINITY),
            |x, y| {
                if y.1 > x.1 || (y.1 == x.1 && y.0 < x.0) {
                    y
                } else {
                    x
                }
            },
        );
    Ok((decode(best_idx), best_j))
}

/// Best policy of an explicit list under the quantal response.
pub fn best_over_policies(game: &MarkovGame, policies: &[LeaderPolicy]) -> Result<(usize, f64)> {
    if policies.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in policies.iter().enumerate() {
        let j = exact_j(game, p);
        if j > best.1 {
            best = (i, j);
        }
    }
    Ok(best)
}

/// Points of the simplex over `n` coordinates with entries in multiples of `1/mesh`.
pub fn simplex_mesh(n: usize, mesh: usize) -> Vec<Vec<f64>> {
    fn rec(n: usize, left: usize, mesh: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() + 1 == n {
            cur.push(left);
            out.push(cur.iter().map(|&k| k as f64 / mesh as f64).collect());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(n, left - k, mesh, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, mesh, mesh, &mut Vec::with_capacity(n), &mut out);
    out
}

/// Regularized follower objective of an arbitrary `nu` (`[h][s][b]`):
/// per-state values `[h][s]` of `E[sum_l gamma^(l-h) (r^pi_l + H(nu_l) / eta)]`
/// and the `Q` table that goes with them.
pub fn regularized_values(game: &MarkovGame, policy: &LeaderPolicy, nu: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = game.dims();
    let (ns, nb) = (d.states, d.follower_actions);
    let eta = game.rationality();
    let gamma = game.discount();
    let r_pi = prescribed_table(d, policy, game.follower_reward());
    let mut q = vec![0.0; r_pi.len()];
    let mut v = vec![0.0; d.horizon * ns];
    let mut v_next = vec![0.0; ns];
    for h in (0..d.horizon).rev() {
        for s in 0..ns {
            let o = (h * ns + s) * nb;
            for b in 0..nb {
                let cont = if gamma > 0.0 { prescribed_expectation(game, policy, h, s, b, &v_next) } else { 0.0 };
                q[o + b] = r_pi[o + b] + gamma * cont;
            }
            let row = &nu[o..o + nb];
            v[h * ns + s] = expect(row, &q[o..o + nb]) + entropy(row) / eta;
        }
        v_next = v[h * ns..(h + 1) * ns].to_vec();
    }
    (v, q)
}

/// `G(pi, nu) = E_{rho0} [regularized value at step 1]`.
pub fn regularized_objective(game: &MarkovGame, policy: &LeaderPolicy, nu: &[f64]) -> f64 {
    let (v, _) = regularized_values(game, policy, nu);
    expect(game.init_dist(), &v[..game.dims().states])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyOracleReport {
    /// Largest gain of any mesh row over the computed row at any `(h, s)`,
    /// weighted by nothing (every subgame counts).
    pub max_row_gain: f64,
    /// Largest gain of a random joint perturbation in `G`.
    pub max_joint_gain: f64,
    /// `|G(pi, nu) - E_{rho0} V_1|`.
    pub value_gap: f64,
}

/// Grid search over the follower's regularized objective around `sol`.
///
/// Each `(h, s)` row is replaced by every mesh point while later rows keep
/// the computed response; `joint_trials` random full tables are compared in
/// `G` directly.
pub fn entropy_objective_oracle(
    game: &MarkovGame,
    policy: &LeaderPolicy,
    sol: &FollowerSolution,
    mesh: usize,
    joint_trials: usize,
    seed: u64,
) -> EntropyOracleReport {
    let d = game.dims();
    let nb = d.follower_actions;
    let eta = game.rationality();
    let table = SoftTables::from_solution(sol);
    let (_, q) = regularized_values(game, policy, &table.nu);
    let points = simplex_mesh(nb, mesh);
    let mut max_row_gain = f64::NEG_INFINITY;
    for h in 0..d.horizon {
        for s in 0..d.states {
            let o = (h * d.states + s) * nb;
            let qrow = &q[o..o + nb];
            let f = |x: &[f64]| expect(x, qrow) + entropy(x) / eta;
            let base = f(table.nu_row(h, s));
            for p in &points {
                max_row_gain = max_row_gain.max(f(p) - base);
            }
        }
    }
    let g0 = regularized_objective(game, policy, &table.nu);
    let v1 = expect(game.init_dist(), &table.v[..d.states]);
    let mut rng = stream_rng(seed, 31);
    let mut max_joint_gain = f64::NEG_INFINITY;
    for trial in 0..joint_trials {
        let scale = 0.5f64.powi(trial as i32 % 8);
        let mut nu = table.nu.clone();
        for row in nu.chunks_mut(nb) {
            for x in row.iter_mut() {
                *x = (*x + scale * rng.random::<f64>()).max(0.0);
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
        }
        max_joint_gain = max_joint_gain.max(regularized_objective(game, policy, &nu) - g0);
    }
    EntropyOracleReport { max_row_gain, max_joint_gain, value_gap: (g0 - v1).abs() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfDiffReport {
    /// `E W~_1 - J(pi)`.
    pub lhs: f64,
    pub bellman: f64,
    pub mismatch: f64,
    /// `sum_h E <U~_h, pi (x) (nu~ - nu)>`, the exact response term.
    pub response_exact: f64,
    /// `sum_h c E ||nu~_h - nu_h||_1` with `c = max(H, max |U~|)`.
    pub response_bound: f64,
    pub rhs: f64,
    /// `|lhs - (bellman + mismatch + response_exact)|`.
    pub identity_residual: f64,
    /// `E (T~ U~_1) - J(pi)` and its bound with one-step-ahead `T~ U~`.
    pub general_lhs: f64,
    pub general_rhs: f64,
    pub ok: bool,
}

/// Both performance-difference decompositions evaluated exactly.
///
/// `nu_tilde` is `[h][s][b]`, `u_tilde` is `[h][s][a][b]`, `w_tilde` is `[h][s]`.
pub fn check_performance_difference(
    game: &MarkovGame,
    policy: &LeaderPolicy,
    nu_tilde: &[f64],
    u_tilde: &[f64],
    w_tilde: &[f64],
) -> PerfDiffReport {
    let d = game.dims();
    let (ns, na, nb) = (d.states, d.leader_actions, d.follower_actions);
    let truth = soft_tables(game, policy, game.follower_reward());
    let occ = occupancy(game, policy, &truth.nu);
    let j: f64 = occ.joint.iter().zip(game.leader_reward()).map(|(w, u)| w * u).sum();
    let ut = |h: usize, s: usize, a: usize, b: usize| u_tilde[h * d.sab() + d.idx(s, a, b)];
    let wt = |h: usize, s: usize| if h < d.horizon { w_tilde[h * ns + s] } else { 0.0 };
    // (T^{pi, nu} U~_h)(s) for an arbitrary follower row
    let t_op = |h: usize, s: usize, nu_row: &[f64]| -> f64 {
        let mut acc = 0.0;
        for b in 0..nb {
            for a in 0..na {
                acc += nu_row[b] * policy.prob(h, s, b, a) * ut(h, s, a, b);
            }
        }
        acc
    };
    let t_tilde: Vec<f64> = (0..d.horizon * ns)
        .map(|i| {
            let (h, s) = (i / ns, i % ns);
            t_op(h, s, &nu_tilde[i * nb..(i + 1) * nb])
        })
        .collect();
    let tt = |h: usize, s: usize| if h < d.horizon { t_tilde[h * ns + s] } else { 0.0 };
    let max_u = u_tilde.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = (d.horizon as f64).max(max_u);
    let (mut bellman, mut general_bellman, mut mismatch, mut resp_exact, mut resp_bound) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for h in 0..d.horizon {
        for s in 0..ns {
            let m = occ.state(h, s);
            let i = h * ns + s;
            let nu_t = &nu_tilde[i * nb..(i + 1) * nb];
            let nu = truth.nu_row(h, s);
            mismatch += m * (wt(h, s) - tt(h, s));
            resp_exact += m * (tt(h, s) - t_op(h, s, nu));
            resp_bound += m * scale * l1(nu_t, nu);
            for a in 0..na {
                for b in 0..nb {
                    let w = occ.joint(h, s, a, b);
                    if w == 0.0 {
                        continue;
                    }
                    let p = game.p(h, s, a, b);
                    let next_w: f64 = p.iter().enumerate().map(|(sp, x)| x * wt(h + 1, sp)).sum();
                    let next_t: f64 = p.iter().enumerate().map(|(sp, x)| x * tt(h + 1, sp)).sum();
                    let err = ut(h, s, a, b) - game.u(h, s, a, b);
                    bellman += w * (err - next_w);
                    general_bellman += w * (err - next_t);
                }
            }
        }
    }
    let lhs = (0..ns).map(|s| game.init_dist()[s] * wt(0, s)).sum::<f64>() - j;
    let general_lhs = (0..ns).map(|s| game.init_dist()[s] * tt(0, s)).sum::<f64>() - j;
    let rhs = bellman + mismatch + resp_bound;
    let general_rhs = general_bellman + resp_bound;
    let identity_residual = (lhs - (bellman + mismatch + resp_exact)).abs();
    let ok = lhs <= rhs + 1e-9 && general_lhs <= general_rhs + 1e-9 && identity_residual <= 1e-9;
    PerfDiffReport {
        lhs,
        bellman,
        mismatch,
        response_exact: resp_exact,
        response_bound: resp_bound,
        rhs,
        identity_residual,
        general_lhs,
        general_rhs,
        ok,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseErrorReport {
    /// `sum_h H E ||nu~_h - nu_h||_1`.
    pub lhs: f64,
    pub first_order: f64,
    pub second_order: f64,
    /// `max_h E[(Q~_h - r^pi_h - gamma P^pi V~_{h+1})^2]`.
    pub bellman_sq: f64,
    pub advantage_bound: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub rhs: f64,
    pub rhs_farsighted: f64,
    pub ok: bool,
}

/// First-order / second-order bound on the response error for an estimate
/// `q_tilde` (`[h][s][b]`) of the follower's `Q`.
pub fn check_response_model_error(game: &MarkovGame, policy: &LeaderPolicy, q_tilde: &[f64]) -> ResponseErrorReport {
    let d = game.dims();
    let (ns, nb, hz) = (d.states, d.follower_actions, d.horizon);
    let eta = game.rationality();
    let gamma = game.discount();
    let truth = soft_tables(game, policy, game.follower_reward());
    let est = SoftTables::from_q(d, eta, q_tilde.to_vec());
    let occ = occupancy(game, policy, &truth.nu);
    let r_pi = prescribed_table(d, policy, game.follower_reward());
    // follower Bellman error of the estimate
    let mut e = vec![0.0; hz * ns * nb];
    for h in 0..hz {
        let v_next: Vec<f64> = if h + 1 < hz { est.v[(h + 1) * ns..(h + 2) * ns].to_vec() } else { vec![0.0; ns] };
        for s in 0..ns {
            for b in 0..nb {
                let i = (h * ns + s) * nb + b;
                e[i] = q_tilde[i] - r_pi[i] - gamma * prescribed_expectation(game, policy, h, s, b, &v_next);
            }
        }
    }
    // discounted cumulative error along the true trajectory law
    let mut g = vec![0.0; hz * ns * nb];
    for h in (0..hz).rev() {
        let mut next_mean = vec![0.0; ns];
        if h + 1 < hz {
            for (sp, m) in next_mean.iter_mut().enumerate() {
                let o = ((h + 1) * ns + sp) * nb;
                *m = expect(truth.nu_row(h + 1, sp), &g[o..o + nb]);
            }
        }
        for s in 0..ns {
            for b in 0..nb {
                let i = (h * ns + s) * nb + b;
                let cont = if h + 1 < hz { prescribed_expectation(game, policy, h, s, b, &next_mean) } else { 0.0 };
                g[i] = e[i] + gamma * cont;
            }
        }
    }
    let b_a = crate::response::advantage_bound(game).max(truth.max_abs_adv()).max(est.max_abs_adv());
    let eff = geometric_sum(gamma, hz);
    let hf = hz as f64;
    let c0 = 2.0 * eta * hf;
    let c1 = eta * eta * hf * (1.0 + 4.0 * eff) * (2.0 * eta * b_a).exp();
    let c2 = 2.0
        * eta
        * eta
        * hf
        * hf
        * (6.0 * eta * b_a).exp()
        * (1.0 + 4.0 * eff)
        * geometric_sum((2.0 * eta * b_a).exp() * gamma, hz).powi(2);
    let (mut lhs, mut first, mut second, mut bellman_sq) = (0.0, 0.0, 0.0, 0.0f64);
    for h in 0..hz {
        let mut e_sq = 0.0;
        for s in 0..ns {
            let m = occ.state(h, s);
            if m == 0.0 {
                continue;
            }
            let nu = truth.nu_row(h, s);
            let o = (h * ns + s) * nb;
            lhs += hf * m * l1(est.nu_row(h, s), nu);
            let mean = expect(nu, &g[o..o + nb]);
            for b in 0..nb {
                let w = m * nu[b];
                first += w * (g[o + b] - mean).abs();
                second += w * (est.adv[o + b] - truth.adv[o + b]).powi(2);
                e_sq += w * e[o + b].powi(2);
            }
        }
        bellman_sq = bellman_sq.max(e_sq);
    }
    let rhs = c0 * first + c1 * second;
    let rhs_farsighted = c0 * first + c2 * bellman_sq;
    ResponseErrorReport {
        lhs,
        first_order: first,
        second_order: second,
        bellman_sq,
        advantage_bound: b_a,
        c0,
        c1,
        c2,
        rhs,
        rhs_farsighted,
        ok: lhs <= rhs + 1e-9 && lhs <= rhs_farsighted + 1e-9,
    }
}

/// Largest pointwise residual of the A-difference identity
/// `A - A~ = (E_{s,b} - E_s)[F] + KL(nu || nu~) / eta`, where `F` accumulates
/// `r^pi + gamma P^pi V~ - Q~ - gamma KL_{next} / eta` along the true law.
pub fn a_difference_residual(game: &MarkovGame, policy: &LeaderPolicy, q_tilde: &[f64]) -> f64 {
    let d = game.dims();
    let (ns, nb, hz) = (d.states, d.follower_actions, d.horizon);
    let eta = game.rationality();
    let gamma = game.discount();
    let truth = soft_tables(game, policy, game.follower_reward());
    let est = SoftTables::from_q(d, eta, q_tilde.to_vec());
    let r_pi = prescribed_table(d, policy, game.follower_reward());
    let kl_at = |h: usize, s: usize| kl(truth.nu_row(h, s), est.nu_row(h, s));
    let mut f = vec![0.0; hz * ns * nb];
    let mut worst: f64 = 0.0;
    for h in (0..hz).rev() {
        let mut next = vec![0.0; ns];
        let mut v_next = vec![0.0; ns];
        if h + 1 < hz {
            for sp in 0..ns {
                let o = ((h + 1) * ns + sp) * nb;
                next[sp] = expect(truth.nu_row(h + 1, sp), &f[o..o + nb]) - kl_at(h + 1, sp) / eta;
                v_next[sp] = est.v[(h + 1) * ns + sp];
            }
        }
        for s in 0..ns {
            let o = (h * ns + s) * nb;
            for b in 0..nb {
                let local = r_pi[o + b] - q_tilde[o + b];
                let cont = if h + 1 < hz {
                    prescribed_expectation(game, policy, h, s, b, &v_next) + prescribed_expectation(game, policy, h, s, b, &next)
                } else {
                    0.0
                };
                f[o + b] = local + gamma * cont;
            }
            let mean = expect(truth.nu_row(h, s), &f[o..o + nb]);
            let k = kl_at(h, s) / eta;
            for b in 0..nb {
                let lhs = truth.adv[o + b] - est.adv[o + b];
                worst = worst.max((lhs - (f[o + b] - mean + k)).abs());
            }
        }
    }
    worst
}

/// Myopic form: `A - A~ = (E_{s,b} - E_s)[r^pi - r~^pi] + KL(nu || nu~) / eta`
/// with both responses computed from reward tables.
pub fn a_difference_residual_myopic(game: &MarkovGame, policy: &LeaderPolicy, r_tilde: &[f64]) -> f64 {
    let d = game.dims();
    let nb = d.follower_actions;
    let eta = game.rationality();
    let r_pi = prescribed_table(d, policy, game.follower_reward());
    let rt_pi = prescribed_table(d, policy, r_tilde);
    let mut worst: f64 = 0.0;
    for ((r, rt), _) in r_pi.chunks(nb).zip(rt_pi.chunks(nb)).zip(0..) {
        let (mut nu, mut nut) = (vec![0.0; nb], vec![0.0; nb]);
        let v = lse(eta, r);
        let vt = lse(eta, rt);
        for b in 0..nb {
            nu[b] = (eta * (r[b] - v)).exp();
            nut[b] = (eta * (rt[b] - vt)).exp();
        }
        let delta: Vec<f64> = r.iter().zip(rt).map(|(x, y)| x - y).collect();
        let mean = expect(&nu, &delta);
        let k = kl(&nu, &nut) / eta;
        for b in 0..nb {
            let lhs = (r[b] - v) - (rt[b] - vt);
            worst = worst.max((lhs - (delta[b] - mean + k)).abs());
        }
    }
    worst
}

/// One inequality evaluated on one instance. `slack >= 0` means it holds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

impl BoundCheck {
    /// `lhs <= rhs`.
    pub fn upper(name: &'static str, lhs: f64, rhs: f64) -> Self {
        BoundCheck { name, lhs, rhs, slack: rhs - lhs }
    }
    /// `lhs >= rhs`.
    pub fn lower(name: &'static str, lhs: f64, rhs: f64) -> Self {
        BoundCheck { name, lhs, rhs, slack: lhs - rhs }
    }
    pub fn holds(&self, tol: f64) -> bool {
        self.slack >= -tol
    }
}

/// Per-lemma minimum slack over all `(h, s)`.
fn fold_min(checks: Vec<BoundCheck>) -> Vec<BoundCheck> {
    let mut out: Vec<BoundCheck> = Vec::new();
    for c in checks {
        match out.iter_mut().find(|x| x.name == c.name) {
            Some(x) if c.slack < x.slack => *x = c,
            Some(_) => {}
            None => out.push(c),
        }
    }
    out
}

/// Pointwise response inequalities for one pair of rows. `b_a` must bound
/// `|A|` and `|A~|`.
pub fn response_bounds_row(eta: f64, b_a: f64, q: &[f64], q_tilde: &[f64]) -> Vec<BoundCheck> {
    let nb = q.len();
    let v = lse(eta, q);
    let vt = lse(eta, q_tilde);
    let a: Vec<f64> = q.iter().map(|x| x - v).collect();
    let at: Vec<f64> = q_tilde.iter().map(|x| x - vt).collect();
    let nu: Vec<f64> = a.iter().map(|x| (eta * x).exp()).collect();
    let nut: Vec<f64> = at.iter().map(|x| (eta * x).exp()).collect();
    let dist = tv(&nu, &nut);
    let upper_with = |diff: &dyn Fn(usize) -> f64| -> f64 {
        eta * (0..nb)
            .map(|b| {
                let x = diff(b);
                nu[b] * (x.abs() + 0.5 * eta * (eta * x.abs()).exp() * x * x)
            })
            .sum::<f64>()
    };
    let da = |b: usize| at[b] - a[b];
    let dq = |b: usize| q_tilde[b] - q[b];
    let mean_abs = (0..nb).map(|b| nu[b] * da(b).abs()).sum::<f64>();
    let lower2 = 0.5 * (0..nb).map(|b| nu[b] * eta * (-eta * da(b).abs()).exp() * da(b).abs()).sum::<f64>();
    let sq = (0..nb).map(|b| nu[b] * da(b).powi(2)).sum::<f64>();
    let kl_rhs = eta * (0..nb).map(|b| (nu[b] - nut[b]) * (q[b] - q_tilde[b])).sum::<f64>();
    vec![
        BoundCheck::upper("tv_upper_advantage", dist, upper_with(&da)),
        BoundCheck::upper("tv_upper_q", dist, upper_with(&dq)),
        BoundCheck::lower("tv_lower_linear", dist, eta / (2.0 * (1.0 + 2.0 * eta * b_a)) * mean_abs),
        BoundCheck::lower("tv_lower_exponential", dist, lower2),
        BoundCheck::lower("hellinger_lower", hellinger2(&nu, &nut), eta * eta / (8.0 * (1.0 + eta * b_a).powi(2)) * sq),
        BoundCheck::upper("kl_upper", kl(&nu, &nut), kl_rhs),
    ]
}

/// Myopic corollary for one state: `TV <= eta E|delta - E delta| + C3 E(delta - E delta)^2`
/// with `delta = r~^pi - r^pi` and expectations under the true response.
pub fn myopic_corollary_row(eta: f64, b_a: f64, r_pi: &[f64], r_tilde_pi: &[f64]) -> BoundCheck {
    let nu = softmax(eta, r_pi);
    let nut = softmax(eta, r_tilde_pi);
    let delta: Vec<f64> = r_tilde_pi.iter().zip(r_pi).map(|(x, y)| x - y).collect();
    let mean = expect(&nu, &delta);
    let m1: f64 = nu.iter().zip(&delta).map(|(p, x)| p * (x - mean).abs()).sum();
    let m2: f64 = nu.iter().zip(&delta).map(|(p, x)| p * (x - mean).powi(2)).sum();
    BoundCheck::upper("myopic_corollary", tv(&nu, &nut), eta * m1 + second_order_constant(eta, b_a) * m2)
}

fn softmax(eta: f64, x: &[f64]) -> Vec<f64> {
    let v = lse(eta, x);
    x.iter().map(|y| (eta * (y - v)).exp()).collect()
}

/// Every response inequality on every `(h, s)` of two solutions under the
/// same policy; one entry per lemma with its smallest slack. The bound on
/// `|A|` is the larger of the formula and the observed value.
pub fn check_response_bounds(truth: &FollowerSolution, other: &FollowerSolution) -> Result<Vec<BoundCheck>> {
    let d = truth.dims();
    if other.dims() != d || (truth.eta() - other.eta()).abs() > 0.0 {
        return Err(Error::ResponseMismatch("solutions differ in shape or rationality".into()));
    }
    let a = SoftTables::from_solution(truth);
    let b = SoftTables::from_solution(other);
    let b_a = truth.advantage_bound().max(a.max_abs_adv()).max(b.max_abs_adv());
    let myopic = truth.gamma() == 0.0 && other.gamma() == 0.0;
    let mut all = Vec::new();
    for h in 0..d.horizon {
        for s in 0..d.states {
            all.extend(response_bounds_row(truth.eta(), b_a, a.q_row(h, s), b.q_row(h, s)));
            if myopic {
                all.push(myopic_corollary_row(truth.eta(), b_a, a.q_row(h, s), b.q_row(h, s)));
            }
        }
    }
    Ok(fold_min(all))
}

/// Covariance of policy-integrated features (`[b][k]`) under `softmax(eta <phi, theta>)`.
pub fn feature_covariance(feats: &[f64], nb: usize, d: usize, eta: f64, theta: &[f64]) -> DMatrix<f64> {
    let r: Vec<f64> = (0..nb).map(|b| expect(&feats[b * d..(b + 1) * d], theta)).collect();
    let p = softmax(eta, &r);
    let mut mean = vec![0.0; d];
    for b in 0..nb {
        for k in 0..d {
            mean[k] += p[b] * feats[b * d + k];
        }
    }
    let mut c = DMatrix::zeros(d, d);
    for b in 0..nb {
        for i in 0..d {
            for j in 0..d {
                c[(i, j)] += p[b] * (feats[b * d + i] - mean[i]) * (feats[b * d + j] - mean[j]);
            }
        }
    }
    c
}

fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l.abs() > 1e-12 * top.max(1e-300) {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

/// Linear corollary at one state:
/// `TV <= min over theta in {theta~, theta*} of f(sqrt(tr(Psi^+ Sigma_s^theta)) ||theta* - theta~||_Psi)`,
/// `f(x) = eta x + C3 x^2`.
pub fn linear_corollary_row(
    feats: &[f64],
    nb: usize,
    d: usize,
    eta: f64,
    b_a: f64,
    theta_star: &[f64],
    theta_tilde: &[f64],
    psi: &DMatrix<f64>,
) -> BoundCheck {
    let r = |t: &[f64]| -> Vec<f64> { (0..nb).map(|b| expect(&feats[b * d..(b + 1) * d], t)).collect() };
    let dist = tv(&softmax(eta, &r(theta_star)), &softmax(eta, &r(theta_tilde)));
    let diff = nalgebra::DVector::from_iterator(d, theta_star.iter().zip(theta_tilde).map(|(a, b)| a - b));
    let norm = (diff.transpose() * psi * &diff)[(0, 0)].max(0.0).sqrt();
    let pinv_psi = pinv(psi);
    let c3 = second_order_constant(eta, b_a);
    let f = |x: f64| eta * x + c3 * x * x;
    let bound = [theta_tilde, theta_star]
        .iter()
        .map(|t| {
            let sigma = feature_covariance(feats, nb, d, eta, t);
            let tr = (&pinv_psi * sigma).trace().max(0.0);
            f(tr.sqrt() * norm)
        })
        .fold(f64::INFINITY, f64::min);
    BoundCheck::upper("linear_corollary", dist, bound)
}

/// `e^{2 eta B_A} g'Lg >= g'Hg >= e^{-2 eta B_A} g'Lg` for the covariance
/// matrices `L` of `nu` and `H` of `nu~`; `B_A` is read off the two
/// distributions as `max |log nu| / eta`. Returns `(upper, lower)` checks.
pub fn hessian_sandwich(eta: f64, nu: &[f64], nu_tilde: &[f64], g: &[f64]) -> (BoundCheck, BoundCheck) {
    let var = |p: &[f64]| {
        let m = expect(p, g);
        p.iter().zip(g).map(|(w, x)| w * (x - m).powi(2)).sum::<f64>()
    };
    let b_a = nu.iter().chain(nu_tilde).fold(0.0f64, |m, p| m.max(p.ln().abs())) / eta;
    let e = (2.0 * eta * b_a).exp();
    let (gl, gh) = (var(nu), var(nu_tilde));
    (BoundCheck::upper("hessian_sandwich_upper", gh, e * gl), BoundCheck::lower("hessian_sandwich_lower", gh, gl / e))
}

/// `inf_xi <nu, |delta - xi|>`, attained at one of the `delta_b`.
pub fn centered_l1(nu: &[f64], delta: &[f64]) -> f64 {
    delta
        .iter()
        .map(|&xi| nu.iter().zip(delta).map(|(p, x)| p * (x - xi).abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Identification bound `<nu, |r - r~|> <= (1 + ||x / nu||_inf / |<x, 1>|) eps`
/// where `eps = inf_xi <nu, |r - r~ - xi|>`. Requires `<x, r - r~> = 0`.
pub fn identification_bound(r: &[f64], r_tilde: &[f64], x: &[f64], nu: &[f64]) -> BoundCheck {
    let delta: Vec<f64> = r.iter().zip(r_tilde).map(|(a, b)| a - b).collect();
    let eps = centered_l1(nu, &delta);
    let ratio = x.iter().zip(nu).fold(0.0f64, |m, (a, p)| m.max((a / p).abs()));
    let lhs: f64 = nu.iter().zip(&delta).map(|(p, d)| p * d.abs()).sum();
    let sum_x: f64 = x.iter().sum();
    BoundCheck::upper("identification", lhs, (1.0 + ratio / sum_x.abs()) * eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticalReport {
    pub sum_sqrt: f64,
    pub sum: f64,
    /// `sqrt(C0 d T log(1 + 4 B^2 T / d))`, `C0 = 4 B^2 / log(1 + B^2)`.
    pub bound_loose: f64,
    /// Matrix potential bound with `L = max_t tr(X_t)` and `lambda = 1`.
    pub bound_sqrt: f64,
    pub bound_sum: f64,
}

/// Elliptical potential along a sequence `X_t` with `U_0 = I`.
pub fn elliptical_potential(xs: &[DMatrix<f64>], feature_bound: f64) -> EllipticalReport {
    let d = xs.first().map(|x| x.nrows()).unwrap_or(1);
    let t = xs.len() as f64;
    let mut u = DMatrix::<f64>::identity(d, d);
    let (mut sum_sqrt, mut sum, mut l) = (0.0, 0.0, 0.0f64);
    for x in xs {
        let inv = u.clone().cholesky().map(|c| c.inverse()).unwrap_or_else(|| pinv(&u));
        let tr = (inv * x).trace().max(0.0);
        sum_sqrt += tr.sqrt();
        sum += tr;
        l = l.max(x.trace());
        u += x;
    }
    let df = d as f64;
    let b2 = feature_bound * feature_bound;
    let bound_loose = (4.0 * b2 / (1.0 + b2).ln() * df * t * (1.0 + 4.0 * b2 * t / df).ln()).sqrt();
    let (bound_sqrt, bound_sum) = if l > 0.0 {
        let lg = df * (1.0 + l * t / df).ln();
        ((l * t / (1.0 + l).ln() * lg).sqrt(), l / (1.0 + l).ln() * lg)
    } else {
        (0.0, 0.0)
    };
    EllipticalReport { sum_sqrt, sum, bound_loose, bound_sqrt, bound_sum }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderReport {
    pub lhs: f64,
    pub hellinger: f64,
    pub constant: f64,
    pub rhs: f64,
}

/// Second-order error bound with a known transition (`P~ = P`) and the
/// absolute constant set to 1:
/// `max_h E (Q~ - r^pi - gamma P^pi V~)^2 <= L2 max_h E D_H^2(nu_h, nu~_h)`.
/// `None` when `eta > 0.5`, where the bound is not exercised.
pub fn check_second_order(
    game: &MarkovGame,
    policy: &LeaderPolicy,
    r_tilde: &[f64],
    constraint: &IdentificationConstraint,
) -> Option<SecondOrderReport> {
    let eta = game.rationality();
    if eta > 0.5 {
        return None;
    }
    let d = game.dims();
    let (ns, nb, hz) = (d.states, d.follower_actions, d.horizon);
    let gamma = game.discount();
    let truth = soft_tables(game, policy, game.follower_reward());
    let est = soft_tables(game, policy, r_tilde);
    let occ = occupancy(game, policy, &truth.nu);
    let r_pi = prescribed_table(d, policy, game.follower_reward());
    let (mut lhs, mut hel) = (0.0f64, 0.0f64);
    for h in 0..hz {
        let v_next: Vec<f64> = if h + 1 < hz { est.v[(h + 1) * ns..(h + 2) * ns].to_vec() } else { vec![0.0; ns] };
        let (mut e2, mut hh) = (0.0, 0.0);
        for s in 0..ns {
            let m = occ.state(h, s);
            let o = (h * ns + s) * nb;
            hh += m * hellinger2(truth.nu_row(h, s), est.nu_row(h, s));
            for b in 0..nb {
                let e = est.q[o + b] - r_pi[o + b] - gamma * prescribed_expectation(game, policy, h, s, b, &v_next);
                e2 += m * truth.nu[o + b] * e * e;
            }
        }
        lhs = lhs.max(e2);
        hel = hel.max(hh);
    }
    let b_a = crate::response::advantage_bound(game).max(truth.max_abs_adv()).max(est.max_abs_adv());
    let kappa = constraint.kappa();
    let c2 = gamma * (2.0 * (2.0 * eta * b_a).exp() + kappa * (4.0 * eta * b_a).exp());
    let hf = hz as f64;
    let constant = hf * hf
        * geometric_sum(c2, hz).powi(2)
        * kappa
        * kappa
        * (8.0 * eta * b_a).exp()
        * (1.0 / eta + b_a).powi(2);
    Some(SecondOrderReport { lhs, hellinger: hel, constant, rhs: constant * hel })
}

fn sample_probs(feats: &[f64], nb: usize, d: usize, eta: f64, theta: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = (0..nb).map(|b| eta * expect(&feats[b * d..(b + 1) * d], theta)).collect();
    softmax(1.0, &r)
}

/// Negative log-likelihood recomputed sample by sample.
pub fn reference_nll(data: &ChoiceData, theta: &[f64]) -> f64 {
    let (nb, d, eta) = (data.follower_actions(), data.dim(), data.eta());
    (0..data.len())
        .map(|i| {
            let (f, c) = data.sample(i);
            -sample_probs(f, nb, d, eta, theta)[c].ln()
        })
        .sum()
}

/// Confidence-set accuracy:
/// `sum_i D_H^2(nu^theta_i, nu^theta*_i) <= (L(theta) - L(theta*) + beta) / 2`.
pub fn hellinger_accuracy(data: &ChoiceData, theta: &[f64], theta_star: &[f64], beta: f64) -> BoundCheck {
    let (nb, d, eta) = (data.follower_actions(), data.dim(), data.eta());
    let lhs: f64 = (0..data.len())
        .map(|i| {
            let (f, _) = data.sample(i);
            hellinger2(&sample_probs(f, nb, d, eta, theta), &sample_probs(f, nb, d, eta, theta_star))
        })
        .sum();
    let rhs = 0.5 * (reference_nll(data, theta) - reference_nll(data, theta_star) + beta);
    BoundCheck::upper("hellinger_accuracy", lhs, rhs)
}

/// Central finite differences (step `1e-5`) against the analytic gradient.
pub fn grad_check_nll(theta: &[f64], data: &ChoiceData) -> Result<f64> {
    let (_, grad) = nll_and_grad(theta, data)?;
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..theta.len() {
        let mut up = theta.to_vec();
        let mut dn = theta.to_vec();
        up[k] += step;
        dn[k] -= step;
        let fd = (nll_myopic(&up, data)? - nll_myopic(&dn, data)?) / (2.0 * step);
        worst = worst.max((fd - grad[k]).abs());
    }
    Ok(worst)
}

/// Replicated-data setup for checking that the true parameter passes the
/// sublevel test.
#[derive(Clone, Debug)]
pub struct CoverageSetup {
    pub nb: usize,
    pub d: usize,
    pub eta: f64,
    pub theta_star: Vec<f64>,
    /// Candidate policy-feature matrices (`[b][k]`); each sample uses one
    /// drawn uniformly.
    pub designs: Vec<Vec<f64>>,
    pub samples: usize,
    pub beta: f64,
    pub fit: FitOptions,
    /// Members drawn from each confidence set for the accuracy check.
    pub set_samples: usize,
    pub c_eta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub reps: usize,
    pub covered: usize,
    pub coverage: f64,
    pub members_checked: usize,
    pub accuracy_violations: usize,
    pub min_accuracy_slack: f64,
}

/// Draws `samples` choices from the true model over random designs.
pub fn draw_choices(setup: &CoverageSetup, seed: u64) -> ChoiceData {
    let mut rng = stream_rng(seed, 17);
    let mut data = ChoiceData::new(setup.nb, setup.d, setup.eta);
    for _ in 0..setup.samples {
        let f = &setup.designs[rng.random_range(0..setup.designs.len())];
        let p = sample_probs(f, setup.nb, setup.d, setup.eta, &setup.theta_star);
        let c = crate::game::sample_index(&mut rng, &p);
        data.push(f, c);
    }
    data
}

/// Fraction of `reps` replications where `theta*` lies in the confidence set,
/// plus the Hellinger accuracy check on every sampled member.
pub fn empirical_coverage(setup: &CoverageSetup, reps: usize, seed: u64) -> Result<CoverageReport> {
    let results: Vec<Result<(bool, usize, usize, f64)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = seed.wrapping_mul(1_000_003).wrapping_add(rep as u64);
            let data = draw_choices(setup, rep_seed);
            let fit = fit_mle_myopic(&data, setup.fit, None)?;
            let covered = reference_nll(&data, &setup.theta_star) <= fit.nll + setup.beta + 1e-9;
            let (mut checked, mut bad, mut min_slack) = (0, 0, f64::INFINITY);
            if setup.set_samples > 0 && setup.beta.is_finite() {
                let opts = SetOptions { sample_size: setup.set_samples, ..SetOptions::new(setup.fit.bound, setup.c_eta) };
                let set = confidence_set(&data, &fit, setup.beta, opts, &mut stream_rng(rep_seed, 18))?;
                for theta in &set.theta_sample {
                    let c = hellinger_accuracy(&data, theta, &setup.theta_star, setup.beta);
                    checked += 1;
                    if !c.holds(1e-9) {
                        bad += 1;
                    }
                    min_slack = min_slack.min(c.slack);
                }
            }
            Ok((covered, checked, bad, min_slack))
        })
        .collect();
    let mut report = CoverageReport {
        reps,
        covered: 0,
        coverage: 0.0,
        members_checked: 0,
        accuracy_violations: 0,
        min_accuracy_slack: f64::INFINITY,
    };
    for r in results {
        let (c, n, bad, slack) = r?;
        report.covered += c as usize;
        report.members_checked += n;
        report.accuracy_violations += bad;
        report.min_accuracy_slack = report.min_accuracy_slack.min(slack);
    }
    report.coverage = if reps == 0 { 1.0 } else { report.covered as f64 / reps as f64 };
    Ok(report)
}

/// Battery summary for one named check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub instances: usize,
    pub violations: usize,
    pub min_slack: f64,
    /// Seed of the instance with the smallest slack.
    pub worst_seed: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub tolerance: f64,
    pub checks: Vec<CheckSummary>,
}

impl BatteryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.violations == 0)
    }

    pub fn get(&self, name: &str) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_junit_xml(&self) -> String {
        let failures: usize = self.checks.iter().filter(|c| c.violations > 0).count();
        let total: f64 = self.checks.iter().map(|c| c.seconds).sum();
        let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        let _ = writeln!(
            out,
            "<testsuite name=\"oracle\" tests=\"{}\" failures=\"{failures}\" time=\"{total:.3}\">",
            self.checks.len()
        );
        for c in &self.checks {
            let _ = write!(out, "  <testcase classname=\"oracle\" name=\"{}\" time=\"{:.3}\"", c.name, c.seconds);
            if c.violations > 0 {
                let _ = writeln!(
                    out,
                    ">\n    <failure message=\"{} of {} instances below -{:e} (min slack {:e}, seed {})\"/>\n  </testcase>",
                    c.violations, c.instances, self.tolerance, c.min_slack, c.worst_seed
                );
            } else {
                out.push_str("/>\n");
            }
        }
        out.push_str("</testsuite>\n");
        out
    }

    pub fn slack_table(&self) -> String {
        let mut out = format!("{:<28} {:>9} {:>10} {:>14} {:>8}\n", "check", "instances", "violations", "min slack", "seconds");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<28} {:>9} {:>10} {:>14.6e} {:>8.2}",
                c.name, c.instances, c.violations, c.min_slack, c.seconds
            );
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        BatteryConfig { instances: 1000, seed: 0, tolerance: 1e-9 }
    }
}

/// Random instance of the battery: dims, `gamma`, `eta` and a policy.
fn random_instance(seed: u64, myopic: bool) -> (MarkovGame, LeaderPolicy) {
    let mut rng = stream_rng(seed, 41);
    let dims = Dims::new(rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=3), rng.random_range(1..=3));
    let gamma = if myopic { 0.0 } else { [0.0, 0.5, 0.9, 1.0][rng.random_range(0..4)] };
    let eta = [0.5, 1.0, 2.0, 5.0][rng.random_range(0..4)];
    let game = crate::game::make_random_game(dims, gamma, eta, None, seed).expect("valid random game");
    let policy = LeaderPolicy::random(dims, &mut rng);
    (game, policy)
}

/// Follower reward near the true one: mixes in a fresh uniform table with
/// a random weight so that both tiny and large errors occur.
fn perturbed_reward<R: Rng + ?Sized>(game: &MarkovGame, rng: &mut R) -> Vec<f64> {
    let w = 10f64.powf(-4.0 * rng.random::<f64>());
    game.follower_reward().iter().map(|r| ((1.0 - w) * r + w * rng.random::<f64>()).clamp(0.0, 1.0)).collect()
}

type Outcome = (&'static str, f64);

fn lemma_instance(seed: u64) -> Vec<Outcome> {
    let mut out: Vec<Outcome> = Vec::new();
    let mut rng = stream_rng(seed, 43);
    let (game, policy) = random_instance(seed, false);
    let d = game.dims();
    let r_tilde = perturbed_reward(&game, &mut rng);
    let alt = game.with_follower_reward(r_tilde.clone()).expect("valid reward");
    let truth = crate::response::quantal_response(&game, &policy).expect("response");
    let est = crate::response::quantal_response(&alt, &policy).expect("response");
    for c in check_response_bounds(&truth, &est).expect("same shape") {
        out.push((c.name, c.slack));
    }
    let q_tilde = SoftTables::from_solution(&est).q;
    out.push(("a_difference", -a_difference_residual(&game, &policy, &q_tilde)));

    let rme = check_response_model_error(&game, &policy, &q_tilde);
    out.push(("response_model_error", (rme.rhs - rme.lhs).min(rme.rhs_farsighted - rme.lhs)));

    // performance difference: U~ and W~ near the truth, nu~ from the alternative reward
    let vals = crate::planner::leader_values(&game, &policy, &truth).expect("values");
    let mut u_tilde = vals.u_table().to_vec();
    for h in 0..d.horizon {
        let cap = (d.horizon - h) as f64;
        for x in &mut u_tilde[h * d.sab()..(h + 1) * d.sab()] {
            *x = (*x + 0.3 * (rng.random::<f64>() - 0.5)).clamp(0.0, cap);
        }
    }
    let w_tilde: Vec<f64> = (0..d.horizon * d.states)
        .map(|i| vals.w(i / d.states, i % d.states) + 0.2 * (rng.random::<f64>() - 0.5))
        .collect();
    let est_t = SoftTables::from_solution(&est);
    let pd = check_performance_difference(&game, &policy, &est_t.nu, &u_tilde, &w_tilde);
    out.push(("performance_difference", (pd.rhs - pd.lhs).min(pd.general_rhs - pd.general_lhs).min(-pd.identity_residual)));

    // myopic A-difference form
    let (mg, mp) = random_instance(seed ^ 0x5eed, true);
    let mr = perturbed_reward(&mg, &mut rng);
    out.push(("a_difference_myopic", -a_difference_residual_myopic(&mg, &mp, &mr)));

    // Hessian sandwich on random distributions
    let nb = rng.random_range(2..=4);
    let eta = [0.5, 1.0, 2.0, 5.0][rng.random_range(0..4)];
    let q1: Vec<f64> = (0..nb).map(|_| rng.random::<f64>() * 2.0).collect();
    let q2: Vec<f64> = (0..nb).map(|_| rng.random::<f64>() * 2.0).collect();
    let g: Vec<f64> = (0..nb).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let (up, lo) = hessian_sandwich(eta, &softmax(eta, &q1), &softmax(eta, &q2), &g);
    out.push(("hessian_sandwich", up.slack.min(lo.slack)));

    // identification: r~ differs from r by a vector orthogonal to x
    let x: Vec<f64> = (0..nb).map(|_| rng.random::<f64>() + 0.1).collect();
    let r: Vec<f64> = (0..nb).map(|_| rng.random::<f64>()).collect();
    let mut delta: Vec<f64> = (0..nb).map(|_| rng.random::<f64>() - 0.5).collect();
    let xd: f64 = expect(&x, &delta);
    let xx: f64 = expect(&x, &x);
    delta.iter_mut().zip(&x).for_each(|(dd, xi)| *dd -= xd / xx * xi);
    let rt: Vec<f64> = r.iter().zip(&delta).map(|(a, b)| a - b).collect();
    let nu = softmax(eta, &q1);
    out.push(("identification", identification_bound(&r, &rt, &x, &nu).slack));

    // linear corollary, Psi = I and Psi = data covariance + I
    let dim = rng.random_range(1..=4);
    let feats: Vec<f64> = (0..nb * dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let ts: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
    let scale = 10f64.powf(-3.0 * rng.random::<f64>());
    let tt: Vec<f64> = ts.iter().map(|t| t + scale * (rng.random::<f64>() - 0.5)).collect();
    let b_a_lin = {
        let a1 = softmax(eta, &(0..nb).map(|b| expect(&feats[b * dim..(b + 1) * dim], &ts)).collect::<Vec<_>>());
        let a2 = softmax(eta, &(0..nb).map(|b| expect(&feats[b * dim..(b + 1) * dim], &tt)).collect::<Vec<_>>());
        a1.iter().chain(&a2).fold(0.0f64, |m, p| m.max(p.ln().abs())) / eta
    };
    let ident = DMatrix::identity(dim, dim);
    out.push(("linear_corollary_identity", linear_corollary_row(&feats, nb, dim, eta, b_a_lin, &ts, &tt, &ident).slack));
    let mut psi = DMatrix::identity(dim, dim);
    for _ in 0..rng.random_range(1..50) {
        let f: Vec<f64> = (0..nb * dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        psi += feature_covariance(&f, nb, dim, eta, &ts);
    }
    out.push(("linear_corollary_data", linear_corollary_row(&feats, nb, dim, eta, b_a_lin, &ts, &tt, &psi).slack));

    // second-order bound on a constrained game with small eta
    let cdims = Dims::new(rng.random_range(1..=2), 2, 2, rng.random_range(1..=2));
    let constraint = IdentificationConstraint::sum_to_half(2);
    let cg = crate::game::make_random_game(cdims, [0.0, 0.5, 1.0][rng.random_range(0..3)], 0.5, Some(&constraint), seed)
        .expect("constrained game");
    let cp = LeaderPolicy::random(cdims, &mut rng);
    let ct = crate::game::make_random_game(cdims, cg.discount(), 0.5, Some(&constraint), seed ^ 0xabc)
        .expect("constrained game");
    if let Some(rep) = check_second_order(&cg, &cp, ct.follower_reward(), &constraint) {
        out.push(("second_order", rep.rhs - rep.lhs));
    }
    out
}

/// Elliptical potential along a simulated run with random designs.
fn elliptical_instance(seed: u64) -> Vec<Outcome> {
    let mut rng = stream_rng(seed, 47);
    let nb = rng.random_range(2..=3);
    let d = rng.random_range(1..=4);
    let eta = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    let theta: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let t = rng.random_range(10..200);
    let xs: Vec<DMatrix<f64>> = (0..t)
        .map(|_| {
            let mut f: Vec<f64> = (0..nb * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            for row in f.chunks_mut(d) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1.0 {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            }
            feature_covariance(&f, nb, d, eta, &theta)
        })
        .collect();
    let rep = elliptical_potential(&xs, 1.0);
    vec![
        ("elliptical_potential", (rep.bound_loose - rep.sum_sqrt).min(rep.bound_sqrt - rep.sum_sqrt).min(rep.bound_sum - rep.sum)),
    ]
}

/// MLE gradient against finite differences (error budget `1e-6`).
fn gradient_instance(seed: u64) -> Vec<Outcome> {
    let mut rng = stream_rng(seed, 53);
    let nb = rng.random_range(2..=4);
    let d = rng.random_range(1..=4);
    let eta = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    let mut data = ChoiceData::new(nb, d, eta);
    for _ in 0..rng.random_range(1..40) {
        let f: Vec<f64> = (0..nb * d).map(|_| rng.random::<f64>()).collect();
        data.push(&f, rng.random_range(0..nb));
    }
    let theta: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let err = grad_check_nll(&theta, &data).unwrap_or(f64::INFINITY);
    vec![("nll_gradient", 1e-6 - err)]
}

/// Quantal-response invariants and the regularized-objective grid search.
fn response_instance(seed: u64) -> Vec<Outcome> {
    let (game, policy) = random_instance(seed, false);
    let sol = crate::response::quantal_response(&game, &policy).expect("response");
    let mut out = vec![("response_invariants", 1e-10 - sol.invariant_violation())];
    let reference = soft_tables(&game, &policy, game.follower_reward());
    let ours = SoftTables::from_solution(&sol);
    let gap = reference.q.iter().zip(&ours.q).chain(reference.nu.iter().zip(&ours.nu)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    out.push(("response_reference", 1e-10 - gap));
    let mesh = if game.dims().follower_actions <= 2 { 1000 } else { 100 };
    let rep = entropy_objective_oracle(&game, &policy, &sol, mesh, 16, seed);
    out.push(("regularized_objective", (1e-4 - rep.max_row_gain).min(1e-4 - rep.max_joint_gain).min(1e-10 - rep.value_gap)));
    out
}

/// Exact myopic QSE against exhaustive enumeration.
fn qse_instance(seed: u64) -> Vec<Outcome> {
    let mut rng = stream_rng(seed, 59);
    let dims = Dims::new(rng.random_range(1..=2), 2, 2, rng.random_range(1..=2));
    let eta = [0.5, 1.0, 5.0][rng.random_range(0..3)];
    let game = crate::game::make_random_game(dims, 0.0, eta, None, seed).expect("game");
    let grid = PrescriptionGrid::for_dims(dims, 1).expect("grid");
    let (_, j_dp) = crate::planner::solve_qse_myopic(&game, &grid).expect("qse");
    let (_, j_bf) = brute_force_qse(&game, &grid).expect("enumerable");
    vec![("qse_brute_force", 1e-9 - (j_dp - j_bf).abs())]
}

/// Runs every check on `cfg.instances` seeded instances in parallel.
/// Results are merged in seed order so the report is deterministic apart
/// from timings.
pub fn run_battery(cfg: &BatteryConfig) -> BatteryReport {
    let groups: [(fn(u64) -> Vec<Outcome>, usize); 5] = [
        (lemma_instance, cfg.instances),
        (elliptical_instance, cfg.instances.div_ceil(10)),
        (gradient_instance, cfg.instances.div_ceil(10)),
        (response_instance, cfg.instances.div_ceil(10)),
        (qse_instance, cfg.instances.div_ceil(20)),
    ];
    let mut checks: Vec<CheckSummary> = Vec::new();
    for (run, count) in groups {
        let start = Instant::now();
        let results: Vec<(u64, Vec<Outcome>)> = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i);
                (seed, run(seed))
            })
            .collect();
        let elapsed = start.elapsed().as_secs_f64();
        let first = checks.len();
        for (seed, outcomes) in results {
            for (name, slack) in outcomes {
                let entry = match checks[first..].iter().position(|c| c.name == name) {
                    Some(p) => &mut checks[first + p],
                    None => {
                        checks.push(CheckSummary {
                            name: name.into(),
                            instances: 0,
                            violations: 0,
                            min_slack: f64::INFINITY,
                            worst_seed: seed,
                            seconds: 0.0,
                        });
                        checks.last_mut().unwrap()
                    }
                };
                entry.instances += 1;
                if !(slack >= -cfg.tolerance) {
                    entry.violations += 1;
                }
                if slack < entry.min_slack || slack.is_nan() {
                    entry.min_slack = slack;
                    entry.worst_seed = seed;
                }
            }
        }
        let n = checks.len() - first;
        for c in &mut checks[first..] {
            c.seconds = elapsed / n.max(1) as f64;
        }
    }
    BatteryReport { tolerance: cfg.tolerance, checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::make_random_game;
    use crate::response::quantal_response;

    #[test]
    fn test_mesh_counts() {
        assert_eq!(simplex_mesh(2, 10).len(), 11);
        assert_eq!(simplex_mesh(3, 4).len(), 15);
        for p in simplex_mesh(3, 7) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_brute_force_single_state_single_step() {
        let dims = Dims::new(1, 2, 2, 1);
        let game = make_random_game(dims, 0.0, 1.0, None, 3).unwrap();
        let grid = PrescriptionGrid::for_dims(dims, 2).unwrap();
        let (_, j) = brute_force_qse(&game, &grid).unwrap();
        let direct = grid
            .iter()
            .map(|p| exact_j(&game, &LeaderPolicy::constant(dims, p).unwrap()))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(j, direct);
    }

    #[test]
    fn test_brute_force_guard() {
        let dims = Dims::new(4, 2, 2, 3);
        let game = make_random_game(dims, 0.0, 1.0, None, 3).unwrap();
        let grid = PrescriptionGrid::for_dims(dims, 2).unwrap();
        assert!(matches!(brute_force_qse(&game, &grid), Err(Error::TooLarge(_))));
    }

    #[test]
    fn test_brute_force_matches_dp() {
        for seed in 0..10 {
            let dims = Dims::new(2, 2, 2, 2);
            let game = make_random_game(dims, 0.0, 1.0, None, seed).unwrap();
            let grid = PrescriptionGrid::for_dims(dims, 1).unwrap();
            let (_, a) = brute_force_qse(&game, &grid).unwrap();
            let (_, b) = crate::planner::solve_qse_myopic(&game, &grid).unwrap();
            assert!((a - b).abs() <= 1e-9, "seed {seed}: {a} vs {b}");
        }
    }

    #[test]
    fn test_perf_diff_zero_at_truth() {
        let game = make_random_game(Dims::new(2, 2, 2, 3), 0.5, 1.0, None, 5).unwrap();
        let policy = LeaderPolicy::random(game.dims(), &mut stream_rng(5, 0));
        let sol = quantal_response(&game, &policy).unwrap();
        let vals = crate::planner::leader_values(&game, &policy, &sol).unwrap();
        let d = game.dims();
        let w: Vec<f64> = (0..d.horizon * d.states).map(|i| vals.w(i / d.states, i % d.states)).collect();
        let rep = check_performance_difference(&game, &policy, &SoftTables::from_solution(&sol).nu, vals.u_table(), &w);
        for x in [rep.lhs, rep.bellman, rep.mismatch, rep.response_exact, rep.response_bound] {
            assert!(x.abs() < 1e-12, "{rep:?}");
        }
        assert!(rep.ok);
    }

    #[test]
    fn test_identical_solutions_zero_lhs() {
        let game = make_random_game(Dims::new(2, 2, 3, 2), 0.9, 2.0, None, 1).unwrap();
        let policy = LeaderPolicy::random(game.dims(), &mut stream_rng(1, 0));
        let sol = quantal_response(&game, &policy).unwrap();
        for c in check_response_bounds(&sol, &sol).unwrap() {
            assert!(c.lhs.abs() < 1e-12, "{c:?}");
            assert!((c.slack - (c.rhs - c.lhs).abs()).abs() < 1e-12 || c.slack.abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn test_regularized_objective_matches_soft_value() {
        let game = make_random_game(Dims::new(2, 2, 2, 2), 1.0, 1.0, None, 2).unwrap();
        let policy = LeaderPolicy::random(game.dims(), &mut stream_rng(2, 0));
        let sol = quantal_response(&game, &policy).unwrap();
        let rep = entropy_objective_oracle(&game, &policy, &sol, 1000, 32, 2);
        assert!(rep.value_gap < 1e-12);
        assert!(rep.max_row_gain <= 1e-4 && rep.max_joint_gain <= 0.0, "{rep:?}");
    }

    #[test]
    fn test_grad_check_uniform_theta() {
        let mut data = ChoiceData::new(3, 2, 1.0);
        data.push(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 1);
        data.push(&[0.6, 0.1, 0.0, 0.4, 0.9, 0.2], 2);
        assert!(grad_check_nll(&[0.0, 0.0], &data).unwrap() <= 1e-6);
    }

    #[test]
    fn test_grad_check_high_rationality() {
        let mut rng = stream_rng(9, 0);
        let mut data = ChoiceData::new(3, 3, 100.0);
        for _ in 0..20 {
            let f: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
            data.push(&f, rng.random_range(0..3));
        }
        let theta: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
        assert!(grad_check_nll(&theta, &data).unwrap() <= 1e-4);
    }

    #[test]
    fn test_identification_tight_when_equal() {
        let c = identification_bound(&[0.3, 0.5], &[0.3, 0.5], &[1.0, 1.0], &[0.5, 0.5]);
        assert_eq!(c.lhs, 0.0);
        assert_eq!(c.rhs, 0.0);
    }

    #[test]
    fn test_coverage_infinite_beta() {
        let setup = CoverageSetup {
            nb: 3,
            d: 2,
            eta: 1.0,
            theta_star: vec![0.3, -0.2],
            designs: vec![vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5], vec![0.2, 0.1, 0.9, 0.3, 0.0, 0.7]],
            samples: 50,
            beta: f64::INFINITY,
            fit: FitOptions::default(),
            set_samples: 0,
            c_eta: 3.0,
        };
        let rep = empirical_coverage(&setup, 100, 0).unwrap();
        assert_eq!(rep.coverage, 1.0);
    }

    #[test]
    fn test_small_battery_passes() {
        let rep = run_battery(&BatteryConfig { instances: 60, seed: 3, tolerance: 1e-9 });
        assert!(rep.passed(), "{}", rep.slack_table());
        assert!(rep.to_junit_xml().contains("testsuite"));
    }
}
