//! Leader value functions, `J(pi)`, the prescription grid and the exact
//! myopic QSE by dynamic programming over that grid.

use crate::error::{Error, Result};
use crate::game::{Dims, LeaderPolicy, MarkovGame};
use crate::response::{prescribed_reward, quantal_response, soft_max_into, FollowerSolution};

/// Leader `U_h(s, a, b)` and `W_h(s)` under a fixed `(pi, nu)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LeaderValues {
    dims: Dims,
    u_fn: Vec<f64>,
    w: Vec<f64>,
}

impl LeaderValues {
    pub fn u(&self, h: usize, s: usize, a: usize, b: usize) -> f64 {
        self.u_fn[h * self.dims.sab() + self.dims.idx(s, a, b)]
    }
    pub fn u_step(&self, h: usize) -> &[f64] {
        let n = self.dims.sab();
        &self.u_fn[h * n..(h + 1) * n]
    }
    pub fn u_table(&self) -> &[f64] {
        &self.u_fn
    }
    /// `W_h(s)`; `h = H` gives 0.
    pub fn w(&self, h: usize, s: usize) -> f64 {
        if h >= self.dims.horizon {
            0.0
        } else {
            self.w[h * self.dims.states + s]
        }
    }
}

/// `<U(s, ., .), alpha (x) nu>` for one state's `[a][b]` block.
#[inline]
pub fn pair_value(u_state: &[f64], prescription: &[f64], nu: &[f64], na: usize, nb: usize) -> f64 {
    let mut acc = 0.0;
    for b in 0..nb {
        if nu[b] == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for a in 0..na {
            inner += prescription[b * na + a] * u_state[a * nb + b];
        }
        acc += nu[b] * inner;
    }
    acc
}

/// Backward recursion `U_h = u_h + P_h W_{h+1}`, `W_h = <U_h, pi_h (x) nu_h>`
/// with an arbitrary follower table `nu[h][s][b]`.
pub fn leader_values_with(game: &MarkovGame, policy: &LeaderPolicy, nu: &dyn Fn(usize, usize) -> Vec<f64>) -> LeaderValues {
    let d = game.dims();
    let (ns, na, nb) = (d.states, d.leader_actions, d.follower_actions);
    let mut u_fn = vec![0.0; d.horizon * d.sab()];
    let mut w = vec![0.0; (d.horizon + 1) * ns];
    for h in (0..d.horizon).rev() {
        for s in 0..ns {
            for a in 0..na {
                for b in 0..nb {
                    let next = &w[(h + 1) * ns..(h + 2) * ns];
                    let cont: f64 = game.p(h, s, a, b).iter().zip(next).map(|(p, x)| p * x).sum();
                    u_fn[h * d.sab() + d.idx(s, a, b)] = game.u(h, s, a, b) + cont;
                }
            }
            let block = &u_fn[h * d.sab() + d.idx(s, 0, 0)..h * d.sab() + d.idx(s, 0, 0) + d.ab()];
            w[h * ns + s] = pair_value(block, policy.prescription(h, s), &nu(h, s), na, nb);
        }
    }
    w.truncate(d.horizon * ns);
    LeaderValues { dims: d, u_fn, w }
}

pub fn leader_values(game: &MarkovGame, policy: &LeaderPolicy, response: &FollowerSolution) -> Result<LeaderValues> {
    if policy.dims() != game.dims() || response.dims() != game.dims() {
        return Err(Error::DimensionMismatch("game / policy / response".into()));
    }
    Ok(leader_values_with(game, policy, &|h, s| response.nu_row(h, s).to_vec()))
}

/// `J(pi) = E_{rho0} W_1` under the follower's quantal response.
pub fn evaluate_j(game: &MarkovGame, policy: &LeaderPolicy) -> Result<f64> {
    let resp = quantal_response(game, policy)?;
    let vals = leader_values(game, policy, &resp)?;
    Ok(initial_value(game, &vals))
}

pub fn initial_value(game: &MarkovGame, vals: &LeaderValues) -> f64 {
    game.init_dist().iter().enumerate().map(|(s, p)| p * vals.w(0, s)).sum()
}

/// Exact state marginals `Pr(s_h = s)` under `(pi, nu)`, `[h][s]`.
pub fn state_distribution(game: &MarkovGame, policy: &LeaderPolicy, response: &FollowerSolution) -> Vec<f64> {
    let d = game.dims();
    let (ns, na, nb) = (d.states, d.leader_actions, d.follower_actions);
    let mut dist = vec![0.0; d.horizon * ns];
    dist[..ns].copy_from_slice(game.init_dist());
    for h in 0..d.horizon - 1 {
        for s in 0..ns {
            let m = dist[h * ns + s];
            if m == 0.0 {
                continue;
            }
            let pres = policy.prescription(h, s);
            for b in 0..nb {
                let wb = m * response.nu(h, s, b);
                for a in 0..na {
                    let w = wb * pres[b * na + a];
                    if w == 0.0 {
                        continue;
                    }
                    for (sp, p) in game.p(h, s, a, b).iter().enumerate() {
                        dist[(h + 1) * ns + sp] += w * p;
                    }
                }
            }
        }
    }
    dist
}

/// Finite search set of prescriptions: every deterministic map `B -> A`
/// (first, lexicographic) followed by the remaining products of simplex
/// mesh points with coordinates in multiples of `1/mesh`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrescriptionGrid {
    leader_actions: usize,
    follower_actions: usize,
    mesh: usize,
    items: Vec<Vec<f64>>,
    deterministic: usize,
}

const GRID_LIMIT: usize = 2_000_000;

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn product_len(base: usize, exp: usize) -> Option<usize> {
    (0..exp).try_fold(1usize, |acc, _| acc.checked_mul(base))
}

impl PrescriptionGrid {
    /// `mesh = 0` keeps only the deterministic maps.
    pub fn new(leader_actions: usize, follower_actions: usize, mesh: usize) -> Result<Self> {
        if leader_actions == 0 || follower_actions == 0 {
            return Err(Error::EmptyGrid);
        }
        let (na, nb) = (leader_actions, follower_actions);
        let n_det = product_len(na, nb).filter(|&n| n <= GRID_LIMIT).ok_or_else(|| Error::TooLarge("grid".into()))?;
        let mut items = Vec::new();
        for code in 0..n_det {
            let mut p = vec![0.0; na * nb];
            let mut c = code;
            for b in (0..nb).rev() {
                p[b * na + c % na] = 1.0;
                c /= na;
            }
            items.push(p);
        }
        if mesh > 0 {
            let rows: Vec<Vec<f64>> = compositions(mesh, na)
                .into_iter()
                .map(|c| c.into_iter().map(|k| k as f64 / mesh as f64).collect())
                .collect();
            let total =
                product_len(rows.len(), nb).filter(|&n| n <= GRID_LIMIT).ok_or_else(|| Error::TooLarge("grid".into()))?;
            for code in 0..total {
                let mut idx = vec![0usize; nb];
                let mut c = code;
                for b in (0..nb).rev() {
                    idx[b] = c % rows.len();
                    c /= rows.len();
                }
                if idx.iter().all(|&i| rows[i].iter().any(|&x| x == 1.0)) {
                    continue;
                }
                let mut p = Vec::with_capacity(na * nb);
                for &i in &idx {
                    p.extend_from_slice(&rows[i]);
                }
                items.push(p);
            }
        }
        Ok(PrescriptionGrid { leader_actions: na, follower_actions: nb, mesh, items, deterministic: n_det })
    }

    pub fn for_dims(dims: Dims, mesh: usize) -> Result<Self> {
        PrescriptionGrid::new(dims.leader_actions, dims.follower_actions, mesh)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
    pub fn mesh(&self) -> usize {
        self.mesh
    }
    pub fn deterministic_count(&self) -> usize {
        self.deterministic
    }
    pub fn get(&self, i: usize) -> &[f64] {
        &self.items[i]
    }
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.items.iter().map(|v| v.as_slice())
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.leader_actions, self.follower_actions)
    }
}

/// Follower models a prescription is scored against: one reward block
/// `r_h(s, ., .)`, or a finite sample over which the score is minimized or
/// maximized.
#[derive(Clone, Copy, Debug)]
pub enum ModelSet<'a> {
    Single(&'a [f64]),
    Min(&'a [Vec<f64>]),
    Max(&'a [Vec<f64>]),
}

/// Signed score adjustment `f(grid index, model index, nu)` added to the
/// objective (negative for penalties, positive for bonuses).
pub type Penalty<'a> = &'a dyn Fn(usize, usize, &[f64]) -> f64;

/// Scores within this relative gap count as ties.
const TIE_TOL: f64 = 1e-12;

/// Exhaustive scan of `grid` for one state, scoring
/// `<U(s,.,.), alpha (x) nu^{alpha,theta}> + penalty`. Ties go to the lower
/// grid index.
pub fn prescription_argmax(
    u_state: &[f64],
    models: ModelSet<'_>,
    eta: f64,
    penalty: Option<Penalty<'_>>,
    grid: &PrescriptionGrid,
) -> Result<(usize, f64)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let (na, nb) = grid.shape();
    if u_state.len() != na * nb {
        return Err(Error::DimensionMismatch("value block vs grid".into()));
    }
    let single;
    let (list, minimize): (Vec<&[f64]>, Option<bool>) = match models {
        ModelSet::Single(r) => {
            single = [r];
            (single.to_vec(), None)
        }
        ModelSet::Min(v) => (v.iter().map(|x| x.as_slice()).collect(), Some(true)),
        ModelSet::Max(v) => (v.iter().map(|x| x.as_slice()).collect(), Some(false)),
    };
    if list.is_empty() {
        return Err(Error::EmptyThetaSample);
    }
    let mut rbuf = vec![0.0; nb];
    let mut nu = vec![0.0; nb];
    let mut best = (0usize, f64::NEG_INFINITY);
    for (gi, alpha) in grid.iter().enumerate() {
        let mut score = match minimize {
            Some(true) => f64::INFINITY,
            _ => f64::NEG_INFINITY,
        };
        for (mi, r) in list.iter().enumerate() {
            prescribed_reward(r, alpha, na, nb, &mut rbuf);
            soft_max_into(eta, &rbuf, &mut nu);
            let mut v = pair_value(u_state, alpha, &nu, na, nb);
            if let Some(pen) = penalty {
                v += pen(gi, mi, &nu);
            }
            score = if minimize == Some(true) { score.min(v) } else { score.max(v) };
        }
        if gi == 0 || score > best.1 + TIE_TOL * best.1.abs().max(1.0) {
            best = (gi, score);
        }
    }
    Ok(best)
}

/// Exact QSE for a myopic follower over grid-valued policies.
///
/// Because the myopic response at `(h, s)` depends only on `pi_h(s)`, the
/// leader's problem decomposes into per-state maximizations solved backwards.
pub fn solve_qse_myopic(game: &MarkovGame, grid: &PrescriptionGrid) -> Result<(LeaderPolicy, f64)> {
    if game.discount() > 0.0 {
        return Err(Error::NotMyopic(game.discount()));
    }
    let d = game.dims();
    if grid.shape() != (d.leader_actions, d.follower_actions) {
        return Err(Error::DimensionMismatch("grid vs game".into()));
    }
    let mut policy = LeaderPolicy::uniform(d);
    let mut w_next = vec![0.0; d.states];
    let mut u_state = vec![0.0; d.ab()];
    for h in (0..d.horizon).rev() {
        let mut w = vec![0.0; d.states];
        for s in 0..d.states {
            for a in 0..d.leader_actions {
                for b in 0..d.follower_actions {
                    let cont: f64 = game.p(h, s, a, b).iter().zip(&w_next).map(|(p, x)| p * x).sum();
                    u_state[a * d.follower_actions + b] = game.u(h, s, a, b) + cont;
                }
            }
            let r = &game.follower_reward_step(h)[d.idx(s, 0, 0)..d.idx(s, 0, 0) + d.ab()];
            let (gi, v) = prescription_argmax(&u_state, ModelSet::Single(r), game.rationality(), None, grid)?;
            policy.set_prescription(h, s, grid.get(gi));
            w[s] = v;
        }
        w_next = w;
    }
    let j = game.init_dist().iter().zip(&w_next).map(|(p, x)| p * x).sum();
    Ok((policy, j))
}

/// `J* - J(pi)`, reported without clamping.
pub fn suboptimality(game: &MarkovGame, policy: &LeaderPolicy, reference_jstar: f64) -> Result<f64> {
    Ok(reference_jstar - evaluate_j(game, policy)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{make_random_game, sample_trajectory, stream_rng};
    use proptest::prelude::*;

    #[test]
    fn test_zero_leader_reward() {
        let g = make_random_game(Dims::new(3, 2, 2, 3), 0.5, 1.0, None, 2).unwrap();
        let d = g.dims();
        let g = MarkovGame::new(d, g.init_dist().to_vec(), vec![0.0; d.horizon * d.sab()], g.follower_reward().to_vec(), g.transition().to_vec(), 0.5, 1.0).unwrap();
        let pol = LeaderPolicy::uniform(d);
        let v = leader_values(&g, &pol, &quantal_response(&g, &pol).unwrap()).unwrap();
        assert!(v.u_table().iter().all(|&x| x == 0.0));
        assert_eq!(evaluate_j(&g, &pol).unwrap(), 0.0);
    }

    #[test]
    fn test_horizon_one() {
        let g = make_random_game(Dims::new(2, 2, 3, 1), 0.0, 1.0, None, 3).unwrap();
        let pol = LeaderPolicy::uniform(g.dims());
        let resp = quantal_response(&g, &pol).unwrap();
        let v = leader_values(&g, &pol, &resp).unwrap();
        assert_eq!(v.u_step(0), g.leader_reward_step(0));
        for s in 0..2 {
            let mut e = 0.0;
            for b in 0..3 {
                for a in 0..2 {
                    e += resp.nu(0, s, b) * 0.5 * g.u(0, s, a, b);
                }
            }
            assert!((v.w(0, s) - e).abs() < 1e-15);
        }
    }

    #[test]
    fn test_constant_game_j() {
        let d = Dims::new(1, 1, 1, 3);
        let g = MarkovGame::new(d, vec![1.0], vec![1.0; 3], vec![0.5; 3], vec![1.0; 3], 0.0, 1.0).unwrap();
        assert_eq!(evaluate_j(&g, &LeaderPolicy::uniform(d)).unwrap(), 3.0);
    }

    #[test]
    fn test_j_matches_monte_carlo() {
        for seed in 0..3 {
            let g = make_random_game(Dims::new(3, 2, 2, 3), 0.0, 2.0, None, seed).unwrap();
            let pol = LeaderPolicy::uniform(g.dims());
            let resp = quantal_response(&g, &pol).unwrap();
            let j = evaluate_j(&g, &pol).unwrap();
            let mut rng = stream_rng(seed, 1);
            let n = 100_000;
            let (mut m, mut m2) = (0.0, 0.0);
            for _ in 0..n {
                let t = sample_trajectory(&g, &pol, &resp, 0, &mut rng).unwrap();
                let ret: f64 = t.steps.iter().map(|s| s.leader_reward).sum();
                m += ret;
                m2 += ret * ret;
            }
            m /= n as f64;
            let sd = ((m2 / n as f64 - m * m) / n as f64).sqrt();
            assert!((m - j).abs() <= 3.0 * sd, "seed {seed}: mc {m} exact {j}");
        }
    }

    #[test]
    fn test_grid_contents() {
        let grid = PrescriptionGrid::new(2, 2, 10).unwrap();
        assert_eq!(grid.len(), 121);
        assert_eq!(grid.deterministic_count(), 4);
        assert_eq!(grid.get(0), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(grid.get(1), &[1.0, 0.0, 0.0, 1.0]);
        for p in grid.iter() {
            for row in p.chunks(2) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(PrescriptionGrid::new(3, 2, 0).unwrap().len(), 9);
    }

    #[test]
    fn test_argmax_constant_objective() {
        let grid = PrescriptionGrid::new(2, 2, 4).unwrap();
        let r = [0.1, 0.7, 0.3, 0.2];
        let (i, v) = prescription_argmax(&[0.4; 4], ModelSet::Single(&r), 1.0, None, &grid).unwrap();
        assert_eq!(i, 0);
        assert!((v - 0.4).abs() < 1e-15);
    }

    #[test]
    fn test_argmax_dominant_action() {
        let grid = PrescriptionGrid::new(2, 1, 10).unwrap();
        let (i, v) = prescription_argmax(&[1.0, 0.0], ModelSet::Single(&[0.3, 0.9]), 1.0, None, &grid).unwrap();
        assert_eq!(grid.get(i), &[1.0, 0.0]);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn test_argmax_errors() {
        let grid = PrescriptionGrid::new(2, 2, 1).unwrap();
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(prescription_argmax(&[0.0; 4], ModelSet::Min(&empty), 1.0, None, &grid), Err(Error::EmptyThetaSample)));
    }

    #[test]
    fn test_mesh_refinement() {
        for seed in 0..10 {
            let g = make_random_game(Dims::new(1, 2, 2, 1), 0.0, 1.0, None, seed).unwrap();
            let (_, j20) = solve_qse_myopic(&g, &PrescriptionGrid::new(2, 2, 20).unwrap()).unwrap();
            let (_, j40) = solve_qse_myopic(&g, &PrescriptionGrid::new(2, 2, 40).unwrap()).unwrap();
            assert!((j20 - j40).abs() <= 0.02);
        }
    }

    #[test]
    fn test_not_myopic() {
        let g = make_random_game(Dims::new(1, 2, 2, 1), 0.5, 1.0, None, 0).unwrap();
        assert!(matches!(solve_qse_myopic(&g, &PrescriptionGrid::new(2, 2, 0).unwrap()), Err(Error::NotMyopic(_))));
    }

    #[test]
    fn test_leader_reward_independent_of_actions() {
        let base = make_random_game(Dims::new(2, 2, 2, 3), 0.0, 1.0, None, 8).unwrap();
        let d = base.dims();
        let mut u = vec![0.0; d.horizon * d.sab()];
        for h in 0..3 {
            for s in 0..2 {
                for k in 0..4 {
                    u[h * d.sab() + s * 4 + k] = 0.35;
                }
            }
        }
        let g = MarkovGame::new(d, base.init_dist().to_vec(), u, base.follower_reward().to_vec(), base.transition().to_vec(), 0.0, 1.0).unwrap();
        let (_, jstar) = solve_qse_myopic(&g, &PrescriptionGrid::new(2, 2, 3).unwrap()).unwrap();
        let j_uniform = evaluate_j(&g, &LeaderPolicy::uniform(d)).unwrap();
        assert!((jstar - j_uniform).abs() < 1e-12);
        assert!((jstar - 1.05).abs() < 1e-12);
    }

    #[test]
    fn test_nested_grids_monotone() {
        for seed in 0..10 {
            let g = make_random_game(Dims::new(2, 2, 2, 2), 0.0, 1.0, None, seed).unwrap();
            let (_, j0) = solve_qse_myopic(&g, &PrescriptionGrid::new(2, 2, 0).unwrap()).unwrap();
            let (_, j2) = solve_qse_myopic(&g, &PrescriptionGrid::new(2, 2, 2).unwrap()).unwrap();
            let (_, j4) = solve_qse_myopic(&g, &PrescriptionGrid::new(2, 2, 4).unwrap()).unwrap();
            assert!(j2 >= j0 - 1e-12 && j4 >= j2 - 1e-12);
        }
    }

    #[test]
    fn test_suboptimality() {
        let g = make_random_game(Dims::new(2, 2, 2, 2), 0.0, 1.0, None, 12).unwrap();
        let grid = PrescriptionGrid::new(2, 2, 4).unwrap();
        let (pi, jstar) = solve_qse_myopic(&g, &grid).unwrap();
        assert!(suboptimality(&g, &pi, jstar).unwrap().abs() < 1e-12);
        let unif = LeaderPolicy::uniform(g.dims());
        let gap = suboptimality(&g, &unif, jstar).unwrap();
        assert!(gap > 0.0);
        assert_eq!(gap, jstar - evaluate_j(&g, &unif).unwrap());
    }

    proptest! {
        #[test]
        fn prop_leader_value_invariants(seed in 0u64..5000, gamma in 0.0f64..1.0) {
            let d = Dims::new(1 + seed as usize % 3, 2, 2, 1 + seed as usize % 4);
            let g = make_random_game(d, gamma, 1.5, None, seed).unwrap();
            let pol = LeaderPolicy::uniform(d);
            let resp = quantal_response(&g, &pol).unwrap();
            let v = leader_values(&g, &pol, &resp).unwrap();
            for h in 0..d.horizon {
                let cap = (d.horizon - h) as f64;
                for s in 0..d.states {
                    prop_assert!(v.w(h, s) >= 0.0 && v.w(h, s) <= cap + 1e-12);
                    let mut e = 0.0;
                    for a in 0..2 { for b in 0..2 {
                        let x = v.u(h, s, a, b);
                        prop_assert!(x >= 0.0 && x <= cap + 1e-12);
                        let next: f64 = g.p(h, s, a, b).iter().enumerate().map(|(sp, p)| p * v.w(h + 1, sp)).sum();
                        prop_assert!((x - g.u(h, s, a, b) - next).abs() <= 1e-10);
                        e += resp.nu(h, s, b) * pol.prob(h, s, b, a) * x;
                    }}
                    prop_assert!((e - v.w(h, s)).abs() <= 1e-10);
                }
            }
        }
    }
}
