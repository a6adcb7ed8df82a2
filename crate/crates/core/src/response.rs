//! Follower quantal response: soft backward recursion over `Q`, `V`, `A`
//! with `nu = exp(eta * A)`, plus TV / Hellinger / KL utilities.

use crate::error::{Error, Result};
use crate::game::{Dims, FeatureMap, LeaderPolicy, MarkovGame};

/// `(1 - gamma^H) / (1 - gamma)`, equal to `H` at `gamma = 1`.
pub fn eff_horizon(gamma: f64, horizon: usize) -> f64 {
    if gamma >= 1.0 {
        horizon as f64
    } else {
        (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma)
    }
}

/// `B_A = (1 + eff_H(gamma)) (log|B| / eta + 1)`.
pub fn advantage_bound_for(gamma: f64, eta: f64, horizon: usize, follower_actions: usize) -> f64 {
    (1.0 + eff_horizon(gamma, horizon)) * ((follower_actions as f64).ln() / eta + 1.0)
}

pub fn advantage_bound(game: &MarkovGame) -> f64 {
    let d = game.dims();
    advantage_bound_for(game.discount(), game.rationality(), d.horizon, d.follower_actions)
}

/// Writes `softmax(eta * q)` into `out` and returns `eta^-1 log sum exp(eta * q)`.
pub fn soft_max_into(eta: f64, q: &[f64], out: &mut [f64]) -> f64 {
    let m = q.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(q) {
        *o = (eta * (x - m)).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    m + z.ln() / eta
}

/// `eta^-1 log sum exp(eta * q)` with max subtraction.
pub fn soft_value(eta: f64, q: &[f64]) -> f64 {
    let m = q.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let z: f64 = q.iter().map(|&x| (eta * (x - m)).exp()).sum();
    m + z.ln() / eta
}

/// Myopic response `softmax(eta * r_pi)`.
pub fn myopic_response(eta: f64, r_pi: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r_pi.len()];
    soft_max_into(eta, r_pi, &mut out);
    out
}

/// `r^alpha(s, b) = sum_a alpha(a|b) r(s, a, b)` for one state's `[a][b]` block.
pub fn prescribed_reward(reward_state: &[f64], prescription: &[f64], na: usize, nb: usize, out: &mut [f64]) {
    for b in 0..nb {
        let mut acc = 0.0;
        for a in 0..na {
            acc += prescription[b * na + a] * reward_state[a * nb + b];
        }
        out[b] = acc;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FollowerSolution {
    dims: Dims,
    eta: f64,
    gamma: f64,
    q: Vec<f64>,
    v: Vec<f64>,
    adv: Vec<f64>,
    nu: Vec<f64>,
    advantage_bound: f64,
}

impl FollowerSolution {
    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn advantage_bound(&self) -> f64 {
        self.advantage_bound
    }
    #[inline]
    fn sb(&self, h: usize, s: usize, b: usize) -> usize {
        (h * self.dims.states + s) * self.dims.follower_actions + b
    }
    pub fn q(&self, h: usize, s: usize, b: usize) -> f64 {
        self.q[self.sb(h, s, b)]
    }
    pub fn v(&self, h: usize, s: usize) -> f64 {
        self.v[h * self.dims.states + s]
    }
    pub fn adv(&self, h: usize, s: usize, b: usize) -> f64 {
        self.adv[self.sb(h, s, b)]
    }
    pub fn nu(&self, h: usize, s: usize, b: usize) -> f64 {
        self.nu[self.sb(h, s, b)]
    }
    pub fn nu_row(&self, h: usize, s: usize) -> &[f64] {
        let o = self.sb(h, s, 0);
        &self.nu[o..o + self.dims.follower_actions]
    }
    pub fn q_row(&self, h: usize, s: usize) -> &[f64] {
        let o = self.sb(h, s, 0);
        &self.q[o..o + self.dims.follower_actions]
    }
    pub fn adv_row(&self, h: usize, s: usize) -> &[f64] {
        let o = self.sb(h, s, 0);
        &self.adv[o..o + self.dims.follower_actions]
    }

    /// Largest violation of the defining identities and of the `B_A` bound
    /// (`0` when everything holds exactly).
    pub fn invariant_violation(&self) -> f64 {
        let d = self.dims;
        let mut worst: f64 = 0.0;
        for h in 0..d.horizon {
            for s in 0..d.states {
                let q = self.q_row(h, s);
                let nu = self.nu_row(h, s);
                let adv = self.adv_row(h, s);
                worst = worst.max((nu.iter().sum::<f64>() - 1.0).abs());
                worst = worst.max((self.v(h, s) - soft_value(self.eta, q)).abs());
                for b in 0..d.follower_actions {
                    worst = worst.max((nu[b] - (self.eta * adv[b]).exp()).abs());
                    worst = worst.max(q[b].abs() - self.advantage_bound);
                    worst = worst.max(adv[b].abs() - self.advantage_bound);
                }
                worst = worst.max(self.v(h, s).abs() - self.advantage_bound);
            }
        }
        worst
    }
}

/// Quantal response of the game's own follower to `policy`.
pub fn quantal_response(game: &MarkovGame, policy: &LeaderPolicy) -> Result<FollowerSolution> {
    quantal_response_with_reward(game, game.follower_reward(), policy)
}

/// Quantal response when the follower's reward is `follower_reward`
/// (`[h][s][a][b]`), with the game's transitions, `gamma` and `eta`.
pub fn quantal_response_with_reward(
    game: &MarkovGame,
    follower_reward: &[f64],
    policy: &LeaderPolicy,
) -> Result<FollowerSolution> {
    let d = game.dims();
    if policy.dims() != d {
        return Err(Error::DimensionMismatch(format!("policy {:?} vs game {:?}", policy.dims(), d)));
    }
    if follower_reward.len() != d.horizon * d.sab() {
        return Err(Error::DimensionMismatch("follower reward table length".into()));
    }
    let (ns, na, nb) = (d.states, d.leader_actions, d.follower_actions);
    let eta = game.rationality();
    let gamma = game.discount();
    let mut q = vec![0.0; d.horizon * ns * nb];
    let mut v = vec![0.0; (d.horizon + 1) * ns];
    let mut adv = vec![0.0; d.horizon * ns * nb];
    let mut nu = vec![0.0; d.horizon * ns * nb];
    for h in (0..d.horizon).rev() {
        let reward = &follower_reward[h * d.sab()..(h + 1) * d.sab()];
        for s in 0..ns {
            let pres = policy.prescription(h, s);
            let o = (h * ns + s) * nb;
            for b in 0..nb {
                let mut acc = 0.0;
                for a in 0..na {
                    let w = pres[b * na + a];
                    if w == 0.0 {
                        continue;
                    }
                    let mut cont = 0.0;
                    if gamma > 0.0 {
                        let next = &v[(h + 1) * ns..(h + 2) * ns];
                        cont = game.p(h, s, a, b).iter().zip(next).map(|(p, x)| p * x).sum::<f64>();
                    }
                    acc += w * (reward[d.idx(s, a, b)] + gamma * cont);
                }
                q[o + b] = acc;
            }
            let val = soft_max_into(eta, &q[o..o + nb], &mut nu[o..o + nb]);
            v[h * ns + s] = val;
            for b in 0..nb {
                adv[o + b] = q[o + b] - val;
            }
        }
    }
    v.truncate(d.horizon * ns);
    Ok(FollowerSolution {
        dims: d,
        eta,
        gamma,
        q,
        v,
        adv,
        nu,
        advantage_bound: advantage_bound(game),
    })
}

/// Quantal response under `r_h = <phi_h, theta_h>`; the reward table is
/// materialized first.
pub fn quantal_response_linear(
    game: &MarkovGame,
    features: &FeatureMap,
    thetas: &[Vec<f64>],
    policy: &LeaderPolicy,
) -> Result<FollowerSolution> {
    if features.dims() != game.dims() || thetas.len() != game.dims().horizon {
        return Err(Error::DimensionMismatch("features / parameters vs game".into()));
    }
    quantal_response_with_reward(game, &features.reward_table(thetas), policy)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistReport {
    pub tv: f64,
    /// Hellinger distance `D_H` (not squared).
    pub hellinger: f64,
    /// `None` when `q = 0` somewhere on the support of `p`.
    pub kl: Option<f64>,
}

impl DistReport {
    pub fn hellinger_sq(&self) -> f64 {
        self.hellinger * self.hellinger
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `D_H^2 = 1/2 sum (sqrt p - sqrt q)^2`.
pub fn hellinger_sq(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>()
}

/// `KL(p || q)`; entries with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (&x, &y) in p.iter().zip(q) {
        if x > 0.0 {
            if y <= 0.0 {
                return Err(Error::SupportMismatch);
            }
            acc += x * (x / y).ln();
        }
    }
    Ok(acc.max(0.0))
}

pub fn dist_metrics(p: &[f64], q: &[f64]) -> Result<DistReport> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", p.len(), q.len())));
    }
    Ok(DistReport {
        tv: total_variation(p, q),
        hellinger: hellinger_sq(p, q).min(1.0).sqrt(),
        kl: kl_divergence(p, q).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{make_random_game, LeaderPolicy};
    use proptest::prelude::*;

    fn myopic_two_action() -> MarkovGame {
        // one state, one leader action, rewards (1, 0) over b
        let d = Dims::new(1, 1, 2, 1);
        MarkovGame::new(d, vec![1.0], vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], 0.0, 1.0).unwrap()
    }

    #[test]
    fn test_closed_form_softmax() {
        let g = myopic_two_action();
        let r = quantal_response(&g, &LeaderPolicy::uniform(g.dims())).unwrap();
        let e = std::f64::consts::E;
        assert!((r.nu(0, 0, 0) - e / (1.0 + e)).abs() < 1e-12);
        assert!((r.nu(0, 0, 0) - 0.73106).abs() < 1e-5);
        assert!((r.nu(0, 0, 1) - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn test_zero_reward_uniform() {
        let d = Dims::new(2, 2, 3, 3);
        let base = make_random_game(d, 0.0, 2.0, None, 1).unwrap();
        let g = base.with_follower_reward(vec![0.0; d.horizon * d.sab()]).unwrap();
        let r = quantal_response(&g, &LeaderPolicy::uniform(d)).unwrap();
        for h in 0..3 {
            for s in 0..2 {
                assert!((r.v(h, s) - 3f64.ln() / 2.0).abs() < 1e-14);
                for b in 0..3 {
                    assert!((r.nu(h, s, b) - 1.0 / 3.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn test_advantage_bound_values() {
        assert!((advantage_bound_for(0.0, 1.0, 5, 2) - 2.0 * (2f64.ln() + 1.0)).abs() < 1e-12);
        assert!((advantage_bound_for(0.0, 1.0, 5, 2) - 3.3863).abs() < 1e-4);
        assert!((advantage_bound_for(1.0, 1.0, 3, 2) - 6.7726).abs() < 1e-4);
        assert_eq!(advantage_bound_for(0.9, 1.0, 3, 1), 1.0 + eff_horizon(0.9, 3));
    }

    #[test]
    fn test_single_follower_action_point_mass() {
        let g = make_random_game(Dims::new(2, 2, 1, 2), 0.5, 1.0, None, 4).unwrap();
        let r = quantal_response(&g, &LeaderPolicy::uniform(g.dims())).unwrap();
        assert!(r.nu_row(1, 1) == [1.0]);
    }

    #[test]
    fn test_eff_horizon() {
        assert_eq!(eff_horizon(1.0, 4), 4.0);
        assert_eq!(eff_horizon(0.0, 4), 1.0);
        assert!((eff_horizon(0.5, 3) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn test_dist_identity_and_disjoint() {
        let d = dist_metrics(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!((d.tv, d.hellinger, d.kl), (0.0, 0.0, Some(0.0)));
        let d = dist_metrics(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(d.tv, 1.0);
        assert!((d.hellinger - 1.0).abs() < 1e-15);
        assert_eq!(d.kl, None);
        assert!(matches!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]), Err(Error::SupportMismatch)));
    }

    #[test]
    fn test_dist_against_direct_sums() {
        let d = dist_metrics(&[0.6, 0.4], &[0.5, 0.5]).unwrap();
        assert!((d.tv - 0.1).abs() < 1e-15);
        // sums evaluated term by term in a different order
        let h2 = 0.5 * ((0.4f64.sqrt() - 0.5f64.sqrt()).powi(2) + (0.6f64.sqrt() - 0.5f64.sqrt()).powi(2));
        assert!((d.hellinger_sq() - h2).abs() < 1e-15);
        let kl = 0.4 * (0.8f64).ln() + 0.6 * (1.2f64).ln();
        assert!((d.kl.unwrap() - kl).abs() < 1e-15);
        assert!((kl - 0.020135513550688863).abs() < 1e-15);
    }

    #[test]
    fn test_kl_zero_p_entries() {
        assert_eq!(kl_divergence(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn test_rationality_limits() {
        let d = Dims::new(1, 1, 3, 1);
        let g = MarkovGame::new(d, vec![1.0], vec![0.0; 3], vec![0.2, 0.9, 0.5], vec![1.0; 3], 0.0, 1e3).unwrap();
        let r = quantal_response(&g, &LeaderPolicy::uniform(d)).unwrap();
        assert!(r.nu(0, 0, 1) >= 1.0 - 1e-6);
        let g = g.with_rationality(1e-3).unwrap();
        let r = quantal_response(&g, &LeaderPolicy::uniform(d)).unwrap();
        for b in 0..3 {
            assert!((r.nu(0, 0, b) - 1.0 / 3.0).abs() <= 1e-3 * 0.7);
        }
    }

    proptest! {
        #[test]
        fn prop_invariants_hold(seed in 0u64..10_000, gi in 0usize..3, ei in 0usize..3) {
            let gamma = [0.0, 0.9, 1.0][gi];
            let eta = [0.5, 1.0, 5.0][ei];
            let d = Dims::new(1 + seed as usize % 4, 1 + seed as usize % 3, 1 + (seed as usize / 7) % 3, 1 + seed as usize % 3);
            let g = make_random_game(d, gamma, eta, None, seed).unwrap();
            let r = quantal_response(&g, &LeaderPolicy::uniform(d)).unwrap();
            prop_assert!(r.invariant_violation() <= 1e-10);
        }

        #[test]
        fn prop_myopic_shift_invariance(seed in 0u64..10_000, shift in 0.0f64..0.5) {
            let d = Dims::new(3, 2, 3, 2);
            let g = make_random_game(d, 0.0, 2.0, None, seed).unwrap();
            let pol = LeaderPolicy::uniform(d);
            let mut r = g.follower_reward().to_vec();
            for (i, x) in r.iter_mut().enumerate() {
                let s = (i / d.ab()) % d.states;
                *x = *x * 0.5 + shift * s as f64 / 2.0;
            }
            let base: Vec<f64> = g.follower_reward().iter().map(|x| x * 0.5).collect();
            let a = quantal_response_with_reward(&g, &base, &pol).unwrap();
            let b = quantal_response_with_reward(&g, &r, &pol).unwrap();
            for h in 0..2 { for s in 0..3 { for k in 0..3 {
                prop_assert!((a.nu(h, s, k) - b.nu(h, s, k)).abs() <= 1e-10);
            }}}
        }

        #[test]
        fn prop_dist_ordering(raw in proptest::collection::vec(0.01f64..1.0, 8)) {
            let (p, q) = raw.split_at(4);
            let sp: f64 = p.iter().sum();
            let sq: f64 = q.iter().sum();
            let p: Vec<f64> = p.iter().map(|x| x / sp).collect();
            let q: Vec<f64> = q.iter().map(|x| x / sq).collect();
            let d = dist_metrics(&p, &q).unwrap();
            prop_assert!(d.tv >= 0.0 && d.tv <= 1.0);
            prop_assert!(d.hellinger >= 0.0 && d.hellinger <= 1.0);
            prop_assert!(d.kl.unwrap() >= 0.0);
            prop_assert!(d.hellinger_sq() <= d.tv + 1e-15);
        }
    }
}
