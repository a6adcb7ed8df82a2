//! Tabular episodic leader-follower games, their linear-feature form,
//! leader policies, trajectories and datasets.
//!
//! Steps are 0-based in code: `h` runs over `0..horizon`. Per-step tables
//! are stored flat in `[s][a][b]` order and transitions in `[s][a][b][s']`.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub states: usize,
    pub leader_actions: usize,
    pub follower_actions: usize,
    pub horizon: usize,
}

impl Dims {
    pub fn new(states: usize, leader_actions: usize, follower_actions: usize, horizon: usize) -> Self {
        Dims { states, leader_actions, follower_actions, horizon }
    }

    pub fn validate(&self) -> Result<()> {
        if self.states == 0 || self.leader_actions == 0 || self.follower_actions == 0 || self.horizon == 0 {
            return Err(Error::BadDimension(format!("{self:?}")));
        }
        Ok(())
    }

    /// Size of one step's `(s, a, b)` table.
    pub fn sab(&self) -> usize {
        self.states * self.leader_actions * self.follower_actions
    }

    /// Size of one state's `(a, b)` block.
    pub fn ab(&self) -> usize {
        self.leader_actions * self.follower_actions
    }

    #[inline]
    pub fn idx(&self, s: usize, a: usize, b: usize) -> usize {
        (s * self.leader_actions + a) * self.follower_actions + b
    }
}

/// Seeded generator for stream `stream` of a run seeded with `seed`.
///
/// Distinct streams are independent ChaCha streams under the same key, so
/// episode `t` of a sweep can be regenerated without replaying `0..t`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw an index from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn check_prob_row(row: &[f64], what: impl Fn() -> String) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::NonStochasticRow(format!("{} (sum {sum})", what())));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovGame {
    dims: Dims,
    init_dist: Vec<f64>,
    leader_reward: Vec<f64>,
    follower_reward: Vec<f64>,
    transition: Vec<f64>,
    discount: f64,
    rationality: f64,
}

impl MarkovGame {
    pub fn new(
        dims: Dims,
        init_dist: Vec<f64>,
        leader_reward: Vec<f64>,
        follower_reward: Vec<f64>,
        transition: Vec<f64>,
        discount: f64,
        rationality: f64,
    ) -> Result<Self> {
        dims.validate()?;
        let n = dims.horizon * dims.sab();
        if init_dist.len() != dims.states
            || leader_reward.len() != n
            || follower_reward.len() != n
            || transition.len() != n * dims.states
        {
            return Err(Error::BadDimension("array lengths do not match dims".into()));
        }
        if !(rationality > 0.0) || !rationality.is_finite() {
            return Err(Error::BadDimension(format!("rationality must be positive, got {rationality}")));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(Error::BadDimension(format!("discount must lie in [0, 1], got {discount}")));
        }
        check_prob_row(&init_dist, || "initial distribution".into())?;
        for (name, table) in [("leader", &leader_reward), ("follower", &follower_reward)] {
            if let Some(i) = table.iter().position(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::RewardOutOfRange(format!("{name} reward entry {i} = {}", table[i])));
            }
        }
        for (i, row) in transition.chunks(dims.states).enumerate() {
            check_prob_row(row, || format!("transition row {i}"))?;
        }
        Ok(MarkovGame { dims, init_dist, leader_reward, follower_reward, transition, discount, rationality })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }
    pub fn discount(&self) -> f64 {
        self.discount
    }
    pub fn rationality(&self) -> f64 {
        self.rationality
    }
    pub fn leader_reward(&self) -> &[f64] {
        &self.leader_reward
    }
    pub fn follower_reward(&self) -> &[f64] {
        &self.follower_reward
    }
    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    #[inline]
    pub fn u(&self, h: usize, s: usize, a: usize, b: usize) -> f64 {
        self.leader_reward[h * self.dims.sab() + self.dims.idx(s, a, b)]
    }
    #[inline]
    pub fn r(&self, h: usize, s: usize, a: usize, b: usize) -> f64 {
        self.follower_reward[h * self.dims.sab() + self.dims.idx(s, a, b)]
    }
    /// Next-state distribution `P_h(. | s, a, b)`.
    #[inline]
    pub fn p(&self, h: usize, s: usize, a: usize, b: usize) -> &[f64] {
        let off = (h * self.dims.sab() + self.dims.idx(s, a, b)) * self.dims.states;
        &self.transition[off..off + self.dims.states]
    }
    pub fn leader_reward_step(&self, h: usize) -> &[f64] {
        let n = self.dims.sab();
        &self.leader_reward[h * n..(h + 1) * n]
    }
    pub fn follower_reward_step(&self, h: usize) -> &[f64] {
        let n = self.dims.sab();
        &self.follower_reward[h * n..(h + 1) * n]
    }

    /// Same game with the follower's reward replaced (validated).
    pub fn with_follower_reward(&self, follower_reward: Vec<f64>) -> Result<Self> {
        MarkovGame::new(
            self.dims,
            self.init_dist.clone(),
            self.leader_reward.clone(),
            follower_reward,
            self.transition.clone(),
            self.discount,
            self.rationality,
        )
    }

    /// Same game with a different rationality level.
    pub fn with_rationality(&self, rationality: f64) -> Result<Self> {
        let mut g = self.clone();
        if !(rationality > 0.0) {
            return Err(Error::BadDimension(format!("rationality must be positive, got {rationality}")));
        }
        g.rationality = rationality;
        Ok(g)
    }

    pub fn to_file(&self, linear: Option<&LinearGameParams>) -> GameFile {
        let d = self.dims;
        let table4 = |data: &[f64]| -> Vec<Vec<Vec<Vec<f64>>>> {
            (0..d.horizon)
                .map(|h| {
                    (0..d.states)
                        .map(|s| {
                            (0..d.leader_actions)
                                .map(|a| {
                                    (0..d.follower_actions)
                                        .map(|b| data[h * d.sab() + d.idx(s, a, b)])
                                        .collect()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let p = (0..d.horizon)
            .map(|h| {
                (0..d.states)
                    .map(|s| {
                        (0..d.leader_actions)
                            .map(|a| (0..d.follower_actions).map(|b| self.p(h, s, a, b).to_vec()).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        GameFile {
            dims: d,
            rho0: self.init_dist.clone(),
            u: table4(&self.leader_reward),
            r: table4(&self.follower_reward),
            p,
            gamma: self.discount,
            eta: self.rationality,
            linear: linear.map(LinearGameParams::to_block),
        }
    }

    pub fn to_json(&self, linear: Option<&LinearGameParams>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file(linear))?)
    }

    pub fn from_json(text: &str) -> Result<(MarkovGame, Option<LinearGameParams>)> {
        let file: GameFile = serde_json::from_str(text)?;
        file.build()
    }

    pub fn load(path: &Path) -> Result<(MarkovGame, Option<LinearGameParams>)> {
        MarkovGame::from_json(&std::fs::read_to_string(path)?)
    }

    /// Stable content hash of the JSON form.
    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::harness::sha256_hex(self.to_json(None)?.as_bytes()))
    }
}

type Table4 = Vec<Vec<Vec<Vec<f64>>>>;

/// On-disk game description: nested arrays indexed `[h][s][a][b]` and
/// `P[h][s][a][b][s']`, with an optional linear-feature block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GameFile {
    pub dims: Dims,
    pub rho0: Vec<f64>,
    pub u: Table4,
    pub r: Table4,
    #[serde(rename = "P")]
    pub p: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    pub gamma: f64,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearBlock>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearBlock {
    pub d: usize,
    /// `phi[h][s][a][b][k]`
    pub phi: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `theta[h][k]`
    pub theta: Vec<Vec<f64>>,
    /// `vartheta[h][k]`
    pub vartheta: Vec<Vec<f64>>,
    /// `mu[h][s'][k]`
    pub mu: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub param_bound: Option<f64>,
}

fn flatten4(t: &Table4, d: Dims, what: &str) -> Result<Vec<f64>> {
    let bad = || Error::BadDimension(format!("{what} has the wrong shape"));
    if t.len() != d.horizon {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(d.horizon * d.sab());
    for per_h in t {
        if per_h.len() != d.states {
            return Err(bad());
        }
        for per_s in per_h {
            if per_s.len() != d.leader_actions {
                return Err(bad());
            }
            for per_a in per_s {
                if per_a.len() != d.follower_actions {
                    return Err(bad());
                }
                out.extend_from_slice(per_a);
            }
        }
    }
    Ok(out)
}

impl GameFile {
    pub fn build(self) -> Result<(MarkovGame, Option<LinearGameParams>)> {
        let d = self.dims;
        d.validate()?;
        let u = flatten4(&self.u, d, "u")?;
        let r = flatten4(&self.r, d, "r")?;
        let mut p = Vec::with_capacity(d.horizon * d.sab() * d.states);
        if self.p.len() != d.horizon {
            return Err(Error::BadDimension("P has the wrong shape".into()));
        }
        for per_h in &self.p {
            if per_h.len() != d.states {
                return Err(Error::BadDimension("P has the wrong shape".into()));
            }
            for per_s in per_h {
                if per_s.len() != d.leader_actions {
                    return Err(Error::BadDimension("P has the wrong shape".into()));
                }
                for per_a in per_s {
                    if per_a.len() != d.follower_actions {
                        return Err(Error::BadDimension("P has the wrong shape".into()));
                    }
                    for row in per_a {
                        if row.len() != d.states {
                            return Err(Error::BadDimension("P has the wrong shape".into()));
                        }
                        p.extend_from_slice(row);
                    }
                }
            }
        }
        let game = MarkovGame::new(d, self.rho0, u, r, p, self.gamma, self.eta)?;
        let linear = match self.linear {
            Some(block) => Some(LinearGameParams::from_block(d, block)?),
            None => None,
        };
        Ok((game, linear))
    }
}

/// Feature map `phi_h(s, a, b)` in `R^d`; the only part of a linear game a
/// learner is allowed to see.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dims: Dims,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: Dims, dim: usize, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if dim == 0 || data.len() != dims.horizon * dims.sab() * dim {
            return Err(Error::BadDimension("feature array length".into()));
        }
        Ok(FeatureMap { dims, dim, data })
    }

    /// Indicator features `e_(s,a,b)`, identical at every step.
    pub fn one_hot(dims: Dims) -> Self {
        let d = dims.sab();
        let mut data = vec![0.0; dims.horizon * d * d];
        for h in 0..dims.horizon {
            for k in 0..d {
                data[(h * d + k) * d + k] = 1.0;
            }
        }
        FeatureMap { dims, dim: d, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn phi(&self, h: usize, s: usize, a: usize, b: usize) -> &[f64] {
        let off = (h * self.dims.sab() + self.dims.idx(s, a, b)) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// `B_phi`: largest feature norm.
    pub fn bound(&self) -> f64 {
        self.data.chunks(self.dim).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max)
    }

    /// `<phi_h(s,a,b), theta>` for every `(s,a,b)` at step `h`.
    pub fn reward_step(&self, h: usize, theta: &[f64]) -> Vec<f64> {
        let n = self.dims.sab();
        (0..n)
            .map(|k| {
                let off = (h * n + k) * self.dim;
                self.data[off..off + self.dim].iter().zip(theta).map(|(x, y)| x * y).sum()
            })
            .collect()
    }

    /// Full reward table from per-step parameters.
    pub fn reward_table(&self, thetas: &[Vec<f64>]) -> Vec<f64> {
        (0..self.dims.horizon).flat_map(|h| self.reward_step(h, &thetas[h])).collect()
    }
}

/// What a learner may know up front: features, `rho0`, `eta`, `gamma`.
/// Rewards and transitions stay hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct PublicInfo {
    pub features: FeatureMap,
    pub init_dist: Vec<f64>,
    pub rationality: f64,
    pub discount: f64,
}

impl PublicInfo {
    pub fn of(game: &MarkovGame, features: FeatureMap) -> Self {
        PublicInfo {
            features,
            init_dist: game.init_dist().to_vec(),
            rationality: game.rationality(),
            discount: game.discount(),
        }
    }

    /// One-hot features for a tabular game.
    pub fn tabular(game: &MarkovGame) -> Self {
        PublicInfo::of(game, FeatureMap::one_hot(game.dims()))
    }

    pub fn dims(&self) -> Dims {
        self.features.dims()
    }
}

/// Linear parameterization: `r_h = <phi_h, theta_h>`, `u_h = <phi_h, vartheta_h>`,
/// `P_h(s'|.) = <phi_h, mu_h(s')>`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGameParams {
    pub features: FeatureMap,
    pub follower_params: Vec<Vec<f64>>,
    pub leader_params: Vec<Vec<f64>>,
    /// `[h][s'][k]` flattened.
    pub transition_factors: Vec<f64>,
    pub param_bound: f64,
}

impl LinearGameParams {
    pub fn dim(&self) -> usize {
        self.features.dim
    }

    fn to_block(&self) -> LinearBlock {
        let fm = &self.features;
        let d = fm.dims;
        let phi = (0..d.horizon)
            .map(|h| {
                (0..d.states)
                    .map(|s| {
                        (0..d.leader_actions)
                            .map(|a| (0..d.follower_actions).map(|b| fm.phi(h, s, a, b).to_vec()).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let k = fm.dim;
        let mu = (0..d.horizon)
            .map(|h| {
                (0..d.states)
                    .map(|s| self.transition_factors[(h * d.states + s) * k..(h * d.states + s + 1) * k].to_vec())
                    .collect()
            })
            .collect();
        LinearBlock {
            d: k,
            phi,
            theta: self.follower_params.clone(),
            vartheta: self.leader_params.clone(),
            mu,
            param_bound: Some(self.param_bound),
        }
    }

    fn from_block(dims: Dims, block: LinearBlock) -> Result<Self> {
        let k = block.d;
        let bad = || Error::BadDimension("linear block has the wrong shape".into());
        let mut data = Vec::new();
        for per_h in &block.phi {
            for per_s in per_h {
                for per_a in per_s {
                    for v in per_a {
                        if v.len() != k {
                            return Err(bad());
                        }
                        data.extend_from_slice(v);
                    }
                }
            }
        }
        let features = FeatureMap::new(dims, k, data)?;
        let ok_params = |p: &Vec<Vec<f64>>| p.len() == dims.horizon && p.iter().all(|v| v.len() == k);
        if !ok_params(&block.theta) || !ok_params(&block.vartheta) {
            return Err(bad());
        }
        let mut mu = Vec::new();
        if block.mu.len() != dims.horizon {
            return Err(bad());
        }
        for per_h in &block.mu {
            if per_h.len() != dims.states {
                return Err(bad());
            }
            for v in per_h {
                if v.len() != k {
                    return Err(bad());
                }
                mu.extend_from_slice(v);
            }
        }
        let norm = block.theta.iter().map(|t| t.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
        Ok(LinearGameParams {
            features,
            follower_params: block.theta,
            leader_params: block.vartheta,
            transition_factors: mu,
            param_bound: block.param_bound.unwrap_or(norm),
        })
    }

    /// Transition `<phi_h(s,a,b), mu_h(.)>` as a vector over next states.
    pub fn transition_row(&self, h: usize, s: usize, a: usize, b: usize) -> Vec<f64> {
        let d = self.features.dims;
        let k = self.features.dim;
        let phi = self.features.phi(h, s, a, b);
        (0..d.states)
            .map(|sp| {
                let off = (h * d.states + sp) * k;
                phi.iter().zip(&self.transition_factors[off..off + k]).map(|(x, y)| x * y).sum()
            })
            .collect()
    }

    /// Materialize the tabular game this parameterization describes.
    pub fn to_game(&self, init_dist: Vec<f64>, discount: f64, rationality: f64) -> Result<MarkovGame> {
        let d = self.features.dims;
        let u = self.features.reward_table(&self.leader_params);
        let r = self.features.reward_table(&self.follower_params);
        let mut p = Vec::with_capacity(d.horizon * d.sab() * d.states);
        for h in 0..d.horizon {
            for s in 0..d.states {
                for a in 0..d.leader_actions {
                    for b in 0..d.follower_actions {
                        p.extend(self.transition_row(h, s, a, b));
                    }
                }
            }
        }
        MarkovGame::new(d, init_dist, u, r, p, discount, rationality)
    }

    /// Largest deviation between this parameterization and a tabular game.
    pub fn max_deviation(&self, game: &MarkovGame) -> f64 {
        let d = game.dims();
        let u = self.features.reward_table(&self.leader_params);
        let r = self.features.reward_table(&self.follower_params);
        let mut err: f64 = 0.0;
        for (x, y) in u.iter().zip(game.leader_reward()).chain(r.iter().zip(game.follower_reward())) {
            err = err.max((x - y).abs());
        }
        for h in 0..d.horizon {
            for s in 0..d.states {
                for a in 0..d.leader_actions {
                    for b in 0..d.follower_actions {
                        for (x, y) in self.transition_row(h, s, a, b).iter().zip(game.p(h, s, a, b)) {
                            err = err.max((x - y).abs());
                        }
                    }
                }
            }
        }
        err
    }
}

/// One-hot embedding of a tabular game: `d = |S||A||B|` and the parameters
/// are the tables themselves, so the embedding reproduces the game exactly.
pub fn embed_linear(game: &MarkovGame) -> LinearGameParams {
    let d = game.dims();
    let k = d.sab();
    let per_step = |table: &[f64]| -> Vec<Vec<f64>> { table.chunks(k).map(|c| c.to_vec()).collect() };
    let follower_params = per_step(game.follower_reward());
    let leader_params = per_step(game.leader_reward());
    let mut mu = vec![0.0; d.horizon * d.states * k];
    for h in 0..d.horizon {
        for s in 0..d.states {
            for a in 0..d.leader_actions {
                for b in 0..d.follower_actions {
                    let col = d.idx(s, a, b);
                    for (sp, &p) in game.p(h, s, a, b).iter().enumerate() {
                        mu[(h * d.states + sp) * k + col] = p;
                    }
                }
            }
        }
    }
    let param_bound =
        follower_params.iter().map(|t| t.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
    LinearGameParams {
        features: FeatureMap::one_hot(d),
        follower_params,
        leader_params,
        transition_factors: mu,
        param_bound,
    }
}

/// Leader policy: at each `(h, s)` a prescription stored as a `|B| x |A|`
/// row-stochastic matrix (row `b` is the leader's mixed action given `b`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderPolicy {
    dims: Dims,
    table: Vec<f64>,
}

impl LeaderPolicy {
    pub fn new(dims: Dims, table: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if table.len() != dims.horizon * dims.states * dims.ab() {
            return Err(Error::BadDimension("policy table length".into()));
        }
        let p = LeaderPolicy { dims, table };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(dims: Dims) -> Self {
        let n = dims.horizon * dims.states * dims.ab();
        LeaderPolicy { dims, table: vec![1.0 / dims.leader_actions as f64; n] }
    }

    /// Policy playing the same prescription everywhere.
    pub fn constant(dims: Dims, prescription: &[f64]) -> Result<Self> {
        let mut table = Vec::with_capacity(dims.horizon * dims.states * dims.ab());
        for _ in 0..dims.horizon * dims.states {
            table.extend_from_slice(prescription);
        }
        LeaderPolicy::new(dims, table)
    }

    /// Every row drawn independently, uniform weights renormalized.
    pub fn random<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let n = dims.horizon * dims.states * dims.ab();
        let mut table: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        for row in table.chunks_mut(dims.leader_actions) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        LeaderPolicy { dims, table }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.table.chunks(self.dims.leader_actions).enumerate() {
            check_prob_row(row, || format!("policy row {i}"))?;
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Prescription at `(h, s)`, laid out `[b][a]`.
    #[inline]
    pub fn prescription(&self, h: usize, s: usize) -> &[f64] {
        let n = self.dims.ab();
        let off = (h * self.dims.states + s) * n;
        &self.table[off..off + n]
    }

    pub fn set_prescription(&mut self, h: usize, s: usize, prescription: &[f64]) {
        let n = self.dims.ab();
        let off = (h * self.dims.states + s) * n;
        self.table[off..off + n].copy_from_slice(prescription);
    }

    /// `pi_h(a | s, b)`.
    #[inline]
    pub fn prob(&self, h: usize, s: usize, b: usize, a: usize) -> f64 {
        self.table[((h * self.dims.states + s) * self.dims.follower_actions + b) * self.dims.leader_actions + a]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub leader_action: usize,
    pub follower_action: usize,
    pub leader_reward: f64,
    pub next_state: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub policy_id: usize,
    pub steps: Vec<Step>,
}

/// Episodes plus the policies announced in them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dims: Dims,
    pub policies: Vec<LeaderPolicy>,
    pub episodes: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
struct PolicySidecar {
    policy_of_episode: Vec<usize>,
    policies: Vec<LeaderPolicy>,
}

impl Dataset {
    pub fn new(dims: Dims) -> Self {
        Dataset { dims, policies: Vec::new(), episodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn add_policy(&mut self, policy: LeaderPolicy) -> usize {
        self.policies.push(policy);
        self.policies.len() - 1
    }

    pub fn push(&mut self, trajectory: Trajectory) {
        self.episodes.push(trajectory);
    }

    pub fn policy_of(&self, episode: usize) -> &LeaderPolicy {
        &self.policies[self.episodes[episode].policy_id]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.steps.len() != self.dims.horizon {
                return Err(Error::BadDimension(format!("episode {i} has {} steps", ep.steps.len())));
            }
            if ep.policy_id >= self.policies.len() {
                return Err(Error::BadDimension(format!("episode {i} references unknown policy {}", ep.policy_id)));
            }
        }
        Ok(())
    }

    /// Writes `<stem>.jsonl` (one trajectory per line) and `<stem>.policies.json`.
    pub fn write_jsonl(&self, stem: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("jsonl"))?);
        for ep in &self.episodes {
            serde_json::to_writer(&mut f, ep)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        let sidecar = PolicySidecar {
            policy_of_episode: self.episodes.iter().map(|e| e.policy_id).collect(),
            policies: self.policies.clone(),
        };
        std::fs::write(stem.with_extension("policies.json"), serde_json::to_string(&sidecar)?)?;
        Ok(())
    }

    pub fn read_jsonl(stem: &Path, dims: Dims) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(stem.with_extension("jsonl"))?);
        let mut episodes = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                episodes.push(serde_json::from_str(&line)?);
            }
        }
        let sidecar: PolicySidecar =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("policies.json"))?)?;
        let ds = Dataset { dims, policies: sidecar.policies, episodes };
        ds.validate()?;
        Ok(ds)
    }
}

/// Play one episode: `s_1 ~ rho0`, `b ~ nu(.|s)`, `a ~ pi(.|s, b)`, `s' ~ P`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &LeaderPolicy,
    response: &crate::response::FollowerSolution,
    policy_id: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    let d = game.dims();
    if policy.dims() != d || response.dims() != d {
        return Err(Error::ResponseMismatch("dimensions differ".into()));
    }
    let mut s = sample_index(rng, game.init_dist());
    let mut steps = Vec::with_capacity(d.horizon);
    for h in 0..d.horizon {
        let b = sample_index(rng, response.nu_row(h, s));
        let row = &policy.prescription(h, s)[b * d.leader_actions..(b + 1) * d.leader_actions];
        let a = sample_index(rng, row);
        let next = sample_index(rng, game.p(h, s, a, b));
        steps.push(Step {
            state: s,
            leader_action: a,
            follower_action: b,
            leader_reward: game.u(h, s, a, b),
            next_state: next,
        });
        s = next;
    }
    Ok(Trajectory { policy_id, steps })
}

/// Seeded form of [`sample_trajectory`].
pub fn sample_trajectory_seeded(
    game: &MarkovGame,
    policy: &LeaderPolicy,
    response: &crate::response::FollowerSolution,
    seed: u64,
) -> Result<Trajectory> {
    sample_trajectory(game, policy, response, 0, &mut stream_rng(seed, 0))
}

/// Linear constraint `<x, r_h(s, a, .)> = level` on follower rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationConstraint {
    pub weight: Vec<f64>,
    pub level: f64,
}

impl IdentificationConstraint {
    pub fn new(weight: Vec<f64>, level: f64) -> Result<Self> {
        let s: f64 = weight.iter().sum();
        if s == 0.0 || weight.is_empty() {
            return Err(Error::InfeasibleConstraint("<x, 1> must be nonzero".into()));
        }
        Ok(IdentificationConstraint { weight, level })
    }

    /// `x = 1`, `level = |B| / 2`.
    pub fn sum_to_half(nb: usize) -> Self {
        IdentificationConstraint { weight: vec![1.0; nb], level: nb as f64 / 2.0 }
    }

    pub fn kappa(&self) -> f64 {
        let inf = self.weight.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        inf / self.weight.iter().sum::<f64>().abs()
    }

    /// Largest constraint residual over a follower reward table.
    pub fn max_residual(&self, dims: Dims, follower_reward: &[f64]) -> f64 {
        follower_reward
            .chunks(dims.follower_actions)
            .map(|row| (row.iter().zip(&self.weight).map(|(r, x)| r * x).sum::<f64>() - self.level).abs())
            .fold(0.0, f64::max)
    }

    fn project(&self, row: &mut [f64]) -> Result<()> {
        let xx: f64 = self.weight.iter().map(|x| x * x).sum();
        for _ in 0..200 {
            let dot: f64 = row.iter().zip(&self.weight).map(|(r, x)| r * x).sum();
            let gap = dot - self.level;
            if gap.abs() <= 1e-13 {
                return Ok(());
            }
            for (r, x) in row.iter_mut().zip(&self.weight) {
                *r = (*r - x * gap / xx).clamp(0.0, 1.0);
            }
        }
        let dot: f64 = row.iter().zip(&self.weight).map(|(r, x)| r * x).sum();
        if (dot - self.level).abs() <= 1e-10 {
            Ok(())
        } else {
            Err(Error::InfeasibleConstraint(format!("residual {} after projection", dot - self.level)))
        }
    }
}

/// Random game with uniform rewards and normalized uniform transition rows.
pub fn make_random_game(
    dims: Dims,
    discount: f64,
    rationality: f64,
    constraint: Option<&IdentificationConstraint>,
    seed: u64,
) -> Result<MarkovGame> {
    dims.validate()?;
    let mut rng = stream_rng(seed, 0);
    let n = dims.horizon * dims.sab();
    let normalized = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    };
    let init = normalized(dims.states, &mut rng);
    let u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut r: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut p = Vec::with_capacity(n * dims.states);
    for _ in 0..n {
        p.extend(normalized(dims.states, &mut rng));
    }
    if let Some(c) = constraint {
        if c.weight.len() != dims.follower_actions {
            return Err(Error::DimensionMismatch("constraint weight length".into()));
        }
        for row in r.chunks_mut(dims.follower_actions) {
            c.project(row)?;
        }
    }
    MarkovGame::new(dims, init, u, r, p, discount, rationality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::response::quantal_response;

    fn trivial() -> MarkovGame {
        let d = Dims::new(1, 1, 1, 1);
        MarkovGame::new(d, vec![1.0], vec![1.0], vec![1.0], vec![1.0], 0.0, 1.0).unwrap()
    }

    #[test]
    fn test_trivial_game_valid() {
        let g = trivial();
        assert_eq!(g.u(0, 0, 0, 0), 1.0);
        let j = crate::planner::evaluate_j(&g, &LeaderPolicy::uniform(g.dims())).unwrap();
        assert_eq!(j, 1.0);
    }

    #[test]
    fn test_non_stochastic_row_rejected() {
        let d = Dims::new(2, 1, 1, 1);
        let err = MarkovGame::new(d, vec![0.5, 0.5], vec![0.0; 2], vec![0.0; 2], vec![0.5, 0.4, 1.0, 0.0], 0.0, 1.0);
        assert!(matches!(err, Err(Error::NonStochasticRow(_))));
    }

    #[test]
    fn test_reward_out_of_range() {
        let d = Dims::new(1, 1, 1, 1);
        let err = MarkovGame::new(d, vec![1.0], vec![1.5], vec![0.0], vec![1.0], 0.0, 1.0);
        assert!(matches!(err, Err(Error::RewardOutOfRange(_))));
    }

    #[test]
    fn test_json_round_trip_bit_exact() {
        let g = make_random_game(Dims::new(3, 2, 2, 3), 0.5, 1.0, None, 7).unwrap();
        let lin = embed_linear(&g);
        let text = g.to_json(Some(&lin)).unwrap();
        let (g2, lin2) = MarkovGame::from_json(&text).unwrap();
        assert_eq!(g, g2);
        assert_eq!(Some(lin), lin2);
        for (x, y) in g.transition().iter().zip(g2.transition()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn test_embed_scalar_game() {
        let lin = embed_linear(&trivial());
        assert_eq!(lin.dim(), 1);
        assert_eq!(lin.features.phi(0, 0, 0, 0), &[1.0]);
        assert_eq!(lin.follower_params, vec![vec![1.0]]);
        assert_eq!(lin.leader_params, vec![vec![1.0]]);
    }

    #[test]
    fn test_embed_reproduces_tables() {
        for seed in 0..20 {
            let g = make_random_game(Dims::new(3, 2, 3, 2), 0.0, 1.0, None, seed).unwrap();
            let lin = embed_linear(&g);
            assert_eq!(lin.max_deviation(&g), 0.0);
            let g2 = lin.to_game(g.init_dist().to_vec(), 0.0, 1.0).unwrap();
            assert_eq!(g2, g);
        }
    }

    #[test]
    fn test_constraint_projection() {
        let c = IdentificationConstraint::sum_to_half(2);
        let g = make_random_game(Dims::new(3, 2, 2, 3), 1.0, 1.0, Some(&c), 3).unwrap();
        for row in g.follower_reward().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-10);
        }
        assert!(c.max_residual(g.dims(), g.follower_reward()) < 1e-10);
        assert_eq!(c.kappa(), 0.5);
    }

    #[test]
    fn test_random_game_deterministic() {
        let d = Dims::new(2, 3, 2, 2);
        assert_eq!(make_random_game(d, 0.9, 2.0, None, 11).unwrap(), make_random_game(d, 0.9, 2.0, None, 11).unwrap());
    }

    #[test]
    fn test_random_games_valid() {
        for seed in 0..1000 {
            let d = Dims::new(1 + seed as usize % 4, 1 + seed as usize % 3, 1 + (seed as usize / 3) % 3, 1 + seed as usize % 3);
            make_random_game(d, 0.5, 1.0, None, seed).unwrap();
        }
    }

    #[test]
    fn test_deterministic_game_trajectory() {
        let d = Dims::new(2, 1, 1, 3);
        let g = MarkovGame::new(d, vec![1.0, 0.0], vec![0.3; 6], vec![0.2; 6], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 0.0, 1.0)
            .unwrap();
        let pol = LeaderPolicy::uniform(d);
        let resp = quantal_response(&g, &pol).unwrap();
        let t1 = sample_trajectory_seeded(&g, &pol, &resp, 1).unwrap();
        let t2 = sample_trajectory_seeded(&g, &pol, &resp, 99).unwrap();
        assert_eq!(t1, t2);
        let states: Vec<usize> = t1.steps.iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 1, 0]);
    }

    #[test]
    fn test_seed_determinism() {
        let g = make_random_game(Dims::new(3, 2, 2, 4), 0.0, 1.0, None, 5).unwrap();
        let pol = LeaderPolicy::uniform(g.dims());
        let resp = quantal_response(&g, &pol).unwrap();
        let a = sample_trajectory_seeded(&g, &pol, &resp, 1).unwrap();
        let b = sample_trajectory_seeded(&g, &pol, &resp, 1).unwrap();
        assert_eq!(a, b);
        let differs = (2..10).any(|s| sample_trajectory_seeded(&g, &pol, &resp, s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn test_follower_frequencies_match_response() {
        let g = make_random_game(Dims::new(2, 2, 3, 1), 0.0, 2.0, None, 9).unwrap();
        let pol = LeaderPolicy::uniform(g.dims());
        let resp = quantal_response(&g, &pol).unwrap();
        let mut rng = stream_rng(3, 0);
        let n = 100_000;
        let mut counts = vec![[0usize; 3]; 2];
        let mut visits = [0usize; 2];
        for _ in 0..n {
            let t = sample_trajectory(&g, &pol, &resp, 0, &mut rng).unwrap();
            visits[t.steps[0].state] += 1;
            counts[t.steps[0].state][t.steps[0].follower_action] += 1;
        }
        for s in 0..2 {
            for b in 0..3 {
                let p = resp.nu(0, s, b);
                let m = visits[s] as f64;
                let sigma = (p * (1.0 - p) / m).sqrt();
                assert!((counts[s][b] as f64 / m - p).abs() <= 3.0 * sigma + 1e-12, "s={s} b={b}");
            }
        }
    }

    #[test]
    fn test_dataset_jsonl_round_trip() {
        let g = make_random_game(Dims::new(2, 2, 2, 2), 0.0, 1.0, None, 1).unwrap();
        let pol = LeaderPolicy::uniform(g.dims());
        let resp = quantal_response(&g, &pol).unwrap();
        let mut ds = Dataset::new(g.dims());
        let id = ds.add_policy(pol.clone());
        let mut rng = stream_rng(0, 0);
        for _ in 0..5 {
            ds.push(sample_trajectory(&g, &pol, &resp, id, &mut rng).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("data");
        ds.write_jsonl(&stem).unwrap();
        assert_eq!(Dataset::read_jsonl(&stem, g.dims()).unwrap(), ds);
    }
}
