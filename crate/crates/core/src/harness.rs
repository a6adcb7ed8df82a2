//! Experiment orchestration: benchmark instances, dataset generation,
//! config-driven sweeps with per-run files, aggregation, manifests and
//! plot-data emission.

use crate::error::{Error, Result};
use crate::game::{
    make_random_game, sample_trajectory, stream_rng, Dataset, Dims, FeatureMap, IdentificationConstraint,
    LeaderPolicy, LinearGameParams, MarkovGame, PublicInfo,
};
use crate::mle::{beta_farsighted, beta_finite_class, beta_linear, beta_linear_online};
use crate::offline::{mle_bcp, mle_pvi, pmle_farsighted, FiniteClasses, LinearConfig, Scheme};
use crate::online::{run_online, Evaluator, GolfLearner, OmleLearner, OviLearner, RegretTrace, SimulatedEnvironment};
use crate::planner::{evaluate_j, leader_values, solve_qse_myopic, PrescriptionGrid};
use crate::response::quantal_response;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed of the fixed benchmark instances.
pub const BENCHMARK_SEED: u64 = 2024;

/// Two-state myopic game with `|A| = |B| = 2`, `H = 2`, `eta = 1`.
pub fn offline_benchmark() -> MarkovGame {
    make_random_game(Dims::new(2, 2, 2, 2), 0.0, 1.0, None, BENCHMARK_SEED).expect("benchmark game is valid")
}

/// A linear game together with the information a learner may see.
#[derive(Clone, Debug)]
pub struct LinearBenchmark {
    pub game: MarkovGame,
    pub params: LinearGameParams,
    pub info: PublicInfo,
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // exponential spacings give a uniform draw from the simplex
    let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Linear myopic game with simplex-valued features in `R^d`: rewards are
/// `<phi, theta>` with `theta` in `[0, 1]^d` and transitions mix `d` fixed
/// next-state distributions, so the game is exactly linear.
pub fn linear_benchmark(dims: Dims, d: usize, eta: f64, seed: u64) -> Result<LinearBenchmark> {
    dims.validate()?;
    let mut rng = stream_rng(seed, 5);
    let mut data = Vec::with_capacity(dims.horizon * dims.sab() * d);
    for _ in 0..dims.horizon * dims.sab() {
        data.extend(random_simplex(d, &mut rng));
    }
    let features = FeatureMap::new(dims, d, data)?;
    let follower_params: Vec<Vec<f64>> = (0..dims.horizon).map(|_| (0..d).map(|_| rng.random()).collect()).collect();
    let leader_params: Vec<Vec<f64>> = (0..dims.horizon).map(|_| (0..d).map(|_| rng.random()).collect()).collect();
    // [h][s'][k]: column k of each step is a distribution over s'
    let mut transition_factors = vec![0.0; dims.horizon * dims.states * d];
    for h in 0..dims.horizon {
        for k in 0..d {
            let col = random_simplex(dims.states, &mut rng);
            for (sp, p) in col.into_iter().enumerate() {
                transition_factors[(h * dims.states + sp) * d + k] = p;
            }
        }
    }
    let params = LinearGameParams { features: features.clone(), follower_params, leader_params, transition_factors, param_bound: 10.0 };
    let init = random_simplex(dims.states, &mut rng);
    let game = params.to_game(init, 0.0, eta)?;
    let info = PublicInfo::of(&game, features);
    Ok(LinearBenchmark { game, params, info })
}

/// Online benchmark: `d = 4`, `|S| = 3`, `|A| = |B| = 2`, `H = 2`, `eta = 1`.
pub fn online_benchmark() -> LinearBenchmark {
    linear_benchmark(Dims::new(3, 2, 2, 2), 4, 1.0, BENCHMARK_SEED).expect("benchmark game is valid")
}

/// Single-state, single-step choice problem for estimation-rate studies.
#[derive(Clone, Debug)]
pub struct MleBenchmark {
    pub game: MarkovGame,
    pub features: FeatureMap,
    pub theta_star: Vec<f64>,
}

/// `H = 1`, one state, `|A| = 2`, `|B| = 3`, `d = 3`.
pub fn mle_benchmark() -> MleBenchmark {
    let lin = linear_benchmark(Dims::new(1, 2, 3, 1), 3, 1.0, BENCHMARK_SEED + 1).expect("benchmark game is valid");
    let theta_star = lin.params.follower_params[0].clone();
    MleBenchmark { game: lin.game, features: lin.info.features, theta_star }
}

impl MleBenchmark {
    /// Policy-integrated feature matrices of `n` random prescriptions.
    pub fn designs(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let dims = self.game.dims();
        let mut rng = stream_rng(seed, 6);
        (0..n)
            .map(|_| {
                let p = LeaderPolicy::random(dims, &mut rng);
                crate::mle::policy_features(&self.features, p.prescription(0, 0), 0, 0)
            })
            .collect()
    }
}

/// Finite model class around a farsighted game.
#[derive(Clone, Debug)]
pub struct FarsightedBenchmark {
    pub truth: MarkovGame,
    pub models: Vec<MarkovGame>,
    pub true_index: usize,
    pub policies: Vec<LeaderPolicy>,
    pub constraint: IdentificationConstraint,
}

fn mix(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
}

/// `n_models` candidates (the truth among them) and `n_policies` grid
/// policies; every follower reward satisfies the sum-to-half constraint.
/// Each alternative mixes the truth with an independent game whose
/// transitions are sharpened toward one next state.
pub fn farsighted_benchmark_with(dims: Dims, n_models: usize, n_policies: usize, seed: u64) -> Result<FarsightedBenchmark> {
    if n_models == 0 || n_policies == 0 {
        return Err(Error::Config("class sizes must be positive".into()));
    }
    let constraint = IdentificationConstraint::sum_to_half(dims.follower_actions);
    let truth = make_random_game(dims, 1.0, 1.0, Some(&constraint), seed)?;
    let mut rng = stream_rng(seed, 8);
    let det = PrescriptionGrid::for_dims(dims, 0)?;
    let policies: Vec<LeaderPolicy> = (0..n_policies).map(|_| random_grid_policy(dims, &det, &mut rng)).collect();
    let values = policies.iter().map(|p| evaluate_j(&truth, p)).collect::<Result<Vec<_>>>()?;
    let best = (0..n_policies).fold(0, |b, i| if values[i] > values[b] { i } else { b });
    let true_index = rng.random_range(0..n_models);
    let ns = dims.states;
    let mut models = Vec::with_capacity(n_models);
    for i in 0..n_models {
        if i == true_index {
            models.push(truth.clone());
            continue;
        }
        let other = make_random_game(dims, 1.0, 1.0, Some(&constraint), seed.wrapping_add(1 + i as u64))?;
        let w = 0.9 + 0.1 * rng.random::<f64>();
        let sharp: Vec<f64> = (0..other.transition().len() / ns)
            .flat_map(|_| {
                let hit = rng.random_range(0..ns);
                (0..ns).map(move |sp| if sp == hit { 0.99 } else { 0.0 } + 0.01 / ns as f64)
            })
            .collect();
        // each alternative promises a suboptimal policy extra leader reward,
        // so optimism has to rule it out from data
        let target = if n_policies > 1 {
            let k = rng.random_range(0..n_policies - 1);
            if k >= best { k + 1 } else { k }
        } else {
            0
        };
        let mut u = truth.leader_reward().to_vec();
        for h in 0..dims.horizon {
            for st in 0..ns {
                for a in 0..dims.leader_actions {
                    for b in 0..dims.follower_actions {
                        if policies[target].prob(h, st, b, a) > 0.5 {
                            let x = &mut u[h * dims.sab() + dims.idx(st, a, b)];
                            *x += 0.8 * (1.0 - *x);
                        }
                    }
                }
            }
        }
        models.push(MarkovGame::new(
            dims,
            truth.init_dist().to_vec(),
            u,
            mix(truth.follower_reward(), other.follower_reward(), w),
            mix(truth.transition(), &sharp, w),
            1.0,
            1.0,
        )?);
    }
    Ok(FarsightedBenchmark { truth, models, true_index, policies, constraint })
}

/// `|M| = 10`, `|Pi| = 8`, `H = 3`, `gamma = 1`, two states and actions.
pub fn farsighted_benchmark() -> FarsightedBenchmark {
    farsighted_benchmark_with(Dims::new(2, 2, 2, 3), 10, 8, BENCHMARK_SEED).expect("benchmark classes are valid")
}

fn random_grid_policy<R: Rng + ?Sized>(dims: Dims, grid: &PrescriptionGrid, rng: &mut R) -> LeaderPolicy {
    let mut pol = LeaderPolicy::uniform(dims);
    for h in 0..dims.horizon {
        for s in 0..dims.states {
            pol.set_prescription(h, s, grid.get(rng.random_range(0..grid.len())));
        }
    }
    pol
}

/// How the leader's policy is picked for each offline episode.
#[derive(Clone, Debug)]
pub enum PolicySampler {
    /// The same policy every episode.
    Fixed(LeaderPolicy),
    /// One policy of the list, uniformly.
    UniformOver(Vec<LeaderPolicy>),
    /// A fresh policy with an independent uniform draw from the grid at
    /// every `(h, s)`.
    GridPerState(PrescriptionGrid),
}

/// `T` independent episodes, each under a freshly sampled policy. The
/// simulator is memoryless given `(s, a, b)`, so the data are compliant.
pub fn generate_offline_dataset(game: &MarkovGame, sampler: &PolicySampler, episodes: usize, seed: u64) -> Result<Dataset> {
    let dims = game.dims();
    let mut ds = Dataset::new(dims);
    let mut pick = stream_rng(seed, 2);
    let mut play = stream_rng(seed, 3);
    match sampler {
        PolicySampler::Fixed(p) => {
            if episodes > 0 {
                let resp = quantal_response(game, p)?;
                let id = ds.add_policy(p.clone());
                for _ in 0..episodes {
                    ds.push(sample_trajectory(game, p, &resp, id, &mut play)?);
                }
            }
        }
        PolicySampler::UniformOver(list) => {
            if list.is_empty() {
                return Err(Error::Config("empty policy list".into()));
            }
            let responses = list.iter().map(|p| quantal_response(game, p)).collect::<Result<Vec<_>>>()?;
            for p in list {
                ds.add_policy(p.clone());
            }
            for _ in 0..episodes {
                let i = pick.random_range(0..list.len());
                ds.push(sample_trajectory(game, &list[i], &responses[i], i, &mut play)?);
            }
        }
        PolicySampler::GridPerState(grid) => {
            if grid.is_empty() {
                return Err(Error::EmptyGrid);
            }
            for _ in 0..episodes {
                let p = random_grid_policy(dims, grid, &mut pick);
                let resp = quantal_response(game, &p)?;
                let id = ds.add_policy(p.clone());
                ds.push(sample_trajectory(game, &p, &resp, id, &mut play)?);
            }
        }
    }
    Ok(ds)
}

/// Where the game comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GameSource {
    /// Two-state tabular benchmark.
    BenchmarkOffline,
    /// `d = 4` linear benchmark.
    BenchmarkOnline,
    /// Finite model class around a farsighted game.
    BenchmarkFarsighted,
    /// Game JSON file (with an optional linear block).
    File { path: PathBuf },
    Random {
        states: usize,
        leader_actions: usize,
        follower_actions: usize,
        horizon: usize,
        #[serde(default)]
        gamma: f64,
        #[serde(default = "one")]
        eta: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

/// `beta` as a number or as a formula token expanded per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Value(f64),
    Token(String),
}

impl Default for BetaSpec {
    fn default() -> Self {
        BetaSpec::Token("linear".into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    MlePvi,
    MleBcp,
    Pmle,
    MleOvi,
    Golf,
    Omle,
}

impl Algorithm {
    pub fn is_online(self) -> bool {
        matches!(self, Algorithm::MleOvi | Algorithm::Golf | Algorithm::Omle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub kind: Algorithm,
    #[serde(default)]
    pub scheme: Option<Scheme>,
    #[serde(default)]
    pub beta: BetaSpec,
    /// Multiplier applied after expanding `beta`.
    #[serde(default = "one")]
    pub beta_scale: f64,
    #[serde(default = "one")]
    pub c1: f64,
    #[serde(default = "one")]
    pub gamma2_scale: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Simplex mesh of the prescription grid (0 = deterministic only).
    #[serde(default)]
    pub mesh: usize,
    #[serde(default = "default_samples")]
    pub sample_size: usize,
    /// Extra class members besides the true ones (finite-class learners).
    #[serde(default = "default_class_extra")]
    pub class_extra: usize,
    /// Size of the leader policy class (finite-class learners).
    #[serde(default = "default_policies")]
    pub policies: usize,
}

fn default_delta() -> f64 {
    0.1
}
fn default_samples() -> usize {
    64
}
fn default_class_extra() -> usize {
    5
}
fn default_policies() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub episodes: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub game: GameSource,
    pub algorithm: AlgorithmConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `.toml` or `.json` by extension; relative game paths resolve
    /// against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text)?,
            _ => Self::from_toml(&text)?,
        };
        if let GameSource::File { path: p } = &mut cfg.game {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.episodes.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep axes must be nonempty".into()));
        }
        let mut seeds = self.sweep.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.sweep.seeds.len() {
            return Err(Error::Config("sweep seeds must be distinct".into()));
        }
        if let GameSource::File { path } = &self.game {
            if !path.exists() {
                return Err(Error::Config(format!("game file {} does not exist", path.display())));
            }
        }
        let a = &self.algorithm;
        match (a.kind, a.scheme) {
            (Algorithm::MlePvi, Some(s)) if s.is_optimistic() => {
                return Err(Error::Config(format!("{s} is an online scheme")));
            }
            (Algorithm::MleOvi, Some(s)) if !s.is_optimistic() => {
                return Err(Error::Config(format!("{s} is an offline scheme")));
            }
            _ => {}
        }
        if !(a.delta > 0.0 && a.delta < 1.0) {
            return Err(Error::Config("delta must lie in (0, 1)".into()));
        }
        if let BetaSpec::Token(t) = &a.beta {
            if !BETA_TOKENS.contains(&t.as_str()) {
                return Err(Error::Config(format!("unknown beta token {t:?}; expected one of {BETA_TOKENS:?}")));
            }
        }
        Ok(())
    }
}

pub const BETA_TOKENS: [&str; 4] = ["linear", "linear-online", "farsighted", "finite-class"];

/// Inputs of the `beta` formulas for one run.
#[derive(Clone, Copy, Debug)]
pub struct BetaContext {
    pub dim: usize,
    pub horizon: usize,
    pub eta: f64,
    pub episodes: usize,
    pub delta: f64,
    pub class_size: usize,
}

/// Expands `spec` and returns the value with a log line describing it.
pub fn expand_beta(spec: &BetaSpec, scale: f64, ctx: BetaContext) -> Result<(f64, String)> {
    let (raw, how) = match spec {
        BetaSpec::Value(v) => (*v, format!("{v}")),
        BetaSpec::Token(t) => {
            let BetaContext { dim, horizon, eta, episodes, delta, class_size } = ctx;
            let v = match t.as_str() {
                "linear" => beta_linear(1.0, dim, horizon, eta, episodes, delta),
                "linear-online" => beta_linear_online(1.0, dim, horizon, eta, episodes, delta),
                "farsighted" => beta_farsighted(episodes, horizon, class_size, delta),
                "finite-class" => beta_finite_class(episodes, horizon, class_size, delta),
                other => return Err(Error::Config(format!("unknown beta token {other:?}"))),
            };
            (v, format!("{t}(d={dim}, H={horizon}, eta={eta}, T={episodes}, delta={delta}, N={class_size}) = {v}"))
        }
    };
    Ok((raw * scale, format!("{how} x {scale}")))
}

/// Outcome of one `(T, seed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub episodes: usize,
    pub seed: u64,
    pub ok: bool,
    #[serde(default)]
    pub error: Option<String>,
    pub beta: f64,
    pub beta_log: String,
    pub j_star: f64,
    /// Value of the returned (offline) or last announced (online) policy.
    pub j_hat: f64,
    pub subopt: f64,
    /// Learner's own value estimate of its output (`E W_hat_1` offline).
    pub estimate: f64,
    /// Online only.
    pub cum_regret: Option<f64>,
    pub coverage: Option<f64>,
}

/// A fully resolved instance: the true game, what the learner may see, the
/// linear parameters when known and the finite model class when defined.
#[derive(Clone, Debug)]
pub struct GameInstance {
    pub game: MarkovGame,
    pub info: PublicInfo,
    pub linear: Option<LinearGameParams>,
    pub models: Option<FarsightedBenchmark>,
}

pub fn resolve_game(source: &GameSource) -> Result<GameInstance> {
    Ok(match source {
        GameSource::BenchmarkOffline => {
            let game = offline_benchmark();
            GameInstance { info: PublicInfo::tabular(&game), game, linear: None, models: None }
        }
        GameSource::BenchmarkOnline => {
            let b = online_benchmark();
            GameInstance { game: b.game, info: b.info, linear: Some(b.params), models: None }
        }
        GameSource::BenchmarkFarsighted => {
            let b = farsighted_benchmark();
            GameInstance { info: PublicInfo::tabular(&b.truth), game: b.truth.clone(), linear: None, models: Some(b) }
        }
        GameSource::File { path } => {
            let (game, lin) = MarkovGame::load(path)?;
            let info = match &lin {
                Some(l) => PublicInfo::of(&game, l.features.clone()),
                None => PublicInfo::tabular(&game),
            };
            GameInstance { game, info, linear: lin, models: None }
        }
        GameSource::Random { states, leader_actions, follower_actions, horizon, gamma, eta, seed } => {
            let dims = Dims::new(*states, *leader_actions, *follower_actions, *horizon);
            let game = make_random_game(dims, *gamma, *eta, None, *seed)?;
            GameInstance { info: PublicInfo::tabular(&game), game, linear: None, models: None }
        }
    })
}

/// Finite classes with the truth inserted: the true follower reward plus
/// `extra` perturbations, and `U^{pi, theta*}` of every policy plus `extra`
/// perturbations.
pub fn make_finite_classes(game: &MarkovGame, policies: &[LeaderPolicy], extra: usize, seed: u64) -> Result<FiniteClasses> {
    let dims = game.dims();
    let mut rng = stream_rng(seed, 9);
    let mut rewards = vec![game.follower_reward().to_vec()];
    for _ in 0..extra {
        let w = 0.2 + 0.8 * rng.random::<f64>();
        rewards.push(game.follower_reward().iter().map(|r| (1.0 - w) * r + w * rng.random::<f64>()).collect());
    }
    let mut values = Vec::new();
    for p in policies {
        let resp = quantal_response(game, p)?;
        values.push(leader_values(game, p, &resp)?.u_table().to_vec());
    }
    for _ in 0..extra {
        let base = values[rng.random_range(0..values.len())].clone();
        let mut v = base;
        for h in 0..dims.horizon {
            let cap = (dims.horizon - h) as f64;
            for x in &mut v[h * dims.sab()..(h + 1) * dims.sab()] {
                *x = (*x + 0.5 * (rng.random::<f64>() - 0.5)).clamp(0.0, cap);
            }
        }
        values.push(v);
    }
    Ok(FiniteClasses { values, rewards })
}

fn grid_for(cfg: &AlgorithmConfig, dims: Dims) -> Result<PrescriptionGrid> {
    PrescriptionGrid::for_dims(dims, cfg.mesh)
}

/// `n` policies with an independent deterministic prescription per `(h, s)`.
pub fn policy_class(dims: Dims, n: usize, seed: u64) -> Result<Vec<LeaderPolicy>> {
    let det = PrescriptionGrid::for_dims(dims, 0)?;
    let mut rng = stream_rng(seed, 10);
    Ok((0..n).map(|_| random_grid_policy(dims, &det, &mut rng)).collect())
}

/// Runs one cell of a sweep; failures are recorded, not returned.
pub fn run_cell(cfg: &ExperimentConfig, episodes: usize, seed: u64) -> RunRecord {
    let mut rec = blank_record(episodes, seed);
    match run_cell_inner(cfg, episodes, seed, &mut rec) {
        Ok(()) => rec.ok = true,
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Runs one cell and propagates its error.
pub fn try_run_cell(cfg: &ExperimentConfig, episodes: usize, seed: u64) -> Result<RunRecord> {
    let mut rec = blank_record(episodes, seed);
    run_cell_inner(cfg, episodes, seed, &mut rec)?;
    rec.ok = true;
    Ok(rec)
}

fn blank_record(episodes: usize, seed: u64) -> RunRecord {
    RunRecord {
        episodes,
        seed,
        ok: false,
        error: None,
        beta: f64::NAN,
        beta_log: String::new(),
        j_star: f64::NAN,
        j_hat: f64::NAN,
        subopt: f64::NAN,
        estimate: f64::NAN,
        cum_regret: None,
        coverage: None,
    }
}

fn run_cell_inner(cfg: &ExperimentConfig, episodes: usize, seed: u64, rec: &mut RunRecord) -> Result<()> {
    let inst = resolve_game(&cfg.game)?;
    let a = &cfg.algorithm;
    let dims = inst.game.dims();
    let eta = inst.game.rationality();
    let class_size = match a.kind {
        Algorithm::Pmle | Algorithm::Omle => inst.models.as_ref().map_or(1, |m| m.models.len()),
        Algorithm::MleBcp | Algorithm::Golf => (1 + a.class_extra) * (a.policies + a.class_extra),
        _ => 1,
    };
    let ctx = BetaContext { dim: inst.info.features.dim(), horizon: dims.horizon, eta, episodes, delta: a.delta, class_size };
    let (beta, log) = expand_beta(&a.beta, a.beta_scale, ctx)?;
    rec.beta = beta;
    rec.beta_log = log;
    let data_seed = seed.wrapping_mul(0x51_7cc1_b727).wrapping_add(episodes as u64);
    match a.kind {
        Algorithm::MlePvi => {
            let grid = grid_for(a, dims)?;
            let (_, j_star) = solve_qse_myopic(&inst.game, &grid)?;
            let sampler = PolicySampler::GridPerState(PrescriptionGrid::for_dims(dims, 0)?);
            let ds = generate_offline_dataset(&inst.game, &sampler, episodes, data_seed)?;
            let mut lc = LinearConfig::new(a.scheme.unwrap_or(Scheme::S3), beta, a.c1);
            lc.delta = a.delta;
            lc.gamma2_scale = a.gamma2_scale;
            lc.sample_size = a.sample_size;
            lc.seed = seed;
            let est = mle_pvi(&inst.info, &ds, &grid, &lc)?;
            rec.j_star = j_star;
            rec.j_hat = evaluate_j(&inst.game, &est.policy)?;
            rec.estimate = est.initial_value(&inst.info.init_dist);
        }
        Algorithm::MleBcp => {
            let policies = policy_class(dims, a.policies, seed)?;
            let classes = make_finite_classes(&inst.game, &policies, a.class_extra, seed)?;
            let sampler = PolicySampler::GridPerState(PrescriptionGrid::for_dims(dims, 0)?);
            let ds = generate_offline_dataset(&inst.game, &sampler, episodes, data_seed)?;
            let res = mle_bcp(&inst.info, &ds, &classes, &policies, beta)?;
            let values = policies.iter().map(|p| evaluate_j(&inst.game, p)).collect::<Result<Vec<_>>>()?;
            rec.j_star = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rec.j_hat = values[res.policy_index];
            rec.estimate = res.pessimistic_values[res.policy_index].unwrap_or(f64::NAN);
        }
        Algorithm::Pmle => {
            let b = inst.models.as_ref().ok_or_else(|| Error::Config("pmle needs the farsighted benchmark".into()))?;
            let ds = generate_offline_dataset(&b.truth, &PolicySampler::UniformOver(b.policies.clone()), episodes, data_seed)?;
            let res = pmle_farsighted(&b.models, &b.policies, &ds, beta)?;
            let values = b.policies.iter().map(|p| evaluate_j(&b.truth, p)).collect::<Result<Vec<_>>>()?;
            rec.j_star = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rec.j_hat = values[res.policy_index];
            rec.estimate = res.pessimistic_values[res.policy_index];
            rec.coverage = Some(if res.confidence.contains(&b.true_index) { 1.0 } else { 0.0 });
        }
        Algorithm::MleOvi => {
            let grid = grid_for(a, dims)?;
            let mut lc = LinearConfig::new(a.scheme.unwrap_or(Scheme::S5), beta, a.c1);
            lc.delta = a.delta;
            lc.gamma2_scale = a.gamma2_scale;
            lc.sample_size = a.sample_size;
            lc.seed = seed;
            lc.log_episodes = Some(episodes);
            let mut learner = OviLearner::new(inst.info.clone(), grid.clone(), lc)?;
            let evaluator = Evaluator::myopic(inst.game.clone(), &grid)?;
            let mut env = SimulatedEnvironment::new(inst.game.clone(), inst.info.clone(), data_seed);
            let trace = run_online(&mut env, &mut learner, &evaluator, episodes)?;
            fill_online(rec, &trace);
        }
        Algorithm::Golf => {
            let grid = grid_for(a, dims)?;
            let policies = policy_class(dims, a.policies, seed)?;
            let classes = make_finite_classes(&inst.game, &policies, a.class_extra, seed)?;
            let mut learner = GolfLearner::new(inst.info.clone(), classes, grid.clone(), beta)?;
            let evaluator = Evaluator::myopic(inst.game.clone(), &grid)?.with_true_member(0);
            let mut env = SimulatedEnvironment::new(inst.game.clone(), inst.info.clone(), data_seed);
            let trace = run_online(&mut env, &mut learner, &evaluator, episodes)?;
            fill_online(rec, &trace);
        }
        Algorithm::Omle => {
            let b = inst.models.clone().ok_or_else(|| Error::Config("omle needs the farsighted benchmark".into()))?;
            let evaluator = Evaluator::over_class(b.truth.clone(), &b.policies)?.with_true_member(b.true_index);
            let mut learner = OmleLearner::new(b.models.clone(), b.policies.clone(), beta)?;
            let mut env = SimulatedEnvironment::new(b.truth.clone(), inst.info.clone(), data_seed);
            let trace = run_online(&mut env, &mut learner, &evaluator, episodes)?;
            fill_online(rec, &trace);
        }
    }
    rec.subopt = rec.j_star - rec.j_hat;
    Ok(())
}

fn fill_online(rec: &mut RunRecord, trace: &RegretTrace) {
    rec.j_star = trace.j_star;
    if let Some(last) = trace.episodes.last() {
        rec.j_hat = last.j_pi;
        rec.estimate = last.optimistic_value;
    } else {
        rec.j_hat = trace.j_star;
        rec.estimate = f64::NAN;
    }
    rec.cum_regret = Some(trace.regret());
    rec.coverage = trace.coverage();
}

/// Online cell plus its per-episode trace.
pub fn run_online_cell(cfg: &ExperimentConfig, episodes: usize, seed: u64) -> (RunRecord, Option<RegretTrace>) {
    if !cfg.algorithm.kind.is_online() {
        return (run_cell(cfg, episodes, seed), None);
    }
    // the trace is rebuilt here so that the record and the trace file agree
    let mut rec = run_cell(cfg, episodes, seed);
    let trace = if rec.ok { online_trace(cfg, episodes, seed).ok() } else { None };
    if rec.ok && trace.is_none() {
        rec.ok = false;
        rec.error = Some("trace could not be rebuilt".into());
    }
    (rec, trace)
}

/// The regret trace of an online cell.
pub fn online_trace(cfg: &ExperimentConfig, episodes: usize, seed: u64) -> Result<RegretTrace> {
    let inst = resolve_game(&cfg.game)?;
    let a = &cfg.algorithm;
    let dims = inst.game.dims();
    let eta = inst.game.rationality();
    let class_size = match a.kind {
        Algorithm::Omle => inst.models.as_ref().map_or(1, |m| m.models.len()),
        Algorithm::Golf => (1 + a.class_extra) * (a.policies + a.class_extra),
        _ => 1,
    };
    let ctx = BetaContext { dim: inst.info.features.dim(), horizon: dims.horizon, eta, episodes, delta: a.delta, class_size };
    let (beta, _) = expand_beta(&a.beta, a.beta_scale, ctx)?;
    let data_seed = seed.wrapping_mul(0x51_7cc1_b727).wrapping_add(episodes as u64);
    match a.kind {
        Algorithm::MleOvi => {
            let grid = grid_for(a, dims)?;
            let mut lc = LinearConfig::new(a.scheme.unwrap_or(Scheme::S5), beta, a.c1);
            lc.delta = a.delta;
            lc.gamma2_scale = a.gamma2_scale;
            lc.sample_size = a.sample_size;
            lc.seed = seed;
            lc.log_episodes = Some(episodes);
            let mut learner = OviLearner::new(inst.info.clone(), grid.clone(), lc)?;
            let evaluator = Evaluator::myopic(inst.game.clone(), &grid)?;
            let mut env = SimulatedEnvironment::new(inst.game.clone(), inst.info.clone(), data_seed);
            run_online(&mut env, &mut learner, &evaluator, episodes)
        }
        Algorithm::Golf => {
            let grid = grid_for(a, dims)?;
            let policies = policy_class(dims, a.policies, seed)?;
            let classes = make_finite_classes(&inst.game, &policies, a.class_extra, seed)?;
            let mut learner = GolfLearner::new(inst.info.clone(), classes, grid.clone(), beta)?;
            let evaluator = Evaluator::myopic(inst.game.clone(), &grid)?.with_true_member(0);
            let mut env = SimulatedEnvironment::new(inst.game.clone(), inst.info.clone(), data_seed);
            run_online(&mut env, &mut learner, &evaluator, episodes)
        }
        Algorithm::Omle => {
            let b = inst.models.clone().ok_or_else(|| Error::Config("omle needs the farsighted benchmark".into()))?;
            let evaluator = Evaluator::over_class(b.truth.clone(), &b.policies)?.with_true_member(b.true_index);
            let mut learner = OmleLearner::new(b.models.clone(), b.policies.clone(), beta)?;
            let mut env = SimulatedEnvironment::new(b.truth.clone(), inst.info.clone(), data_seed);
            run_online(&mut env, &mut learner, &evaluator, episodes)
        }
        _ => Err(Error::Config("not an online algorithm".into())),
    }
}

/// Median and quartiles by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One aggregate row per `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub episodes: usize,
    pub runs: usize,
    pub failed: usize,
    pub median_subopt: f64,
    pub q25_subopt: f64,
    pub q75_subopt: f64,
    pub median_regret: f64,
    pub q25_regret: f64,
    pub q75_regret: f64,
}

/// Median / IQR of suboptimality (and regret when present) per `T` over
/// the successful runs.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut by_t: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_t.entry(r.episodes).or_default().push(r);
    }
    by_t.into_iter()
        .map(|(t, rs)| {
            let ok: Vec<&&RunRecord> = rs.iter().filter(|r| r.ok).collect();
            let mut sub: Vec<f64> = ok.iter().map(|r| r.subopt).collect();
            sub.sort_by(f64::total_cmp);
            let mut reg: Vec<f64> = ok.iter().filter_map(|r| r.cum_regret).collect();
            reg.sort_by(f64::total_cmp);
            AggregateRow {
                episodes: t,
                runs: ok.len(),
                failed: rs.len() - ok.len(),
                median_subopt: quantile(&sub, 0.5),
                q25_subopt: quantile(&sub, 0.25),
                q75_subopt: quantile(&sub, 0.75),
                median_regret: quantile(&reg, 0.5),
                q25_regret: quantile(&reg, 0.25),
                q75_regret: quantile(&reg, 0.75),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    /// Config with every default filled in.
    pub config: ExperimentConfig,
    pub beta_expansions: Vec<String>,
    pub failures: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

/// Summary of a finished sweep.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub out_dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
    pub manifest: Manifest,
}

impl ExperimentResult {
    /// Nonzero exit only when every run failed.
    pub fn all_failed(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| !r.ok)
    }
}

fn write_tracked(dir: &Path, name: &str, bytes: &[u8], files: &mut Vec<ManifestEntry>) -> Result<()> {
    std::fs::write(dir.join(name), bytes)?;
    files.push(ManifestEntry { path: name.into(), sha256: sha256_hex(bytes) });
    Ok(())
}

fn trace_csv(trace: &RegretTrace) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "j_pi", "subopt", "cum_regret", "optimistic_value", "truth_in_set"])?;
    for e in &trace.episodes {
        let cov = e.truth_in_set.map_or(String::new(), |b| (b as u8).to_string());
        w.write_record([
            e.t.to_string(),
            e.j_pi.to_string(),
            e.subopt.to_string(),
            e.cum_regret.to_string(),
            e.optimistic_value.to_string(),
            cov,
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Executes the sweep in a worker pool, then writes per-run JSON (and CSV
/// traces for online learners), `aggregate.csv` and `manifest.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let cells: Vec<(usize, u64)> =
        cfg.sweep.episodes.iter().flat_map(|&t| cfg.sweep.seeds.iter().map(move |&s| (t, s))).collect();
    let mut results: Vec<(RunRecord, Option<RegretTrace>)> =
        cells.par_iter().map(|&(t, s)| run_online_cell(cfg, t, s)).collect();
    results.sort_by_key(|(r, _)| (r.episodes, r.seed));

    let mut files = Vec::new();
    let mut failures = Vec::new();
    let mut expansions = Vec::new();
    for (rec, trace) in &results {
        let stem = format!("run_T{}_seed{}", rec.episodes, rec.seed);
        write_tracked(out_dir, &format!("{stem}.json"), serde_json::to_string_pretty(rec)?.as_bytes(), &mut files)?;
        if let Some(tr) = trace {
            write_tracked(out_dir, &format!("trace_T{}_seed{}.csv", rec.episodes, rec.seed), &trace_csv(tr)?, &mut files)?;
        }
        if let Some(e) = &rec.error {
            failures.push(format!("{stem}: {e}"));
        }
        if !rec.beta_log.is_empty() && !expansions.contains(&rec.beta_log) {
            expansions.push(rec.beta_log.clone());
        }
    }
    let records: Vec<RunRecord> = results.into_iter().map(|(r, _)| r).collect();
    let rows = aggregate(&records);
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let agg = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_tracked(out_dir, "aggregate.csv", &agg, &mut files)?;
    let config_toml = cfg.to_toml()?;
    write_tracked(out_dir, "config.toml", config_toml.as_bytes(), &mut files)?;
    write_tracked(out_dir, "config.json", serde_json::to_string_pretty(cfg)?.as_bytes(), &mut files)?;
    let manifest = Manifest {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        beta_expansions: expansions,
        failures,
        files,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentResult { out_dir: out_dir.to_path_buf(), records, aggregate: rows, manifest })
}

/// Reads `aggregate.csv` back.
pub fn read_aggregate(dir: &Path) -> Result<Vec<AggregateRow>> {
    let path = dir.join("aggregate.csv");
    if !path.exists() {
        return Err(Error::MissingAggregate(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(&path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Reads every `run_*.json` in `dir`, sorted by `(T, seed)`.
pub fn read_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("run_") && name.ends_with(".json") {
            out.push(serde_json::from_str::<RunRecord>(&std::fs::read_to_string(&p)?)?);
        }
    }
    out.sort_by_key(|r| (r.episodes, r.seed));
    Ok(out)
}

/// Writes `subopt.tsv` (`T, median, q25, q75`), `regret.tsv` when online
/// runs are present, and one `regret_T<T>_seed<s>.tsv` (`t, cum_regret`)
/// per trace. Returns the written paths.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_aggregate(dir)?;
    let mut written = Vec::new();
    let mut sub = String::from("T\tmedian_subopt\tq25\tq75\n");
    for r in &rows {
        sub.push_str(&format!("{}\t{}\t{}\t{}\n", r.episodes, r.median_subopt, r.q25_subopt, r.q75_subopt));
    }
    let p = dir.join("subopt.tsv");
    std::fs::write(&p, sub)?;
    written.push(p);
    if rows.iter().any(|r| r.median_regret.is_finite()) {
        let mut reg = String::from("T\tmedian_regret\tq25\tq75\n");
        for r in &rows {
            reg.push_str(&format!("{}\t{}\t{}\t{}\n", r.episodes, r.median_regret, r.q25_regret, r.q75_regret));
        }
        let p = dir.join("regret.tsv");
        std::fs::write(&p, reg)?;
        written.push(p);
    }
    let mut traces: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("trace_") && n.ends_with(".csv")))
        .collect();
    traces.sort();
    for tp in traces {
        let mut r = csv::Reader::from_path(&tp)?;
        let mut out = String::from("t\tcum_regret\n");
        for rec in r.records() {
            let rec = rec?;
            out.push_str(&format!("{}\t{}\n", &rec[0], &rec[3]));
        }
        let stem = tp.file_stem().and_then(|s| s.to_str()).unwrap_or("trace").replacen("trace_", "regret_", 1);
        let p = dir.join(format!("{stem}.tsv"));
        std::fs::write(&p, out)?;
        written.push(p);
    }
    Ok(written)
}

/// Pessimism validity of one offline cell: `E W_hat_1 <= J(pi_hat)`.
pub fn pessimism_valid(rec: &RunRecord, tol: f64) -> bool {
    rec.ok && rec.estimate <= rec.j_hat + tol
}

/// Grid search over `c1` for the smallest value whose runs pass the
/// pessimism check in at least `target` of the seeds. Returns every
/// `(c1, pass rate)` tried and the chosen value.
pub fn calibrate_c1(cfg: &ExperimentConfig, candidates: &[f64], target: f64) -> Result<(Vec<(f64, f64)>, Option<f64>)> {
    cfg.validate()?;
    if cfg.algorithm.kind != Algorithm::MlePvi {
        return Err(Error::Config("calibration applies to mle-pvi".into()));
    }
    let mut table = Vec::new();
    let mut chosen = None;
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    for c1 in sorted {
        let mut c = cfg.clone();
        c.algorithm.c1 = c1;
        let cells: Vec<(usize, u64)> =
            c.sweep.episodes.iter().flat_map(|&t| c.sweep.seeds.iter().map(move |&s| (t, s))).collect();
        let recs: Vec<RunRecord> = cells.par_iter().map(|&(t, s)| run_cell(&c, t, s)).collect();
        let rate = recs.iter().filter(|r| pessimism_valid(r, 1e-9)).count() as f64 / recs.len() as f64;
        table.push((c1, rate));
        if chosen.is_none() && rate >= target {
            chosen = Some(c1);
        }
    }
    Ok((table, chosen))
}

/// Default `c1` candidates of the calibration mode.
pub const C1_CANDIDATES: [f64; 7] = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0];

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(kind: Algorithm, scheme: Option<Scheme>) -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            game: GameSource::BenchmarkOffline,
            algorithm: AlgorithmConfig {
                kind,
                scheme,
                beta: BetaSpec::Value(1.0),
                beta_scale: 1.0,
                c1: 0.01,
                gamma2_scale: 1e-9,
                delta: 0.1,
                mesh: 0,
                sample_size: 8,
                class_extra: 2,
                policies: 4,
            },
            sweep: SweepConfig { episodes: vec![50], seeds: vec![1, 2, 3] },
            out: None,
        }
    }

    #[test]
    fn test_empty_dataset() {
        let g = offline_benchmark();
        let ds = generate_offline_dataset(&g, &PolicySampler::GridPerState(PrescriptionGrid::for_dims(g.dims(), 0).unwrap()), 0, 1)
            .unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn test_dataset_deterministic() {
        let g = offline_benchmark();
        let s = PolicySampler::GridPerState(PrescriptionGrid::for_dims(g.dims(), 0).unwrap());
        let a = generate_offline_dataset(&g, &s, 40, 9).unwrap();
        let b = generate_offline_dataset(&g, &s, 40, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_linear_benchmark_is_linear() {
        let b = online_benchmark();
        assert!(b.params.max_deviation(&b.game) < 1e-12);
        assert_eq!(b.info.features.dim(), 4);
    }

    #[test]
    fn test_farsighted_benchmark_shape() {
        let b = farsighted_benchmark();
        assert_eq!(b.models.len(), 10);
        assert_eq!(b.policies.len(), 8);
        assert_eq!(b.models[b.true_index], b.truth);
        for m in &b.models {
            assert!(b.constraint.max_residual(m.dims(), m.follower_reward()) < 1e-9);
        }
    }

    #[test]
    fn test_sweep_bookkeeping_and_determinism() {
        let cfg = small_cfg(Algorithm::MlePvi, Some(Scheme::S3));
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = run_experiment(&cfg, d1.path()).unwrap();
        let r2 = run_experiment(&cfg, d2.path()).unwrap();
        assert_eq!(r1.records, r2.records);
        assert_eq!(r1.records.len(), 3);
        assert_eq!(r1.aggregate.len(), 1);
        let a1 = std::fs::read(d1.path().join("aggregate.csv")).unwrap();
        let a2 = std::fs::read(d2.path().join("aggregate.csv")).unwrap();
        assert_eq!(a1, a2);
        // medians recomputed from the per-run files
        let runs = read_runs(d1.path()).unwrap();
        let mut sub: Vec<f64> = runs.iter().map(|r| r.subopt).collect();
        sub.sort_by(f64::total_cmp);
        assert_eq!(read_aggregate(d1.path()).unwrap()[0].median_subopt, quantile(&sub, 0.5));
        for f in &r1.manifest.files {
            let bytes = std::fs::read(d1.path().join(&f.path)).unwrap();
            assert_eq!(sha256_hex(&bytes), f.sha256);
        }
    }

    #[test]
    fn test_emit_plots_missing_aggregate() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(emit_plots(d.path()), Err(Error::MissingAggregate(_))));
    }

    #[test]
    fn test_online_trace_plot_nondecreasing() {
        let mut cfg = small_cfg(Algorithm::Omle, None);
        cfg.game = GameSource::BenchmarkFarsighted;
        cfg.algorithm.beta = BetaSpec::Token("farsighted".into());
        cfg.sweep = SweepConfig { episodes: vec![30], seeds: vec![4] };
        let d = tempfile::tempdir().unwrap();
        let r = run_experiment(&cfg, d.path()).unwrap();
        assert!(r.records[0].ok, "{:?}", r.records[0].error);
        let written = emit_plots(d.path()).unwrap();
        let series = written.iter().find(|p| p.to_string_lossy().contains("regret_T30")).unwrap();
        let text = std::fs::read_to_string(series).unwrap();
        let vals: Vec<f64> = text.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(vals.len(), 30);
        assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn test_config_round_trip_and_validation() {
        let cfg = small_cfg(Algorithm::MlePvi, Some(Scheme::S2));
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.sweep.seeds = vec![1, 1];
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.algorithm.beta = BetaSpec::Token("nope".into());
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.algorithm.scheme = Some(Scheme::S5);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn test_beta_tokens() {
        let ctx = BetaContext { dim: 3, horizon: 2, eta: 1.0, episodes: 100, delta: 0.1, class_size: 10 };
        let (b, log) = expand_beta(&BetaSpec::Token("linear".into()), 1.0, ctx).unwrap();
        assert_eq!(b, beta_linear(1.0, 3, 2, 1.0, 100, 0.1));
        assert!(log.contains("linear"));
        let (b2, _) = expand_beta(&BetaSpec::Value(2.0), 0.5, ctx).unwrap();
        assert_eq!(b2, 1.0);
    }

    #[test]
    fn test_quantile() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[5.0], 0.25), 5.0);
    }
}
