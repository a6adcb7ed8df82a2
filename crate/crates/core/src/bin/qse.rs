use clap::{Args, Parser, Subcommand, ValueEnum};
use quantal::game::{Dataset, LeaderPolicy};
use quantal::harness::{
    calibrate_c1, emit_plots, generate_offline_dataset, resolve_game, run_experiment, try_run_cell, Algorithm,
    AlgorithmConfig, BetaSpec, ExperimentConfig, GameInstance, GameSource, PolicySampler, SweepConfig, C1_CANDIDATES,
};
use quantal::mle::{
    beta_linear, confidence_set, covariance_data, fit_mle_myopic, laplacian_data, laplacian_ratio, rank_diagnostic,
    ChoiceData, FitOptions, SetOptions,
};
use quantal::offline::Scheme;
use quantal::oracle::{best_over_policies, run_battery, BatteryConfig};
use quantal::planner::{solve_qse_myopic, PrescriptionGrid};
use quantal::response::quantal_response;
use quantal::{Error, Result};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qse", version, about = "Quantal Stackelberg equilibria: planning, estimation and learning")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (or file stem for `gen data`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment config (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bench {
    Offline,
    Online,
    Farsighted,
}

#[derive(Args, Clone)]
struct GameArgs {
    /// Game JSON file.
    #[arg(long, conflicts_with = "benchmark")]
    game: Option<PathBuf>,
    /// Built-in benchmark instance.
    #[arg(long, value_enum)]
    benchmark: Option<Bench>,
}

impl GameArgs {
    fn source(&self) -> Result<GameSource> {
        match (&self.game, self.benchmark) {
            (Some(p), _) => Ok(GameSource::File { path: p.clone() }),
            (None, Some(Bench::Offline)) => Ok(GameSource::BenchmarkOffline),
            (None, Some(Bench::Online)) => Ok(GameSource::BenchmarkOnline),
            (None, Some(Bench::Farsighted)) => Ok(GameSource::BenchmarkFarsighted),
            (None, None) => Err(Error::Config("pass --game FILE or --benchmark NAME".into())),
        }
    }

    fn resolve(&self) -> Result<GameInstance> {
        resolve_game(&self.source()?)
    }
}

#[derive(Args, Clone)]
struct LearnArgs {
    #[command(flatten)]
    game: GameArgs,
    /// Number of episodes `T`.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Bonus scheme for the linear learners (S1-S3 offline, S4-S5 online).
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Confidence radius: a number or a formula token (default: the
    /// algorithm's own formula).
    #[arg(long)]
    beta: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma2_scale: f64,
    #[arg(long, default_value_t = 0)]
    mesh: usize,
}

impl LearnArgs {
    fn config(&self, kind: Algorithm, seed: u64) -> Result<ExperimentConfig> {
        let beta = match &self.beta {
            Some(b) => b.parse::<f64>().map_or_else(|_| BetaSpec::Token(b.clone()), BetaSpec::Value),
            None => BetaSpec::Token(default_beta_token(kind).into()),
        };
        let cfg = ExperimentConfig {
            name: format!("{kind:?}").to_lowercase(),
            game: self.game.source()?,
            algorithm: AlgorithmConfig {
                kind,
                scheme: self.scheme,
                beta,
                beta_scale: 1.0,
                c1: self.c1,
                gamma2_scale: self.gamma2_scale,
                delta: 0.1,
                mesh: self.mesh,
                sample_size: 64,
                class_extra: 5,
                policies: 8,
            },
            sweep: SweepConfig { episodes: vec![self.episodes], seeds: vec![seed] },
            out: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_beta_token(kind: Algorithm) -> &'static str {
    match kind {
        Algorithm::MlePvi => "linear",
        Algorithm::MleOvi => "linear-online",
        Algorithm::MleBcp | Algorithm::Golf => "finite-class",
        Algorithm::Pmle | Algorithm::Omle => "farsighted",
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OfflineAlg {
    MlePvi,
    MleBcp,
    Pmle,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnlineAlg {
    MleOvi,
    Golf,
    Omle,
}

#[derive(Subcommand)]
enum GenWhat {
    /// Write a game JSON.
    Game {
        #[command(flatten)]
        game: GameArgs,
        /// Random game dimensions `S,A,B,H` instead of a benchmark.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        random: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
    },
    /// Write an offline dataset (`<out>.jsonl` plus a policy sidecar).
    Data {
        #[command(flatten)]
        game: GameArgs,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact QSE: grid DP for myopic games, enumeration over the policy class otherwise.
    Plan {
        #[command(flatten)]
        game: GameArgs,
        #[arg(long, default_value_t = 0)]
        mesh: usize,
    },
    /// Quantal response to a policy (uniform by default).
    Respond {
        #[command(flatten)]
        game: GameArgs,
        /// Leader policy JSON.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// MLE of the follower parameter at step `h` with confidence diagnostics.
    Fit {
        #[command(flatten)]
        game: GameArgs,
        /// Dataset stem written by `gen data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Offline learning from a generated dataset.
    Offline {
        #[arg(long, value_enum, default_value = "mle-pvi")]
        algorithm: OfflineAlg,
        #[command(flatten)]
        learn: LearnArgs,
        /// Grid-search `c1` for pessimism validity over seeds `0..seed+N`.
        #[arg(long)]
        calibrate: Option<u64>,
    },
    /// Online learning against the simulator.
    Online {
        #[arg(long, value_enum, default_value = "mle-ovi")]
        algorithm: OnlineAlg,
        #[command(flatten)]
        learn: LearnArgs,
    },
    /// Generate games or datasets.
    Gen {
        #[command(subcommand)]
        what: GenWhat,
    },
    /// Run the numerical lemma battery.
    Verify {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Config-driven sweep.
    Sweep,
    /// Emit TSV plot data from a sweep directory.
    Plotdata {
        /// Sweep output directory (defaults to --out).
        dir: Option<PathBuf>,
    },
}

fn out_dir(cli: &Cli, fallback: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn plan(cli: &Cli, game: &GameArgs, mesh: usize) -> Result<()> {
    let inst = game.resolve()?;
    let (policy, j) = if inst.game.discount() == 0.0 {
        solve_qse_myopic(&inst.game, &PrescriptionGrid::for_dims(inst.game.dims(), mesh)?)?
    } else {
        let b = inst.models.ok_or_else(|| Error::Config("farsighted planning needs a policy class".into()))?;
        let (i, j) = best_over_policies(&inst.game, &b.policies)?;
        (b.policies[i].clone(), j)
    };
    let dir = out_dir(cli, "out/plan");
    write_json(&dir.join("policy.json"), &serde_json::to_value(&policy)?)?;
    println!("{}", json!({ "j_star": j, "policy": dir.join("policy.json") }));
    Ok(())
}

fn respond(cli: &Cli, game: &GameArgs, policy: Option<&Path>) -> Result<()> {
    let inst = game.resolve()?;
    let dims = inst.game.dims();
    let pol: LeaderPolicy = match policy {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => LeaderPolicy::uniform(dims),
    };
    let sol = quantal_response(&inst.game, &pol)?;
    let rows = |f: &dyn Fn(usize, usize) -> Vec<f64>| -> Vec<Vec<Vec<f64>>> {
        (0..dims.horizon).map(|h| (0..dims.states).map(|s| f(h, s)).collect()).collect()
    };
    let v: Vec<Vec<f64>> = (0..dims.horizon).map(|h| (0..dims.states).map(|s| sol.v(h, s)).collect()).collect();
    let report = json!({
        "eta": sol.eta(),
        "advantage_bound": sol.advantage_bound(),
        "invariant_violation": sol.invariant_violation(),
        "nu": rows(&|h, s| sol.nu_row(h, s).to_vec()),
        "q": rows(&|h, s| sol.q_row(h, s).to_vec()),
        "a": rows(&|h, s| sol.adv_row(h, s).to_vec()),
        "v": v,
    });
    let dir = out_dir(cli, "out/respond");
    write_json(&dir.join("response.json"), &report)?;
    if !cli.quiet {
        eprintln!("wrote {}", dir.join("response.json").display());
    }
    println!("{}", json!({ "invariant_violation": sol.invariant_violation() }));
    Ok(())
}

fn fit(cli: &Cli, game: &GameArgs, data: &Path, h: usize, beta: Option<f64>) -> Result<()> {
    let inst = game.resolve()?;
    let dims = inst.game.dims();
    if h >= dims.horizon {
        return Err(Error::Config(format!("step {h} outside horizon {}", dims.horizon)));
    }
    let ds = Dataset::read_jsonl(data, dims)?;
    let eta = inst.game.rationality();
    let features = &inst.info.features;
    let choices = ChoiceData::from_dataset(&ds, features, h, eta);
    let opts = FitOptions::default();
    let fit = fit_mle_myopic(&choices, opts, None)?;
    let beta = beta.unwrap_or_else(|| beta_linear(1.0, features.dim(), dims.horizon, eta, ds.len().max(1), 0.1));
    let c_eta = 1.0 / eta + quantal::response::advantage_bound(&inst.game);
    let mut rng = quantal::game::stream_rng(cli.seed, 11);
    let set = confidence_set(&choices, &fit, beta, SetOptions::new(opts.bound, c_eta), &mut rng)?;
    let sigma = covariance_data(&fit.theta, &choices);
    let mut visited: Vec<usize> = ds.episodes.iter().filter_map(|e| e.steps.get(h).map(|s| s.state)).collect();
    visited.sort_unstable();
    visited.dedup();
    let rank = rank_diagnostic(&sigma, features, h, &visited);
    let (ratio_lo, ratio_hi) = laplacian_ratio(&sigma, &laplacian_data(&choices));
    let truth_in_set = inst.linear.as_ref().map(|l| set.contains(&choices, &l.follower_params[h])).transpose()?;
    let report = json!({
        "samples": choices.len(),
        "fit": fit,
        "beta": beta,
        "set_members": set.theta_sample.len(),
        "set_min_nll": set.min_nll,
        "truth_in_set": truth_in_set,
        "rank": rank,
        "laplacian_ratio": [ratio_lo, ratio_hi],
    });
    let dir = out_dir(cli, "out/fit");
    write_json(&dir.join("fit.json"), &report)?;
    if rank.deficient && !cli.quiet {
        eprintln!("warning: covariance is rank deficient ({} free directions)", rank.null_dim - rank.structural_null_dim);
    }
    println!("{report}");
    Ok(())
}

fn learn(cli: &Cli, cfg: &ExperimentConfig, episodes: usize) -> Result<()> {
    let rec = try_run_cell(cfg, episodes, cli.seed)?;
    let dir = out_dir(cli, "out/learn");
    write_json(&dir.join("run.json"), &serde_json::to_value(&rec)?)?;
    println!("{}", serde_json::to_string(&rec)?);
    Ok(())
}

fn gen(cli: &Cli, what: &GenWhat) -> Result<()> {
    match what {
        GenWhat::Game { game, random, gamma, eta } => {
            let (g, lin) = match random {
                Some(v) => {
                    let dims = quantal::game::Dims::new(v[0], v[1], v[2], v[3]);
                    (quantal::game::make_random_game(dims, *gamma, *eta, None, cli.seed)?, None)
                }
                None => {
                    let inst = game.resolve()?;
                    (inst.game, inst.linear)
                }
            };
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("out/game.json"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&path, g.to_json(lin.as_ref())?)?;
            println!("{}", json!({ "game": path, "hash": g.content_hash()? }));
        }
        GenWhat::Data { game, episodes } => {
            let inst = game.resolve()?;
            let sampler = PolicySampler::GridPerState(PrescriptionGrid::for_dims(inst.game.dims(), 0)?);
            let ds = generate_offline_dataset(&inst.game, &sampler, *episodes, cli.seed)?;
            let stem = cli.out.clone().unwrap_or_else(|| PathBuf::from("out/data"));
            if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            ds.write_jsonl(&stem)?;
            println!("{}", json!({ "stem": stem, "episodes": ds.len() }));
        }
    }
    Ok(())
}

fn verify(cli: &Cli, instances: usize, tolerance: f64) -> Result<()> {
    let report = run_battery(&BatteryConfig { instances, seed: cli.seed, tolerance });
    let dir = out_dir(cli, "out/verify");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("junit.xml"), report.to_junit_xml())?;
    let table = report.slack_table();
    std::fs::write(dir.join("slack.txt"), &table)?;
    println!("{table}");
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Verification("lemma battery reported violations".into()))
    }
}

fn sweep(cli: &Cli) -> Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("sweep needs --config".into()))?;
    let cfg = ExperimentConfig::load(path)?;
    let dir = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    let res = run_experiment(&cfg, &dir)?;
    if !cli.quiet {
        for f in &res.manifest.failures {
            eprintln!("failed: {f}");
        }
    }
    for row in &res.aggregate {
        println!("{}", serde_json::to_string(row)?);
    }
    if res.all_failed() {
        return Err(Error::RunFailed(res.manifest.failures.join("; ")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Plan { game, mesh } => plan(cli, game, *mesh),
        Cmd::Respond { game, policy } => respond(cli, game, policy.as_deref()),
        Cmd::Fit { game, data, step, beta } => fit(cli, game, data, *step, *beta),
        Cmd::Offline { algorithm, learn: args, calibrate } => {
            let kind = match algorithm {
                OfflineAlg::MlePvi => Algorithm::MlePvi,
                OfflineAlg::MleBcp => Algorithm::MleBcp,
                OfflineAlg::Pmle => Algorithm::Pmle,
            };
            let mut cfg = match &cli.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => args.config(kind, cli.seed)?,
            };
            if let Some(n) = calibrate {
                cfg.sweep.seeds = (cli.seed..cli.seed + (*n).max(1)).collect();
                let (table, chosen) = calibrate_c1(&cfg, &C1_CANDIDATES, 1.0)?;
                for (c1, rate) in &table {
                    println!("{}", json!({ "c1": c1, "pass_rate": rate }));
                }
                println!("{}", json!({ "chosen_c1": chosen }));
                return Ok(());
            }
            learn(cli, &cfg, cfg.sweep.episodes[0])
        }
        Cmd::Online { algorithm, learn: args } => {
            let kind = match algorithm {
                OnlineAlg::MleOvi => Algorithm::MleOvi,
                OnlineAlg::Golf => Algorithm::Golf,
                OnlineAlg::Omle => Algorithm::Omle,
            };
            let cfg = match &cli.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => args.config(kind, cli.seed)?,
            };
            learn(cli, &cfg, cfg.sweep.episodes[0])
        }
        Cmd::Gen { what } => gen(cli, what),
        Cmd::Verify { instances, tolerance } => verify(cli, *instances, *tolerance),
        Cmd::Sweep => sweep(cli),
        Cmd::Plotdata { dir } => {
            let dir = dir.clone().or_else(|| cli.out.clone()).ok_or_else(|| Error::Config("plotdata needs a directory".into()))?;
            for p in emit_plots(&dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
