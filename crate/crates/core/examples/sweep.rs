//! Config-driven sweep: per-run files, aggregate medians, manifest and
//! plot data, written under a directory given on the command line.
use quantal::harness::{emit_plots, run_experiment, ExperimentConfig};
use std::path::PathBuf;

const CONFIG: &str = r#"
name = "offline-s3"

[game]
source = "benchmark-offline"

[algorithm]
kind = "mle-pvi"
scheme = "S3"
beta = "linear"
c1 = 0.01
gamma2_scale = 1e-9
sample_size = 16

[sweep]
episodes = [100, 400, 1600]
seeds = [0, 1, 2, 3, 4, 5, 6, 7]
"#;

fn main() -> quantal::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("qse-sweep"));
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let res = run_experiment(&cfg, &out)?;
    for row in &res.aggregate {
        println!(
            "T = {:>4}: median subopt {:.4} (IQR {:.4} .. {:.4}), {} runs",
            row.episodes, row.median_subopt, row.q25_subopt, row.q75_subopt, row.runs
        );
    }
    println!("beta: {}", res.manifest.beta_expansions.join("; "));
    for p in emit_plots(&out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
