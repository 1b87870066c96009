//! Full experiment on a dataset described by a generator config: KlotskiNet,
//! BD²A, biased split, MIL drop, θ trend, baseline sweep and debiased
//! retraining. Prints the report as JSON.
//!
//! cargo run --release --example experiment -- [GEN_CONFIG.toml] [SEED]
//!
//! Defaults to `configs/stripe_biased.toml` and seed 0. Takes a few minutes
//! at the default sizes.

use biaslens::biasgen::{generate, GenConfig};
use biaslens::config::PipelineConfig;
use biaslens::pipeline::{run_experiment, ExperimentOptions, TiledData};

fn main() -> biaslens::Result<()> {
    let mut args = std::env::args().skip(1);
    let gen_path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/stripe_biased.toml").into());
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));

    let mut gen = GenConfig::load(gen_path.as_ref())?;
    gen.seed = seed;
    let dir = std::env::temp_dir().join(format!("biaslens-experiment-{seed}"));
    generate(&gen, &dir)?;

    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let data = TiledData::load(&dir, &cfg)?;
    let opts = ExperimentOptions {
        artifact: gen.artifacts.first().map(|a| a.name.clone()),
        theta_sweep: vec![0.02, 0.06, 0.12],
        baselines: true,
        debias: true,
    };
    let (report, _) = run_experiment(&data, &cfg, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
