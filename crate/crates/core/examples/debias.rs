//! Remove the training samples flagged by the bias directions, retrain, and
//! compare the test-set drop before and after. Also writes the debiased
//! training manifest.
//!
//! cargo run --release --example debias -- [WORK_DIR]

use biaslens::biasgen::{generate, GenConfig};
use biaslens::config::PipelineConfig;
use biaslens::io::write_atomic;
use biaslens::eval::{performance_drop, retrain_debiased, train_mil};
use biaslens::klotski::{prepare, train_klotski, EmbeddingTable};
use biaslens::pipeline::{headline_split, Directions};
use biaslens::selector::debias_manifest;

fn main() -> biaslens::Result<()> {
    let work = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/debias".into()));
    let mut gen = GenConfig {
        n_train: 600,
        n_val: 150,
        n_test: 400,
        ..GenConfig::default()
    };
    gen.artifacts[0].rho_n = 0.4;
    let data_dir = work.join("data");
    let set = generate(&gen, &data_dir)?;
    let cfg = PipelineConfig {
        epochs: 10,
        ..PipelineConfig::default()
    };
    let tile = |m| prepare(m, gen.shape(), cfg.grid());
    let (train, val, test) = (tile(&set.train)?, tile(&set.val)?, tile(&set.test)?);

    let (klotski, _) = train_klotski(&train, Some(&val), &cfg.klotski_train())?;
    let train_table = EmbeddingTable::extract(&klotski, &train)?;
    let test_table = EmbeddingTable::extract(&klotski, &test)?;
    let dirs = Directions::fit(&train_table, cfg.k_directions)?;

    let test_split = headline_split(&test_table, &dirs, cfg.theta, &cfg)?;
    let train_split = headline_split(&train_table, &dirs, cfg.debias_theta, &cfg)?;

    let (mil, _) = train_mil(&train, None, &cfg.mil_train())?;
    let (debiased, _) = retrain_debiased(&train, None, &train_split, &cfg.mil_train())?;
    let before = performance_drop(&mil, &test, &test_split)?;
    let after = performance_drop(&debiased, &test, &test_split)?;
    println!("removed {} training samples", train_split.biased_ids.len());
    println!("accuracy drop on the biased split: {:?} -> {:?}", before.drop.accuracy, after.drop.accuracy);

    let clean = debias_manifest(&set.train, &train_split)?;
    // same directory, so image paths stay valid
    write_atomic(&data_dir.join("train_debiased.jsonl"), clean.to_jsonl().as_bytes())?;
    println!("debiased manifest: {} entries", clean.len());
    Ok(())
}
