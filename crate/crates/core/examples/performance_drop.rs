//! Mark the samples that sit at the extremes of the learned bias directions,
//! then measure how much worse a downstream MIL classifier does on them.
//! Also compares per-direction drops of BD²A against PCA and raw embedding
//! coordinates.
//!
//! cargo run --release --example performance_drop -- [WORK_DIR]

use biaslens::bd2a::Polarity;
use biaslens::biasgen::{generate, GenConfig};
use biaslens::config::PipelineConfig;
use biaslens::eval::{attribute_sweep, drop_from_predictions, mean_accuracy_drop, predict_mil, sweep_csv, train_mil};
use biaslens::klotski::{prepare, train_klotski, EmbeddingTable};
use biaslens::pipeline::Directions;
use biaslens::selector::{coordinate_directions, pca_directions, select_biased};

fn main() -> biaslens::Result<()> {
    let work = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/drop".into()));
    let mut gen = GenConfig {
        n_train: 600,
        n_val: 150,
        n_test: 400,
        ..GenConfig::default()
    };
    gen.artifacts[0].rho_n = 0.4;
    let set = generate(&gen, &work.join("data"))?;
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

    let (mil, _) = train_mil(&train, None, &cfg.mil_train())?;
    let preds = predict_mil(&mil, &test)?;

    for theta in [0.02, 0.06, 0.12] {
        let split = select_biased(&test_table, &[&dirs.negative], theta, cfg.k_used, cfg.center)?;
        let r = drop_from_predictions(&preds, &split)?;
        println!(
            "theta {theta:.2}: {} biased, accuracy rest {:?} biased {:?} drop {:?}",
            split.biased_ids.len(),
            r.rest.accuracy,
            r.biased.accuracy,
            r.drop.accuracy
        );
    }

    let k = cfg.k_used;
    let bd = dirs.negative.truncated(k);
    let pca = pca_directions(&train_table, Polarity::Negative, k)?;
    let coord = coordinate_directions(&train_table, Polarity::Negative, train_table.k)?;
    let rows = attribute_sweep(
        &preds,
        &test_table,
        &[("bd2a".into(), &bd), ("pca".into(), &pca), ("coordinate".into(), &coord)],
        cfg.theta,
        cfg.center,
    )?;
    print!("{}", sweep_csv(&rows));
    let mut means: Vec<_> = mean_accuracy_drop(&rows).into_iter().collect();
    means.sort_by(|a, b| a.0.cmp(&b.0));
    println!("mean accuracy drop per family: {means:?}");
    Ok(())
}
