//! Train the background-only key-tile network on generated data and export
//! the per-sample embeddings.
//!
//! cargo run --release --example klotski_embeddings -- [WORK_DIR]

use biaslens::biasgen::{generate, GenConfig};
use biaslens::config::PipelineConfig;
use biaslens::io::write_atomic;
use biaslens::klotski::{prepare, train_klotski, EmbeddingTable};
use biaslens::pipeline::klotski_accuracy;

fn main() -> biaslens::Result<()> {
    let work = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/klotski".into()));
    let gen = GenConfig {
        n_train: 400,
        n_val: 100,
        n_test: 200,
        ..GenConfig::default()
    };
    let set = generate(&gen, &work.join("data"))?;
    let cfg = PipelineConfig {
        epochs: 8,
        ..PipelineConfig::default()
    };
    let train = prepare(&set.train, gen.shape(), cfg.grid())?;
    let val = prepare(&set.val, gen.shape(), cfg.grid())?;
    let test = prepare(&set.test, gen.shape(), cfg.grid())?;

    let (model, log) = train_klotski(&train, Some(&val), &cfg.klotski_train())?;
    for e in &log.epochs {
        println!("epoch {:2}  loss {:.4}  val acc {:?}", e.epoch, e.mean_loss, e.val_accuracy);
    }
    // above chance only if the background alone predicts the label
    println!("held-out accuracy {:?}", klotski_accuracy(&model, &test)?);

    let table = EmbeddingTable::extract(&model, &test)?;
    table.save(&work.join("embeddings_test.blem"))?;
    write_atomic(&work.join("embeddings_test.csv"), table.to_csv().as_bytes())?;
    println!("{} embeddings of width {} in {}", table.len(), table.k, work.display());
    Ok(())
}
