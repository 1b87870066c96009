//! Write a small synthetic dataset and report how often the stripe artifact
//! co-occurs with each label.
//!
//! cargo run --example generate_dataset -- [OUT_DIR]

use biaslens::biasgen::{generate, truth_column, GenConfig};
use biaslens::dataset::Label;

fn main() -> biaslens::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/dataset".into());
    let cfg = GenConfig {
        n_train: 200,
        n_val: 50,
        n_test: 100,
        ..GenConfig::default()
    };
    let set = generate(&cfg, out.as_ref())?;
    println!("generator config:\n{}", cfg.to_toml());

    let truth = truth_column(&set.train, "stripe")?;
    for label in [Label::Positive, Label::Negative] {
        let ids: Vec<_> = set.train.entries.iter().filter(|e| e.label == label).map(|e| &e.id).collect();
        let carriers = ids.iter().filter(|id| truth[id.as_str()]).count();
        println!("{label:?}: {carriers} of {} carry the stripe", ids.len());
    }
    println!("wrote {} / {} / {} samples to {out}", set.train.len(), set.val.len(), set.test.len());
    Ok(())
}
