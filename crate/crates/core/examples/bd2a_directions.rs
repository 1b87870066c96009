//! Recover a planted label-correlated axis with BD²A.
//!
//! Embeddings are Gaussian noise except along axis 3, where negatives are
//! spread far wider than positives. The leading negative-polarity direction
//! should point along that axis, and the criterion curve shows how quickly
//! the remaining directions lose discriminative power.
//!
//! cargo run --example bd2a_directions

use biaslens::bd2a::{compute_scatter, criterion_curve, project, solve_directions, Polarity};
use biaslens::dataset::Label;
use biaslens::klotski::{EmbeddingRow, EmbeddingTable};
use biaslens::scorer::Confidence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const K: usize = 8;

fn main() -> biaslens::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rows = Vec::new();
    for i in 0..600 {
        let label = if i % 2 == 0 { Label::Positive } else { Label::Negative };
        let mut u: Vec<f64> = (0..K).map(|_| StandardNormal.sample(&mut rng)).collect();
        if label == Label::Negative {
            u[3] *= 4.0;
        }
        rows.push(EmbeddingRow {
            sample_id: format!("s{i:04}"),
            label,
            u,
            tile_index: 0,
            confidence: Confidence::new(0.5, 0.5),
        });
    }
    let table = EmbeddingTable { k: K, rows };

    let scatter = compute_scatter(&table, Polarity::Positive)?;
    let bundle = solve_directions(&scatter, 3)?;
    let phi1 = &bundle.phi[0];
    let norm = phi1.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("lambdas {:?}", bundle.lambdas);
    println!("|cos(phi_1, e_3)| = {:.4}", (phi1[3] / norm).abs());

    for (k, lambda) in criterion_curve(&scatter, K)? {
        println!("k = {k}: lambda {lambda:.3}");
    }

    let v = project(&table, &bundle)?;
    let spread = |label: Label| {
        let xs: Vec<f64> = table.rows.iter().zip(&v).filter(|(r, _)| r.label == label).map(|(_, p)| p[0]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
    };
    println!(
        "projection spread on phi_1: positives {:.3}, negatives {:.3}",
        spread(Label::Positive),
        spread(Label::Negative)
    );
    Ok(())
}
