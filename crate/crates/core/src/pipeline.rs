//! End-to-end runs over a generated (or any manifest-described) dataset
//! directory holding `train.jsonl`, `val.jsonl` and `test.jsonl`.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::bd2a::{compute_scatter, solve_directions, DirectionBundle, Polarity};
use crate::biasgen::{artifact_separation_auc, truth_column};
use crate::config::PipelineConfig;
use crate::dataset::{load_manifest, probe_shape, ImageShape, Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::eval::{
    attribute_sweep, compute_metrics, drop_from_predictions, mean_accuracy_drop, predict_mil, retrain_debiased,
    train_mil, Metrics, MetricsReport, SweepRow,
};
use crate::klotski::{infer_label, prepare, train_klotski, EmbeddingTable, TiledSample, TrainingLog};
use crate::scorer::ScorerModel;
use crate::selector::{coordinate_directions, pca_directions, select_biased, BiasedSplit};

#[derive(Debug, Clone)]
pub struct TiledData {
    pub shape: ImageShape,
    pub manifests: BTreeMap<&'static str, Manifest>,
    pub train: Vec<TiledSample>,
    pub val: Vec<TiledSample>,
    pub test: Vec<TiledSample>,
}

impl TiledData {
    pub fn load(dir: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let mut manifests = BTreeMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let m = load_manifest(&dir.join(format!("{}.jsonl", split.name())))?;
            manifests.insert(split.name(), m);
        }
        let shape = probe_shape(&manifests["train"])?;
        let tile = |name: &str| prepare(&manifests[name], shape, cfg.grid());
        Ok(TiledData {
            shape,
            train: tile("train")?,
            val: tile("val")?,
            test: tile("test")?,
            manifests,
        })
    }
}

/// Both polarities' direction bundles fitted on one embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub positive: DirectionBundle,
    pub negative: DirectionBundle,
}

impl Directions {
    pub fn fit(table: &EmbeddingTable, k: usize) -> Result<Self> {
        Ok(Directions {
            positive: solve_directions(&compute_scatter(table, Polarity::Positive)?, k)?,
            negative: solve_directions(&compute_scatter(table, Polarity::Negative)?, k)?,
        })
    }

    pub fn get(&self, p: Polarity) -> &DirectionBundle {
        match p {
            Polarity::Positive => &self.positive,
            Polarity::Negative => &self.negative,
        }
    }
}

/// Held-out accuracy of the key-tile classifier (samples without a
/// background tile are left out).
pub fn klotski_accuracy(model: &ScorerModel, samples: &[TiledSample]) -> Result<Option<f64>> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for s in samples {
        if let Some((pred, _)) = infer_label(model, s)? {
            n += 1;
            hits += usize::from(pred == s.label);
        }
    }
    Ok((n > 0).then(|| hits as f64 / n as f64))
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Artifact whose ground truth is scored against the first direction.
    pub artifact: Option<String>,
    /// Extra θ values for the drop trend.
    pub theta_sweep: Vec<f64>,
    /// Per-direction sweep over BD²A, PCA and raw-coordinate bundles.
    pub baselines: bool,
    /// Retrain the MIL model without the training samples selected at
    /// `debias_theta`.
    pub debias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasOutcome {
    pub removed: usize,
    /// Test-split accuracy drop of the original MIL model.
    pub biased_model: MetricsReport,
    pub debiased_model: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub klotski_val_accuracy: Option<f64>,
    pub klotski_test_accuracy: Option<f64>,
    pub klotski_epochs: usize,
    pub separation_auc: Option<f64>,
    pub lambdas: Vec<f64>,
    pub mil_test: Metrics,
    pub split: BiasedSplit,
    pub drop: MetricsReport,
    pub theta_sweep: Vec<(f64, MetricsReport)>,
    pub sweep: Vec<SweepRow>,
    pub mean_sweep_drop: BTreeMap<String, f64>,
    pub debias: Option<DebiasOutcome>,
}

/// Trained models and tables kept alongside a report.
pub struct ExperimentState {
    pub klotski: ScorerModel,
    pub klotski_log: TrainingLog,
    pub train_table: EmbeddingTable,
    pub test_table: EmbeddingTable,
    pub directions: Directions,
    pub mil: ScorerModel,
}

/// Biased split from the first `k_used` directions of the configured
/// polarities.
pub fn headline_split(table: &EmbeddingTable, d: &Directions, theta: f64, cfg: &PipelineConfig) -> Result<BiasedSplit> {
    let bundles: Vec<&DirectionBundle> = cfg.polarity.polarities().iter().map(|p| d.get(*p)).collect();
    select_biased(table, &bundles, theta, cfg.k_used, cfg.center)
}

/// The bundle whose first direction is scored against artifact truth and
/// compared with the baselines.
pub fn lead_polarity(cfg: &PipelineConfig) -> Polarity {
    cfg.polarity.polarities()[0]
}

pub fn run_experiment(
    data: &TiledData,
    cfg: &PipelineConfig,
    opts: &ExperimentOptions,
) -> Result<(ExperimentReport, ExperimentState)> {
    cfg.validate()?;
    let (klotski, klotski_log) = train_klotski(&data.train, Some(&data.val), &cfg.klotski_train())?;
    let klotski_val_accuracy = klotski_log.epochs.last().and_then(|e| e.val_accuracy);
    let klotski_test_accuracy = klotski_accuracy(&klotski, &data.test)?;
    info!("klotski test accuracy {klotski_test_accuracy:?}");

    let train_table = EmbeddingTable::extract(&klotski, &data.train)?;
    let test_table = EmbeddingTable::extract(&klotski, &data.test)?;
    let directions = Directions::fit(&train_table, cfg.k_directions)?;

    let separation_auc = match &opts.artifact {
        Some(name) => Some(artifact_separation_auc(
            &test_table,
            directions.get(lead_polarity(cfg)),
            &truth_column(&data.manifests["test"], name)?,
        )?),
        None => None,
    };

    let (mil, _) = train_mil(&data.train, Some(&data.val), &cfg.mil_train())?;
    let preds = predict_mil(&mil, &data.test)?;
    let mil_test = compute_metrics(&preds);
    info!("mil test accuracy {:?}", mil_test.accuracy);

    let split = headline_split(&test_table, &directions, cfg.theta, cfg)?;
    let drop = drop_from_predictions(&preds, &split)?;
    let theta_sweep = opts
        .theta_sweep
        .iter()
        .map(|&t| Ok((t, drop_from_predictions(&preds, &headline_split(&test_table, &directions, t, cfg)?)?)))
        .collect::<Result<Vec<_>>>()?;

    let (sweep, mean_sweep_drop) = if opts.baselines {
        let k = cfg.k_used;
        let lead = lead_polarity(cfg);
        let pca = pca_directions(&train_table, lead, k)?;
        // every hidden unit, as in selecting on each component of the layer
        let coords = coordinate_directions(&train_table, lead, train_table.k)?;
        let bd = directions.get(lead).truncated(k);
        let rows = attribute_sweep(
            &preds,
            &test_table,
            &[("bd2a".to_string(), &bd), ("pca".to_string(), &pca), ("coordinate".to_string(), &coords)],
            cfg.theta,
            cfg.center,
        )?;
        let means = mean_accuracy_drop(&rows).into_iter().collect();
        (rows, means)
    } else {
        (Vec::new(), BTreeMap::new())
    };

    let debias = if opts.debias {
        let train_split = headline_split(&train_table, &directions, cfg.debias_theta, cfg)?;
        let (debiased, _) = retrain_debiased(&data.train, Some(&data.val), &train_split, &cfg.mil_train())?;
        let debiased_preds = predict_mil(&debiased, &data.test)?;
        Some(DebiasOutcome {
            removed: train_split.biased_ids.len(),
            biased_model: drop.clone(),
            debiased_model: drop_from_predictions(&debiased_preds, &split)?,
        })
    } else {
        None
    };

    let report = ExperimentReport {
        klotski_val_accuracy,
        klotski_test_accuracy,
        klotski_epochs: klotski_log.epochs.len(),
        separation_auc,
        lambdas: directions.get(lead_polarity(cfg)).lambdas.clone(),
        mil_test,
        split,
        drop,
        theta_sweep,
        sweep,
        mean_sweep_drop,
        debias,
    };
    Ok((
        report,
        ExperimentState {
            klotski,
            klotski_log,
            train_table,
            test_table,
            directions,
            mil,
        },
    ))
}

/// Share of positive samples among those flagged biased, for diagnostics.
pub fn positive_share(split: &BiasedSplit, samples: &[TiledSample]) -> Result<f64> {
    let flagged: Vec<&TiledSample> = samples.iter().filter(|s| split.biased_ids.contains(&s.id)).collect();
    if flagged.is_empty() {
        return Err(Error::InvalidData("empty biased split".into()));
    }
    Ok(flagged.iter().filter(|s| s.label == Label::Positive).count() as f64 / flagged.len() as f64)
}
