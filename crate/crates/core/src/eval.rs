//! Downstream max-pooling MIL classifier and the performance-drop report.
//!
//! The MIL model scores every tile of a sample, lesion tiles included, and
//! treats the tile with the highest positive confidence as the sample's
//! representative for both training and prediction. A direction is judged
//! by how much worse that model does on the samples it marks as biased than
//! on the rest.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::klotski::{max_positive_tile, train_key_tile, Selection, TiledSample, TrainConfig, TrainingLog};
use crate::scorer::ScorerModel;
use crate::selector::{select_per_direction, BiasedSplit, CenterMode};
use crate::bd2a::DirectionBundle;
use crate::klotski::EmbeddingTable;

/// Rank-statistic ROC-AUC: probability that a random positive outscores a
/// random negative, ties counting one half. `None` when either class is
/// absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: Label,
    pub predicted: Label,
    /// Positive-class confidence.
    pub score: f64,
}

/// Classification metrics; `None` marks a value that is undefined on the
/// given samples (no samples, absent class, no predictions of a class).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub precision_pos: Option<f64>,
    pub recall_pos: Option<f64>,
    pub precision_neg: Option<f64>,
    pub recall_neg: Option<f64>,
    pub roc_auc: Option<f64>,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

pub fn compute_metrics(preds: &[Prediction]) -> Metrics {
    let count = |l: Label, p: Label| preds.iter().filter(|x| x.label == l && x.predicted == p).count();
    let tp = count(Label::Positive, Label::Positive);
    let fn_ = count(Label::Positive, Label::Negative);
    let fp = count(Label::Negative, Label::Positive);
    let tn = count(Label::Negative, Label::Negative);
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let pos: Vec<bool> = preds.iter().map(|p| p.label == Label::Positive).collect();
    Metrics {
        n: preds.len(),
        accuracy: ratio(tp + tn, preds.len()),
        precision_pos: ratio(tp, tp + fp),
        recall_pos: ratio(tp, tp + fn_),
        precision_neg: ratio(tn, tn + fn_),
        recall_neg: ratio(tn, tn + fp),
        roc_auc: roc_auc(&scores, &pos),
    }
}

/// `rest − biased` per metric; undefined when either side is.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Drops {
    pub accuracy: Option<f64>,
    pub precision_pos: Option<f64>,
    pub recall_pos: Option<f64>,
    pub precision_neg: Option<f64>,
    pub recall_neg: Option<f64>,
    pub roc_auc: Option<f64>,
}

impl Drops {
    pub fn between(rest: &Metrics, biased: &Metrics) -> Drops {
        let d = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
        Drops {
            accuracy: d(rest.accuracy, biased.accuracy),
            precision_pos: d(rest.precision_pos, biased.precision_pos),
            recall_pos: d(rest.recall_pos, biased.recall_pos),
            precision_neg: d(rest.precision_neg, biased.precision_neg),
            recall_neg: d(rest.recall_neg, biased.recall_neg),
            roc_auc: d(rest.roc_auc, biased.roc_auc),
        }
    }

    /// Keep only the precision/recall pair of the class an attribute
    /// speaks against: a positive attribute is judged on negatives.
    pub fn for_attribute(mut self, polarity: Label) -> Drops {
        match polarity {
            Label::Positive => {
                self.precision_pos = None;
                self.recall_pos = None;
            }
            Label::Negative => {
                self.precision_neg = None;
                self.recall_neg = None;
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rest: Metrics,
    pub biased: Metrics,
    pub drop: Drops,
}

/// Train the max-pooling MIL classifier on all tiles.
pub fn train_mil(train: &[TiledSample], val: Option<&[TiledSample]>, cfg: &TrainConfig) -> Result<(ScorerModel, TrainingLog)> {
    let labels: BTreeSet<Label> = train.iter().map(|s| s.label).collect();
    if labels.len() < 2 {
        return Err(Error::InvalidData(
            "MIL training needs samples of both labels".into(),
        ));
    }
    train_key_tile(train, val, cfg, "mil", Selection::MaxPositive)
}

pub fn predict_mil(model: &ScorerModel, samples: &[TiledSample]) -> Result<Vec<Prediction>> {
    samples
        .par_iter()
        .map(|s| {
            let (_, c) = max_positive_tile(model, s)?;
            Ok(Prediction {
                id: s.id.clone(),
                label: s.label,
                predicted: c.predicted(),
                score: c.q_p,
            })
        })
        .collect()
}

/// Metrics on the rest and biased partitions of `preds`.
pub fn drop_from_predictions(preds: &[Prediction], split: &BiasedSplit) -> Result<MetricsReport> {
    let known: BTreeSet<&str> = preds.iter().map(|p| p.id.as_str()).collect();
    if let Some(id) = split.biased_ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(Error::InvalidData(format!("biased id {id} is not among the evaluated samples")));
    }
    let (biased, rest): (Vec<Prediction>, Vec<Prediction>) =
        preds.iter().cloned().partition(|p| split.biased_ids.contains(&p.id));
    let rest = compute_metrics(&rest);
    let biased = compute_metrics(&biased);
    Ok(MetricsReport {
        drop: Drops::between(&rest, &biased),
        rest,
        biased,
    })
}

pub fn performance_drop(model: &ScorerModel, test: &[TiledSample], split: &BiasedSplit) -> Result<MetricsReport> {
    drop_from_predictions(&predict_mil(model, test)?, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Bundle name, e.g. `positive`, `negative`, `pca_positive`.
    pub polarity: String,
    /// 1-based direction index.
    pub direction: usize,
    pub drop: Drops,
}

/// One drop row per direction of every named bundle. Precision/recall drops
/// follow [`Drops::for_attribute`].
pub fn attribute_sweep(
    preds: &[Prediction],
    table: &EmbeddingTable,
    bundles: &[(String, &DirectionBundle)],
    theta: f64,
    center: CenterMode,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (name, bundle) in bundles {
        for (i, split) in select_per_direction(table, bundle, theta, center)?.iter().enumerate() {
            let r = drop_from_predictions(preds, split)?;
            rows.push(SweepRow {
                polarity: name.clone(),
                direction: i + 1,
                drop: r.drop.for_attribute(bundle.polarity.self_label()),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut s = String::from("polarity,direction,drop_accuracy,drop_prec_pos,drop_rec_pos,drop_prec_neg,drop_rec_neg,drop_auc\n");
    for r in rows {
        let d = &r.drop;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.polarity,
            r.direction,
            f(d.accuracy),
            f(d.precision_pos),
            f(d.recall_pos),
            f(d.precision_neg),
            f(d.recall_neg),
            f(d.roc_auc)
        ));
    }
    s
}

/// Mean accuracy drop per bundle name over its defined rows.
pub fn mean_accuracy_drop(rows: &[SweepRow]) -> HashMap<String, f64> {
    let mut acc: HashMap<String, (f64, usize)> = HashMap::new();
    for r in rows {
        if let Some(d) = r.drop.accuracy {
            let e = acc.entry(r.polarity.clone()).or_default();
            e.0 += d;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Retrain the MIL model without the samples `split` marks as biased.
/// `split` must come from the training set.
pub fn retrain_debiased(
    train: &[TiledSample],
    val: Option<&[TiledSample]>,
    split: &BiasedSplit,
    cfg: &TrainConfig,
) -> Result<(ScorerModel, TrainingLog)> {
    let known: BTreeSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    if let Some(id) = split.biased_ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(Error::InvalidData(format!("biased id {id} is not in the training set")));
    }
    let kept: Vec<TiledSample> = train
        .iter()
        .filter(|s| !split.biased_ids.contains(&s.id))
        .cloned()
        .collect();
    train_mil(&kept, val, cfg)
}
