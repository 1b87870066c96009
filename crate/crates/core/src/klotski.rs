//! Background-only multi-instance training and key-tile embedding
//! extraction.
//!
//! Every sample is represented by a single tile: among its background
//! tiles (all tiles for negatives, lesion-free tiles for positives) the one
//! with the largest normalized confidence for either label. Training steps
//! the scorer on that tile with the sample's label; extraction returns the
//! scorer's penultimate activations on it.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{ImageShape, Label, Manifest, Sample};
use crate::error::{Error, Result};
use crate::io::{derive_seed, read_file, write_atomic, ByteReader, ByteWriter};
use crate::scorer::{init_model, Architecture, Confidence, ScorerModel};
use crate::tiler::{split, Grid, Tile, TileSet};

const TABLE_MAGIC: &[u8; 4] = b"BLEM";
const TABLE_VERSION: u32 = 1;

/// Hyper-parameters shared by the key-tile trainers (this module and the
/// downstream MIL model).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub grid: Grid,
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement beyond
    /// `plateau_tol`, counted from the first epoch that beats the initial
    /// validation accuracy. Zero disables early stopping.
    pub patience: usize,
    pub plateau_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grid: Grid::new(4, 4),
            embed_dim: 64,
            epochs: 20,
            lr: 0.02,
            seed: 0,
            patience: 5,
            plateau_tol: 0.005,
        }
    }
}

/// A sample cut into tiles, kept in memory for repeated epochs.
#[derive(Debug, Clone)]
pub struct TiledSample {
    pub id: String,
    pub label: Label,
    pub tiles: TileSet,
    pub bias_truth: Option<BTreeMap<String, bool>>,
}

impl TiledSample {
    pub fn new(sample: &Sample, grid: Grid) -> Result<Self> {
        Ok(TiledSample {
            id: sample.id.clone(),
            label: sample.label,
            tiles: split(sample, grid)?,
            bias_truth: sample.bias_truth.clone(),
        })
    }

    /// Candidate tiles for key-tile selection. With a known positive label
    /// the lesion tiles are removed; negatives and unlabeled samples keep
    /// every tile.
    pub fn candidates(&self, label: Option<Label>) -> Vec<&Tile> {
        match label {
            Some(Label::Positive) => self.tiles.background_tiles(),
            _ => self.tiles.all_tiles(),
        }
    }
}

/// Load and tile every sample of a manifest.
pub fn prepare(manifest: &Manifest, shape: ImageShape, grid: Grid) -> Result<Vec<TiledSample>> {
    grid.tile_shape(shape)?;
    let samples = manifest.load_samples(shape)?;
    samples.par_iter().map(|s| TiledSample::new(s, grid)).collect()
}

/// Key-tile rule over precomputed confidences. `None` for an empty list.
///
/// `j_p` maximizes `q_p`, `j_n` maximizes `q_n` (lowest index wins ties);
/// the key tile is `j_p` when `q_p[j_p] > q_n[j_n]`, otherwise `j_n`.
pub fn key_tile_index(confidences: &[Confidence]) -> Option<usize> {
    let argmax = |f: fn(&Confidence) -> f64| {
        let mut best = 0;
        for (i, c) in confidences.iter().enumerate() {
            if f(c) > f(&confidences[best]) {
                best = i;
            }
        }
        best
    };
    if confidences.is_empty() {
        return None;
    }
    let jp = argmax(|c| c.q_p);
    let jn = argmax(|c| c.q_n);
    Some(if confidences[jp].q_p > confidences[jn].q_n {
        jp
    } else {
        jn
    })
}

/// Score `tiles` and apply [`key_tile_index`]. Returns the position within
/// `tiles` and that tile's confidence.
pub fn select_key_tile(model: &ScorerModel, tiles: &[&Tile]) -> Result<(usize, Confidence)> {
    let conf = tiles
        .iter()
        .map(|t| model.score(t))
        .collect::<Result<Vec<_>>>()?;
    let j = key_tile_index(&conf)
        .ok_or_else(|| Error::InvalidData("key-tile selection over an empty tile list".into()))?;
    Ok((j, conf[j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub trained: usize,
    pub skipped: usize,
    /// How often each tile index was selected as key tile.
    pub selection_histogram: Vec<usize>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
    /// Epoch whose weights were returned; with validation data this is the
    /// most accurate one, otherwise the last.
    pub best_epoch: Option<usize>,
}

/// How a trainer picks the tile it steps on for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Selection {
    /// Background tiles only, two-sided maximum-confidence rule.
    Klotski,
    /// All tiles, maximum `q_p` (standard max-pooling MIL).
    MaxPositive,
}

/// Shared epoch loop for the key-tile trainers.
pub(crate) fn train_key_tile(
    train: &[TiledSample],
    val: Option<&[TiledSample]>,
    cfg: &TrainConfig,
    stage: &str,
    selection: Selection,
) -> Result<(ScorerModel, TrainingLog)> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidData("empty training set".into()))?;
    let tile_shape = first.tiles.tiles[0].shape;
    let arch = Architecture::new(tile_shape, cfg.embed_dim)?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be > 0, got {}",
            cfg.lr
        )));
    }
    let seed = derive_seed(cfg.seed, stage);
    let mut model = init_model(derive_seed(seed, "init"), arch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best_val = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut first_val: Option<f64> = None;
    let mut best_epoch: Option<(f64, usize, ScorerModel)> = None;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}")));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut hist = vec![0usize; cfg.grid.tile_count()];
        let (mut loss_sum, mut trained, mut skipped) = (0.0, 0usize, 0usize);
        for &i in &order {
            let s = &train[i];
            let (tile, _) = match selection {
                Selection::Klotski => {
                    let cands = s.candidates(Some(s.label));
                    if cands.is_empty() {
                        debug!("{stage}: sample {} has no background tile, skipped", s.id);
                        skipped += 1;
                        continue;
                    }
                    let (j, c) = select_key_tile(&model, &cands)?;
                    let tile = cands[j];
                    if s.label == Label::Positive && tile.contains_lesion {
                        return Err(Error::InvalidData(format!(
                            "lesion tile {} of {} selected for training",
                            tile.index, s.id
                        )));
                    }
                    (tile, c)
                }
                Selection::MaxPositive => max_positive_tile(&model, s)?,
            };
            hist[tile.index] += 1;
            let loss = model
                .train_step(tile, s.label, cfg.lr)
                .map_err(|e| match e {
                    Error::NonFiniteLoss(_) => Error::Divergence {
                        epoch,
                        sample_id: s.id.clone(),
                    },
                    other => other,
                })?;
            loss_sum += loss;
            trained += 1;
        }
        if trained == 0 {
            return Err(Error::InvalidData(
                "no trainable sample (every sample lacks a background tile)".into(),
            ));
        }
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(match selection {
                Selection::Klotski => klotski_accuracy(&model, v)?,
                Selection::MaxPositive => mil_accuracy(&model, v)?,
            }),
            _ => None,
        };
        let mean_loss = loss_sum / trained as f64;
        info!(
            "{stage}: epoch {epoch} loss {mean_loss:.4} trained {trained} skipped {skipped}{}",
            val_accuracy.map(|a| format!(" val_acc {a:.3}")).unwrap_or_default()
        );
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            trained,
            skipped,
            selection_histogram: hist,
            val_accuracy,
        });
        if let Some(acc) = val_accuracy {
            if best_epoch.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best_epoch = Some((acc, epoch, model.clone()));
            }
            // the symmetric start can sit at chance for several epochs; the
            // plateau clock only runs once accuracy has moved off it
            let start = *first_val.get_or_insert(acc);
            if cfg.patience > 0 && best_val.max(acc) > start + cfg.plateau_tol {
                if acc > best_val + cfg.plateau_tol {
                    best_val = acc;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        log.stopped_early = true;
                        info!("{stage}: validation plateau, stopping after epoch {epoch}");
                        break;
                    }
                }
            }
        }
    }
    if let Some((acc, epoch, best)) = best_epoch {
        info!("{stage}: keeping epoch {epoch} weights (validation accuracy {acc:.3})");
        log.best_epoch = Some(epoch);
        return Ok((best, log));
    }
    Ok((model, log))
}

pub(crate) fn max_positive_tile<'a>(
    model: &ScorerModel,
    s: &'a TiledSample,
) -> Result<(&'a Tile, Confidence)> {
    let mut best: Option<(&Tile, Confidence)> = None;
    for t in &s.tiles.tiles {
        let c = model.score(t)?;
        if best.is_none_or(|(_, b)| c.q_p > b.q_p) {
            best = Some((t, c));
        }
    }
    best.ok_or_else(|| Error::InvalidData(format!("sample {} has no tiles", s.id)))
}

fn klotski_accuracy(model: &ScorerModel, set: &[TiledSample]) -> Result<f64> {
    let preds = set
        .par_iter()
        .map(|s| infer_label(model, s))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<_> = preds.into_iter().zip(set).filter_map(|(p, s)| p.map(|p| (p, s.label))).collect();
    Ok(scored.iter().filter(|((l, _), y)| l == y).count() as f64 / scored.len().max(1) as f64)
}

fn mil_accuracy(model: &ScorerModel, set: &[TiledSample]) -> Result<f64> {
    let hits = set
        .par_iter()
        .map(|s| max_positive_tile(model, s).map(|(_, c)| c.predicted() == s.label))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len().max(1) as f64)
}

/// Train the background-only key-tile classifier. With `val`, the weights
/// of the best validation epoch are returned.
pub fn train_klotski(
    train: &[TiledSample],
    val: Option<&[TiledSample]>,
    cfg: &TrainConfig,
) -> Result<(ScorerModel, TrainingLog)> {
    train_key_tile(train, val, cfg, "klotski", Selection::Klotski)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub label: Label,
    pub u: Vec<f64>,
    pub tile_index: usize,
    pub confidence: Confidence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub k: usize,
    pub rows: Vec<EmbeddingRow>,
}

/// Key-tile embedding of one sample, or `None` when it has no candidate
/// tile (a positive whose every tile holds lesion).
pub fn extract_embedding(model: &ScorerModel, sample: &TiledSample) -> Result<Option<EmbeddingRow>> {
    let cands = sample.candidates(Some(sample.label));
    if cands.is_empty() {
        warn!("sample {} has no background tile, skipped", sample.id);
        return Ok(None);
    }
    let (j, confidence) = select_key_tile(model, &cands)?;
    let tile = cands[j];
    if sample.label == Label::Positive && tile.contains_lesion {
        return Err(Error::InvalidData(format!(
            "lesion tile {} of {} selected",
            tile.index, sample.id
        )));
    }
    Ok(Some(EmbeddingRow {
        sample_id: sample.id.clone(),
        label: sample.label,
        u: model.embed(tile)?,
        tile_index: tile.index,
        confidence,
    }))
}

/// Whole-sample prediction from the key tile: `(+1 if q_p > q_n, q_p)`.
pub fn infer_label(model: &ScorerModel, sample: &TiledSample) -> Result<Option<(Label, f64)>> {
    let cands = sample.candidates(Some(sample.label));
    if cands.is_empty() {
        return Ok(None);
    }
    let (_, c) = select_key_tile(model, &cands)?;
    Ok(Some((c.predicted(), c.q_p)))
}

impl EmbeddingTable {
    /// Extract embeddings for every sample; samples without a background
    /// tile are skipped.
    pub fn extract(model: &ScorerModel, samples: &[TiledSample]) -> Result<Self> {
        let rows = samples
            .par_iter()
            .map(|s| extract_embedding(model, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddingTable {
            k: model.arch.embed_dim,
            rows: rows.into_iter().flatten().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|r| r.sample_id.as_str())
    }

    pub fn count(&self, label: Label) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if r.u.len() != self.k {
                return Err(Error::dims(format!("embedding of {}", r.sample_id), self.k, r.u.len()));
            }
            if r.u.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "non-finite embedding for {}",
                    r.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(TABLE_MAGIC, TABLE_VERSION);
        w.u32(self.rows.len() as u32);
        w.u32(self.k as u32);
        for r in &self.rows {
            w.u32(r.sample_id.len() as u32);
            w.bytes(r.sample_id.as_bytes());
            w.i8(r.label.as_i8());
            w.u32(r.tile_index as u32);
            w.f64(r.confidence.q_p);
            w.f64s(&r.u);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (mut r, version) = ByteReader::open(bytes, TABLE_MAGIC, path)?;
        if version != TABLE_VERSION {
            return Err(r.err(format!("unsupported embedding table version {version}")));
        }
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let sample_id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| r.err(format!("sample id is not UTF-8: {e}")))?
                .to_string();
            let raw_label = r.i8()?;
            let label = Label::from_i64(raw_label.into())
                .ok_or_else(|| r.err(format!("label {raw_label}")))?;
            let tile_index = r.u32()? as usize;
            let q_p = r.f64()?;
            let u = r.f64s(k)?;
            rows.push(EmbeddingRow {
                sample_id,
                label,
                u,
                tile_index,
                confidence: Confidence::new(q_p, 1.0 - q_p),
            });
        }
        r.finish()?;
        let t = EmbeddingTable { k, rows };
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// `sample_id,label,tile_index,q_p,u0,...,u{K-1}`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,label,tile_index,q_p");
        for i in 0..self.k {
            out.push_str(&format!(",u{i}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                r.sample_id,
                r.label.as_i8(),
                r.tile_index,
                r.confidence.q_p
            ));
            for v in &r.u {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}
