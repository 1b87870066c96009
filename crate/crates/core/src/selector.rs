//! Biased / rest splits from attribute directions, plus the PCA and color
//! baselines.
//!
//! Along each direction the projections are centered (median by default)
//! and the top `⌈θ·N⌉` samples by absolute centered value are marked as
//! carrying the bias feature. Several directions contribute the union of
//! their marks.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use faer::Side;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bd2a::{fix_sign, label_scatter, project, DirectionBundle, Polarity};
use crate::dataset::{ImageShape, Manifest};
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::klotski::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterMode {
    #[default]
    Median,
    Mean,
    None,
}

impl FromStr for CenterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(CenterMode::Median),
            "mean" => Ok(CenterMode::Mean),
            "none" => Ok(CenterMode::None),
            _ => Err(Error::InvalidArgument(format!(
                "center mode must be median, mean or none, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for CenterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CenterMode::Median => "median",
            CenterMode::Mean => "mean",
            CenterMode::None => "none",
        })
    }
}

impl CenterMode {
    pub fn center(self, values: &[f64]) -> f64 {
        match self {
            CenterMode::None => 0.0,
            CenterMode::Mean => values.iter().sum::<f64>() / values.len().max(1) as f64,
            CenterMode::Median => median(values),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedSplit {
    pub theta: f64,
    pub k_used: usize,
    /// `positive`, `negative`, `both`, or the name of a baseline.
    pub polarity: String,
    pub biased_ids: BTreeSet<String>,
    pub rest_ids: BTreeSet<String>,
}

impl BiasedSplit {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("split serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let s: BiasedSplit = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if let Some(id) = s.biased_ids.intersection(&s.rest_ids).next() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("id {id} is both biased and rest"),
            });
        }
        Ok(s)
    }
}

/// `⌈θ·N⌉`, with products within 1e-9 of an integer snapped to it so that
/// e.g. θ = 0.12, N = 100 yields 12.
pub fn selection_size(theta: f64, n: usize) -> usize {
    let x = theta * n as f64;
    let r = x.round();
    let c = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (c as usize).clamp(usize::from(n > 0), n)
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("theta must be in (0, 1), got {theta}")))
    }
}

/// Indices of the top `⌈θ·N⌉` values by absolute centered value; ties by
/// id ascending.
pub fn top_theta(ids: &[&str], values: &[f64], theta: f64, center: CenterMode) -> Result<Vec<usize>> {
    check_theta(theta)?;
    if ids.len() != values.len() {
        return Err(Error::dims("projection column", ids.len(), values.len()));
    }
    let c = center.center(values);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        (values[b] - c)
            .abs()
            .total_cmp(&(values[a] - c).abs())
            .then_with(|| ids[a].cmp(ids[b]))
    });
    order.truncate(selection_size(theta, values.len()));
    Ok(order)
}

/// Union of per-column top-θ selections over `columns` (each column one
/// direction's values, aligned with `ids`).
pub fn select_from_columns(
    ids: &[&str],
    columns: &[Vec<f64>],
    theta: f64,
    center: CenterMode,
    polarity: &str,
) -> Result<BiasedSplit> {
    check_theta(theta)?;
    let mut biased = BTreeSet::new();
    for col in columns {
        for i in top_theta(ids, col, theta, center)? {
            biased.insert(ids[i].to_string());
        }
    }
    let rest = ids
        .iter()
        .filter(|id| !biased.contains(**id))
        .map(|s| s.to_string())
        .collect();
    Ok(BiasedSplit {
        theta,
        k_used: columns.len(),
        polarity: polarity.to_string(),
        biased_ids: biased,
        rest_ids: rest,
    })
}

/// Projection columns of the first `k_used` directions of `bundle`.
pub fn direction_columns(table: &EmbeddingTable, bundle: &DirectionBundle, k_used: usize) -> Result<Vec<Vec<f64>>> {
    if k_used == 0 || k_used > bundle.k() {
        return Err(Error::InvalidArgument(format!(
            "k_used {k_used} must be in 1..={} (directions in bundle)",
            bundle.k()
        )));
    }
    let v = project(table, &bundle.truncated(k_used))?;
    Ok((0..k_used).map(|i| v.iter().map(|r| r[i]).collect()).collect())
}

/// Biased split from the first `k_used` directions of every bundle given.
/// With bundles of both polarities the split is labeled `both`.
pub fn select_biased(
    table: &EmbeddingTable,
    bundles: &[&DirectionBundle],
    theta: f64,
    k_used: usize,
    center: CenterMode,
) -> Result<BiasedSplit> {
    check_theta(theta)?;
    let mut columns = Vec::new();
    for b in bundles {
        columns.extend(direction_columns(table, b, k_used)?);
    }
    let polarity = match bundles {
        [] => return Err(Error::InvalidArgument("no direction bundle given".into())),
        [one] => one.polarity.name().to_string(),
        many if many.iter().all(|b| b.polarity == many[0].polarity) => many[0].polarity.name().to_string(),
        _ => "both".to_string(),
    };
    let ids: Vec<&str> = table.ids().collect();
    let mut split = select_from_columns(&ids, &columns, theta, center, &polarity)?;
    split.k_used = k_used;
    Ok(split)
}

/// One split per direction (`k_used = 1` each), in direction order.
pub fn select_per_direction(
    table: &EmbeddingTable,
    bundle: &DirectionBundle,
    theta: f64,
    center: CenterMode,
) -> Result<Vec<BiasedSplit>> {
    if bundle.k() == 0 {
        return Ok(Vec::new());
    }
    let ids: Vec<&str> = table.ids().collect();
    direction_columns(table, bundle, bundle.k())?
        .into_iter()
        .map(|col| select_from_columns(&ids, &[col], theta, center, bundle.polarity.name()))
        .collect()
}

/// `manifest` without the biased ids, order preserved.
pub fn debias_manifest(manifest: &Manifest, split: &BiasedSplit) -> Result<Manifest> {
    let known: BTreeSet<&str> = manifest.ids().collect();
    if let Some(id) = split.biased_ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(Error::InvalidData(format!("biased id {id} is not in the manifest")));
    }
    Ok(Manifest::new(
        manifest.root.clone(),
        manifest.split,
        manifest
            .entries
            .iter()
            .filter(|e| !split.biased_ids.contains(&e.id))
            .cloned()
            .collect(),
    ))
}

/// Top-`k` principal components of the `polarity` label's embeddings,
/// unit Euclidean norm, with their variances as `lambdas`.
pub fn pca_directions(table: &EmbeddingTable, polarity: Polarity, k: usize) -> Result<DirectionBundle> {
    if k == 0 || k > table.k {
        return Err(Error::InvalidArgument(format!(
            "number of components {k} must be in 1..={} (embedding dimension)",
            table.k
        )));
    }
    let (_, s, _) = label_scatter(table, polarity.self_label())?;
    let eig = s
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::EigenSolve(format!("PCA: {e:?}")))?;
    let vals = eig.S().column_vector();
    let vecs = eig.U();
    let dim = table.k;
    let mut phi = Vec::with_capacity(k);
    let mut lambdas = Vec::with_capacity(k);
    for idx in (dim - k..dim).rev() {
        let mut v: Vec<f64> = (0..dim).map(|i| vecs[(i, idx)]).collect();
        fix_sign(&mut v);
        phi.push(v);
        lambdas.push(vals[idx]);
    }
    Ok(DirectionBundle {
        polarity,
        phi,
        lambdas,
        ridge: 0.0,
    })
}

/// Raw embedding axes as directions: the first `k` unit vectors, each
/// coordinate's variance over the whole table recorded as its lambda.
/// Passing `table.k` gives every hidden unit, inactive ones included.
pub fn coordinate_directions(table: &EmbeddingTable, polarity: Polarity, k: usize) -> Result<DirectionBundle> {
    if k == 0 || k > table.k {
        return Err(Error::InvalidArgument(format!(
            "number of coordinates {k} must be in 1..={} (embedding dimension)",
            table.k
        )));
    }
    table.validate()?;
    let n = table.len().max(1) as f64;
    let var = |j: usize| {
        let m = table.rows.iter().map(|r| r.u[j]).sum::<f64>() / n;
        table.rows.iter().map(|r| (r.u[j] - m).powi(2)).sum::<f64>() / n
    };
    Ok(DirectionBundle {
        polarity,
        phi: (0..k)
            .map(|j| (0..table.k).map(|i| f64::from(u8::from(i == j))).collect())
            .collect(),
        lambdas: (0..k).map(var).collect(),
        ridge: 0.0,
    })
}

/// Per-sample mean intensity of every channel, in manifest order.
pub fn color_attributes(manifest: &Manifest, shape: ImageShape) -> Result<Vec<(String, Vec<f64>)>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let s = crate::dataset::load_sample(manifest, e, shape)?;
            Ok((s.id.clone(), s.channel_means()))
        })
        .collect()
}

/// Color baseline split: each channel mean is one direction.
pub fn color_split(attrs: &[(String, Vec<f64>)], theta: f64, center: CenterMode) -> Result<BiasedSplit> {
    let ids: Vec<&str> = attrs.iter().map(|(id, _)| id.as_str()).collect();
    let channels = attrs.first().map_or(0, |(_, v)| v.len());
    let columns: Vec<Vec<f64>> = (0..channels)
        .map(|c| attrs.iter().map(|(_, v)| v[c]).collect())
        .collect();
    select_from_columns(&ids, &columns, theta, center, "color")
}
