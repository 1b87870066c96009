//! Synthetic datasets with known lesions and label-correlated background
//! artifacts.
//!
//! Positives carry one or more Gaussian blobs (the true signal, with
//! bounding boxes). Each artifact is switched on per sample with a
//! label-dependent probability and drawn only into lesion-free tiles, except
//! the global tint. Which artifacts a sample carries is recorded in the
//! manifest's `bias_truth`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bd2a::{project, DirectionBundle};
use crate::dataset::{save_png, ImageShape, Label, LesionBox, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::io::{derive_seed, splitmix64, write_atomic};
use crate::klotski::EmbeddingTable;
use crate::selector::median;
use crate::tiler::{lesion_tiles, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Bright two-pixel horizontal band through the middle rows of one
    /// background tile.
    Stripe,
    /// Small bright disc in a corner of one background tile.
    CornerDot,
    /// Additive brightness over the whole image.
    BrightnessTint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactSpec {
    pub name: String,
    pub kind: ArtifactKind,
    pub rho_p: f64,
    pub rho_n: f64,
    pub magnitude: f64,
    /// Per-sample magnitude is `magnitude · (1 + jitter · U(−1, 1))`.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    pub radius_min: u32,
    pub radius_max: u32,
    pub count_min: u32,
    pub count_max: u32,
    /// Peak added intensity at the blob center.
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// Missing keys take the desk-scale defaults; an absent `artifacts` list
/// means the single default stripe.
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Mean background intensity before noise.
    pub background: f64,
    pub noise_sigma: f64,
    pub lesion: LesionSpec,
    pub artifacts: Vec<ArtifactSpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            height: 80,
            width: 80,
            channels: 1,
            grid_rows: 4,
            grid_cols: 4,
            background: 0.3,
            noise_sigma: 0.05,
            lesion: LesionSpec {
                radius_min: 4,
                radius_max: 7,
                count_min: 1,
                count_max: 2,
                intensity: 0.35,
            },
            artifacts: vec![ArtifactSpec {
                name: "stripe".into(),
                kind: ArtifactKind::Stripe,
                rho_p: 0.9,
                rho_n: 0.1,
                magnitude: 0.35,
                jitter: 0.0,
            }],
        }
    }
}

impl GenConfig {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.grid_rows, self.grid_cols)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        self.grid().tile_shape(self.shape())?;
        let l = &self.lesion;
        if l.radius_min > l.radius_max || l.count_min > l.count_max || l.count_min == 0 {
            return bad(format!(
                "lesion ranges must be nonempty with at least one blob: radius {}..={}, count {}..={}",
                l.radius_min, l.radius_max, l.count_min, l.count_max
            ));
        }
        let side = 2 * l.radius_max as usize + 1;
        if side > self.height || side > self.width {
            return bad(format!(
                "lesion diameter {side} exceeds image size {}x{}",
                self.height, self.width
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.artifacts {
            for (what, p) in [("rho_p", a.rho_p), ("rho_n", a.rho_n)] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("artifact {}: {what} = {p} is outside [0, 1]", a.name));
                }
            }
            if !(0.0..=1.0).contains(&a.jitter) {
                return bad(format!("artifact {}: jitter {} is outside [0, 1]", a.name, a.jitter));
            }
            if !names.insert(a.name.as_str()) {
                return bad(format!("duplicate artifact name {}", a.name));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: GenConfig =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("generator config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generator config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// One rendered sample before it is written to disk.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub pixels: Vec<f64>,
    pub label: Label,
    pub lesion_boxes: Vec<LesionBox>,
    pub bias_truth: BTreeMap<String, bool>,
}

fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix64(derive_seed(seed, split.name()) ^ index as u64)
}

/// Render sample `index` of `split`. Even indices are positive.
pub fn render(cfg: &GenConfig, split: Split, index: usize) -> Result<Rendered> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, index));
    let shape = cfg.shape();
    let grid = cfg.grid();
    let tile = grid.tile_shape(shape)?;
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let label = if index % 2 == 0 { Label::Positive } else { Label::Negative };
    let mut signal = vec![0.0f64; h * w];

    let mut boxes = Vec::new();
    let mut lesion_idx = Vec::new();
    if label == Label::Positive {
        let l = &cfg.lesion;
        let mut placed = false;
        for _ in 0..100 {
            let count = rng.random_range(l.count_min..=l.count_max);
            let blobs: Vec<(u32, u32, u32)> = (0..count)
                .map(|_| {
                    let r = rng.random_range(l.radius_min..=l.radius_max);
                    let cx = rng.random_range(r..w as u32 - r);
                    let cy = rng.random_range(r..h as u32 - r);
                    (cx, cy, r)
                })
                .collect();
            let bx: Vec<LesionBox> = blobs
                .iter()
                .map(|&(cx, cy, r)| LesionBox::new(cx - r, cy - r, 2 * r + 1, 2 * r + 1))
                .collect();
            let tiles = lesion_tiles(&bx, grid, tile);
            if tiles.len() < grid.tile_count() {
                for &(cx, cy, r) in &blobs {
                    let sigma = r as f64 / 2.0;
                    for y in cy - r..=cy + r {
                        for x in cx - r..=cx + r {
                            let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                            if d2 <= (r * r) as f64 {
                                signal[y as usize * w + x as usize] += l.intensity * (-d2 / (2.0 * sigma * sigma)).exp();
                            }
                        }
                    }
                }
                boxes = bx;
                lesion_idx = tiles;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidArgument(format!(
                "cannot place lesions leaving a background tile (radius up to {}, {} blobs, grid {}x{})",
                l.radius_max, l.count_max, grid.rows, grid.cols
            )));
        }
    }
    let background: Vec<usize> = (0..grid.tile_count()).filter(|i| !lesion_idx.contains(i)).collect();

    let mut tint = 0.0;
    let mut truth = BTreeMap::new();
    for a in &cfg.artifacts {
        let rho = if label == Label::Positive { a.rho_p } else { a.rho_n };
        let on = rng.random::<f64>() < rho;
        // draw placement randomness regardless, so switching one artifact
        // does not reshuffle the others
        let mag = a.magnitude * (1.0 + a.jitter * rng.random_range(-1.0..=1.0));
        let t = background[rng.random_range(0..background.len())];
        let corner = rng.random_range(0..4u32);
        truth.insert(a.name.clone(), on);
        if !on {
            continue;
        }
        let (tx, ty, tw, th) = grid.tile_rect(t, tile);
        let (tx, ty, tw, th) = (tx as usize, ty as usize, tw as usize, th as usize);
        match a.kind {
            ArtifactKind::BrightnessTint => tint += mag,
            ArtifactKind::Stripe => {
                let thick = 2.min(th);
                let y0 = ty + (th - thick) / 2;
                for y in y0..y0 + thick {
                    for x in tx..tx + tw {
                        signal[y * w + x] += mag;
                    }
                }
            }
            ArtifactKind::CornerDot => {
                let r = (tw.min(th) / 6).max(1) as f64;
                let (cx, cy) = (
                    if corner & 1 == 0 { tx as f64 + r } else { (tx + tw) as f64 - 1.0 - r },
                    if corner & 2 == 0 { ty as f64 + r } else { (ty + th) as f64 - 1.0 - r },
                );
                for y in ty..ty + th {
                    for x in tx..tx + tw {
                        if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                            signal[y * w + x] += mag;
                        }
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut pixels = Vec::with_capacity(shape.len());
    for p in 0..h * w {
        for _ in 0..c {
            let v = cfg.background + tint + signal[p] + if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Rendered {
        pixels,
        label,
        lesion_boxes: boxes,
        bias_truth: truth,
    })
}

#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

impl GeneratedSet {
    pub fn manifest_path(out_dir: &Path, split: Split) -> PathBuf {
        out_dir.join(format!("{}.jsonl", split.name()))
    }
}

/// Write images, `train/val/test.jsonl` and `gen_config.toml` into
/// `out_dir`.
pub fn generate(cfg: &GenConfig, out_dir: &Path) -> Result<GeneratedSet> {
    cfg.validate()?;
    let shape = cfg.shape();
    let mut out = Vec::new();
    for (split, n) in [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val), (Split::Test, cfg.n_test)] {
        let entries = (0..n)
            .into_par_iter()
            .map(|i| {
                let r = render(cfg, split, i)?;
                let id = format!("{}_{i:05}", split.name());
                let path = format!("images/{id}.png");
                save_png(&out_dir.join(&path), shape, &r.pixels)?;
                Ok(ManifestEntry {
                    id,
                    path,
                    label: r.label,
                    lesion_boxes: r.lesion_boxes,
                    bias_truth: Some(r.bias_truth),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest::new(out_dir, Some(split), entries);
        m.write(&GeneratedSet::manifest_path(out_dir, split))?;
        out.push(m);
    }
    write_atomic(&out_dir.join("gen_config.toml"), cfg.to_toml().as_bytes())?;
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(GeneratedSet { train, val, test })
}

/// Ground-truth flags for `artifact` from a manifest's `bias_truth`.
pub fn truth_column(manifest: &Manifest, artifact: &str) -> Result<HashMap<String, bool>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let flag = e
                .bias_truth
                .as_ref()
                .and_then(|t| t.get(artifact))
                .ok_or_else(|| Error::InvalidData(format!("sample {} has no bias_truth for {artifact}", e.id)))?;
            Ok((e.id.clone(), *flag))
        })
        .collect()
}

/// AUC of `|φ₁·u − median|` as a detector of the artifact flag.
pub fn artifact_separation_auc(
    table: &EmbeddingTable,
    bundle: &DirectionBundle,
    truth: &HashMap<String, bool>,
) -> Result<f64> {
    if bundle.k() == 0 {
        return Err(Error::InvalidArgument("empty direction bundle".into()));
    }
    let v = project(table, &bundle.truncated(1))?;
    let col: Vec<f64> = v.iter().map(|r| r[0]).collect();
    let m = median(&col);
    let mut scores = Vec::with_capacity(col.len());
    let mut flags = Vec::with_capacity(col.len());
    for (row, x) in table.rows.iter().zip(&col) {
        let f = truth
            .get(&row.sample_id)
            .ok_or_else(|| Error::InvalidData(format!("no artifact truth for {}", row.sample_id)))?;
        scores.push((x - m).abs());
        flags.push(*f);
    }
    roc_auc(&scores, &flags)
        .ok_or_else(|| Error::InvalidData("artifact truth is single-class; AUC undefined".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_manifest;

    fn small() -> GenConfig {
        GenConfig {
            n_train: 40,
            n_val: 4,
            n_test: 6,
            ..GenConfig::default()
        }
    }

    #[test]
    fn config_toml_round_trips() {
        let c = small();
        assert_eq!(GenConfig::from_toml(&c.to_toml()).unwrap(), c);
        let mut bad = small();
        bad.artifacts[0].rho_p = 1.5;
        assert!(bad.validate().is_err());
        bad = small();
        bad.grid_rows = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn degenerate_probabilities() {
        let mut c = small();
        c.artifacts[0].rho_p = 1.0;
        c.artifacts[0].rho_n = 0.0;
        for i in 0..40 {
            let r = render(&c, Split::Train, i).unwrap();
            assert_eq!(r.bias_truth["stripe"], r.label == Label::Positive);
        }
        c.artifacts[0].rho_p = 0.0;
        assert!((0..40).all(|i| !render(&c, Split::Train, i).unwrap().bias_truth["stripe"]));
    }

    #[test]
    fn carrier_fraction_tracks_rho() {
        let c = GenConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let pos: Vec<bool> = (0..2000)
            .step_by(2)
            .map(|i| render(&c, Split::Test, i).unwrap().bias_truth["stripe"])
            .collect();
        let frac = pos.iter().filter(|b| **b).count() as f64 / pos.len() as f64;
        assert!((frac - 0.9).abs() <= 0.03, "{frac}");
    }

    #[test]
    fn artifacts_stay_out_of_lesion_boxes() {
        let mut c = small();
        c.noise_sigma = 0.0;
        c.artifacts.push(ArtifactSpec {
            name: "dot".into(),
            kind: ArtifactKind::CornerDot,
            rho_p: 1.0,
            rho_n: 1.0,
            magnitude: 0.3,
            jitter: 0.5,
        });
        c.artifacts[0].rho_p = 1.0;
        let mut no_lesion = c.clone();
        no_lesion.lesion.intensity = 0.0;
        for i in (0..40).step_by(2) {
            let r = render(&no_lesion, Split::Train, i).unwrap();
            // without lesion intensity any deviation from background is artifact
            for b in &r.lesion_boxes {
                for y in b.y..b.y + b.h {
                    for x in b.x..b.x + b.w {
                        assert_eq!(r.pixels[(y * 80 + x) as usize], c.background);
                    }
                }
            }
            let lit = r.pixels.iter().filter(|p| **p > c.background).count();
            assert!(lit > 0);
        }
    }

    #[test]
    fn labels_ignore_artifacts() {
        let c = small();
        let mut other = small();
        other.artifacts[0].rho_p = 0.0;
        other.artifacts[0].rho_n = 1.0;
        for i in 0..20 {
            let a = render(&c, Split::Val, i).unwrap();
            let b = render(&other, Split::Val, i).unwrap();
            assert_eq!(a.label, b.label);
            assert_eq!(a.lesion_boxes, b.lesion_boxes);
        }
    }

    #[test]
    fn oversized_lesions_are_rejected() {
        let mut c = small();
        c.lesion.radius_min = 39;
        c.lesion.radius_max = 45;
        assert!(c.validate().is_err());
        c.lesion.radius_max = 39;
        c.lesion.count_min = 4;
        c.lesion.count_max = 4;
        // four 79px blobs always cover the whole grid
        assert!(render(&c, Split::Train, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = small();
        let sa = generate(&c, a.path()).unwrap();
        generate(&c, b.path()).unwrap();
        for f in ["train.jsonl", "val.jsonl", "test.jsonl", "gen_config.toml", "images/test_00003.png"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let m = load_manifest(&a.path().join("train.jsonl")).unwrap();
        assert_eq!(m.len(), 40);
        assert_eq!(m.entries, sa.train.entries);
        assert!(m.entries.iter().all(|e| e.bias_truth.is_some()));
    }
}
