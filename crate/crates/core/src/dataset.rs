//! Samples, labels, lesion annotations and the line-delimited JSON manifest.
//!
//! A manifest file holds one JSON object per line:
//!
//! ```text
//! {"id":"s1","path":"img/s1.png","label":1,"lesion_boxes":[[4,8,10,10]],"bias_truth":{"stripe":true}}
//! ```
//!
//! Image paths are resolved relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::ImageEncoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Binary sample label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn as_i8(self) -> i8 {
        match self {
            Label::Negative => -1,
            Label::Positive => 1,
        }
    }

    pub fn from_i64(v: i64) -> Option<Label> {
        match v {
            -1 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.as_i8())
    }
}

/// Axis-aligned rectangle in pixel coordinates, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct LesionBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for LesionBox {
    fn from(v: [u32; 4]) -> Self {
        LesionBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<LesionBox> for [u32; 4] {
    fn from(b: LesionBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl LesionBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        LesionBox { x, y, w, h }
    }

    /// Clip to a `width` x `height` image. Boxes entirely outside collapse to
    /// zero area.
    pub fn clipped(self, width: u32, height: u32) -> LesionBox {
        let x0 = self.x.min(width);
        let y0 = self.y.min(height);
        let x1 = self.x.saturating_add(self.w).min(width);
        let y1 = self.y.saturating_add(self.h).min(height);
        LesionBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// True when the intersection with `[x, x+w) x [y, y+h)` has positive area.
    pub fn overlaps(&self, x: u32, y: u32, w: u32, h: u32) -> bool {
        let ox = (self.x + self.w).min(x + w) as i64 - self.x.max(x) as i64;
        let oy = (self.y + self.h).min(y + h) as i64 - self.y.max(y) as i64;
        ox > 0 && oy > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageShape {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A loaded image with its label and annotations. Pixels are stored
/// row-major with interleaved channels (`(y * W + x) * C + c`), in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub shape: ImageShape,
    pub pixels: Vec<f64>,
    pub label: Label,
    pub lesion_boxes: Vec<LesionBox>,
    pub bias_truth: Option<BTreeMap<String, bool>>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        shape: ImageShape,
        pixels: Vec<f64>,
        label: Label,
        lesion_boxes: Vec<LesionBox>,
    ) -> Result<Sample> {
        let id = id.into();
        if pixels.len() != shape.len() {
            return Err(Error::dims(
                format!("pixels of sample {id}"),
                shape.len(),
                pixels.len(),
            ));
        }
        if pixels.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidData(format!(
                "sample {id} has pixels outside [0, 1]"
            )));
        }
        if label == Label::Negative && !lesion_boxes.is_empty() {
            return Err(Error::InvalidData(format!(
                "negative sample {id} carries lesion boxes"
            )));
        }
        let (w, h) = (shape.width as u32, shape.height as u32);
        let lesion_boxes = lesion_boxes.into_iter().map(|b| b.clipped(w, h)).collect();
        Ok(Sample {
            id,
            shape,
            pixels,
            label,
            lesion_boxes,
            bias_truth: None,
        })
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let c = self.shape.channels;
        let mut sums = vec![0.0; c];
        for px in self.pixels.chunks_exact(c) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = (self.shape.height * self.shape.width) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub lesion_boxes: Vec<LesionBox>,
    pub bias_truth: Option<BTreeMap<String, bool>>,
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_i64(v).ok_or_else(|| serde::de::Error::custom(format!("label {v}")))
    }
}

/// On-disk line layout. `label` is read as a plain integer so an
/// out-of-domain value is reported as such rather than as a JSON error.
#[derive(Serialize, Deserialize)]
struct RawEntry {
    id: String,
    path: String,
    label: i64,
    #[serde(default)]
    lesion_boxes: Vec<LesionBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_truth: Option<BTreeMap<String, bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn from_stem(stem: &str) -> Option<Split> {
        match stem {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub split: Option<Split>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, split: Option<Split>, entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            root: root.into(),
            split,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Serialize as line-delimited JSON.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let raw = RawEntry {
                id: e.id.clone(),
                path: e.path.clone(),
                label: e.label.as_i8() as i64,
                lesion_boxes: e.lesion_boxes.clone(),
                bias_truth: e.bias_truth.clone(),
            };
            out.push_str(&serde_json::to_string(&raw).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Load every entry's image. Order follows the manifest.
    pub fn load_samples(&self, shape: ImageShape) -> Result<Vec<Sample>> {
        self.entries
            .par_iter()
            .map(|e| load_sample(self, e, shape))
            .collect()
    }
}

/// Parse a line-delimited JSON manifest. Blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let split = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(Split::from_stem);
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let label = Label::from_i64(raw.label).ok_or(Error::LabelDomain {
            path: path.to_path_buf(),
            line: line_no,
            label: raw.label,
        })?;
        if label == Label::Negative && !raw.lesion_boxes.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("negative sample {:?} carries lesion boxes", raw.id),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: raw.id,
            });
        }
        entries.push(ManifestEntry {
            id: raw.id,
            path: raw.path,
            label,
            lesion_boxes: raw.lesion_boxes,
            bias_truth: raw.bias_truth,
        });
    }
    Ok(Manifest {
        root,
        split,
        entries,
    })
}

/// Decode one entry's image, normalize to `[0, 1]` and clip its boxes.
pub fn load_sample(manifest: &Manifest, entry: &ManifestEntry, shape: ImageShape) -> Result<Sample> {
    let path = manifest.image_path(entry);
    let img = image::open(&path).map_err(|source| Error::Image {
        path: path.clone(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != (shape.height, shape.width) {
        return Err(Error::dims(
            format!("image {}", path.display()),
            format!("{}x{}", shape.height, shape.width),
            format!("{h}x{w}"),
        ));
    }
    let raw: Vec<u8> = match shape.channels {
        1 => img.into_luma8().into_raw(),
        3 => img.into_rgb8().into_raw(),
        c => {
            return Err(Error::InvalidArgument(format!(
                "unsupported channel count {c} (expected 1 or 3)"
            )))
        }
    };
    let pixels = raw.into_iter().map(|v| f64::from(v) / 255.0).collect();
    let mut sample = Sample::new(
        entry.id.clone(),
        shape,
        pixels,
        entry.label,
        entry.lesion_boxes.clone(),
    )?;
    sample.bias_truth = entry.bias_truth.clone();
    Ok(sample)
}

/// Shape of the manifest's first image: grayscale sources load with one
/// channel, everything else with three.
pub fn probe_shape(manifest: &Manifest) -> Result<ImageShape> {
    let entry = manifest
        .entries
        .first()
        .ok_or_else(|| Error::InvalidData("empty manifest".into()))?;
    let path = manifest.image_path(entry);
    let img = image::open(&path).map_err(|source| Error::Image {
        path: path.clone(),
        source,
    })?;
    let channels = match img.color() {
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16 => 1,
        _ => 3,
    };
    Ok(ImageShape::new(img.height() as usize, img.width() as usize, channels))
}

/// Save `[0, 1]` pixels as an 8-bit PNG.
pub fn save_png(path: &Path, shape: ImageShape, pixels: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match shape.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::InvalidArgument(format!(
                "unsupported channel count {c}"
            )))
        }
    };
    let mut encoded = Vec::new();
    image::codecs::png::PngEncoder::new(&mut encoded)
        .write_image(&bytes, shape.width as u32, shape.height as u32, color)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_atomic(path, &encoded)
}
