//! Per-object patch extraction around center annotations.
//!
//! Each center annotation becomes one rectangular crop whose size is the
//! class's nominal size shrunk by a random factor `1 - u`, `u ~ U[0, 0.1]`.
//! Crops that would cross the image border are shifted inward; their size
//! never changes.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation_io::{
    round_half_up, CenterAnnotation, ClassLabel, DatasetManifest, SourceImageRecord,
};
use crate::emitters::encode_png;
use crate::geometry::Rect;
use crate::seed;

/// Upper bound of the shrink jitter: up to 10% of the object is dropped.
pub const MAX_JITTER: f64 = 0.1;
pub const MIN_NOMINAL: u32 = 4;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("nominal {nominal_w}x{nominal_h} scaled to {w}x{h} does not fit a {image_w}x{image_h} image")]
    NominalTooLarge {
        nominal_w: u32,
        nominal_h: u32,
        w: u32,
        h: u32,
        image_w: u32,
        image_h: u32,
    },
    #[error("center ({x}, {y}) outside {width}x{height} image")]
    CenterOutside {
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },
    #[error("jitter {0} outside [0, 0.1]")]
    InvalidJitter(f64),
    #[error("size table: {0}")]
    SizeTable(String),
    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("image {image_id:?} decoded as {actual_w}x{actual_h}, manifest says {expected_w}x{expected_h}")]
    DimensionMismatch {
        image_id: String,
        expected_w: u32,
        expected_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("pool cache at {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Nominal ("average biological size") crop dimensions per class, in pixels.
///
/// The JSON form is `{"RBC": [w, h], ...}` with all six classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<ClassLabel, [u32; 2]>",
    into = "BTreeMap<ClassLabel, [u32; 2]>"
)]
pub struct SizeTable {
    entries: BTreeMap<ClassLabel, (u32, u32)>,
}

impl SizeTable {
    pub fn new(entries: BTreeMap<ClassLabel, (u32, u32)>) -> Result<Self, PatchError> {
        for class in ClassLabel::ALL {
            match entries.get(&class) {
                None => return Err(PatchError::SizeTable(format!("missing class {class}"))),
                Some(&(w, h)) if w < MIN_NOMINAL || h < MIN_NOMINAL => {
                    return Err(PatchError::SizeTable(format!(
                        "{class} size {w}x{h} below {MIN_NOMINAL} px"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(SizeTable { entries })
    }

    /// Square nominal sizes for every class.
    pub fn uniform(side: u32) -> Result<Self, PatchError> {
        Self::new(
            ClassLabel::ALL
                .into_iter()
                .map(|c| (c, (side, side)))
                .collect(),
        )
    }

    /// Placeholder sizes for a roughly 40x brightfield setup. These are not
    /// measured values; calibrate them to the optics that produced the FOVs.
    pub fn example() -> Self {
        Self::new(BTreeMap::from([
            (ClassLabel::Bacteria, (16, 16)),
            (ClassLabel::Crystal, (48, 48)),
            (ClassLabel::Rbc, (40, 40)),
            (ClassLabel::Wbc, (56, 56)),
            (ClassLabel::Yeast, (32, 32)),
            (ClassLabel::Artifact, (40, 40)),
        ]))
        .expect("example table is complete")
    }

    pub fn get(&self, class: ClassLabel) -> (u32, u32) {
        self.entries[&class]
    }

    pub fn from_json(text: &str) -> Result<Self, PatchError> {
        serde_json::from_str(text).map_err(|e| PatchError::SizeTable(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("size table serialization is infallible")
    }
}

impl TryFrom<BTreeMap<ClassLabel, [u32; 2]>> for SizeTable {
    type Error = PatchError;

    fn try_from(map: BTreeMap<ClassLabel, [u32; 2]>) -> Result<Self, Self::Error> {
        Self::new(map.into_iter().map(|(c, [w, h])| (c, (w, h))).collect())
    }
}

impl From<SizeTable> for BTreeMap<ClassLabel, [u32; 2]> {
    fn from(t: SizeTable) -> Self {
        t.entries
            .into_iter()
            .map(|(c, (w, h))| (c, [w, h]))
            .collect()
    }
}

/// An extracted object crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: RgbImage,
    pub class: ClassLabel,
    pub source_image_id: String,
    pub source_annotation_index: usize,
    pub crop: Rect,
    pub jitter_u: f64,
}

/// Crop rectangle for a center annotation.
///
/// Size is `round_half_up(nominal * (1 - u))`; the rectangle is centered on
/// the annotation (top-left `center - size / 2`) and then translated by the
/// smallest offset that puts it inside the image.
pub fn jittered_crop_rect(
    center: (i64, i64),
    nominal: (u32, u32),
    u: f64,
    image_dims: (u32, u32),
) -> Result<Rect, PatchError> {
    if !(0.0..=MAX_JITTER).contains(&u) {
        return Err(PatchError::InvalidJitter(u));
    }
    let (cx, cy) = center;
    let (width, height) = image_dims;
    if cx < 0 || cy < 0 || cx >= i64::from(width) || cy >= i64::from(height) {
        return Err(PatchError::CenterOutside {
            x: cx,
            y: cy,
            width,
            height,
        });
    }
    let w = round_half_up(f64::from(nominal.0) * (1.0 - u)) as u32;
    let h = round_half_up(f64::from(nominal.1) * (1.0 - u)) as u32;
    if w == 0 || h == 0 || w > width || h > height {
        return Err(PatchError::NominalTooLarge {
            nominal_w: nominal.0,
            nominal_h: nominal.1,
            w,
            h,
            image_w: width,
            image_h: height,
        });
    }
    let place = |c: i64, size: u32, limit: u32| -> u32 {
        let start = c - i64::from(size / 2);
        start.clamp(0, i64::from(limit - size)) as u32
    };
    Ok(Rect::new(place(cx, w, width), place(cy, h, height), w, h))
}

/// Cut one patch. Draws `u` from `rng`, then copies the crop bit-exactly.
pub fn extract_patch<R: Rng + ?Sized>(
    image: &RgbImage,
    annotation_index: usize,
    annotation: &CenterAnnotation,
    size_table: &SizeTable,
    rng: &mut R,
) -> Result<Patch, PatchError> {
    let u = rng.random_range(0.0..=MAX_JITTER);
    let crop = jittered_crop_rect(
        (annotation.x, annotation.y),
        size_table.get(annotation.class),
        u,
        image.dimensions(),
    )?;
    let pixels = image::imageops::crop_imm(image, crop.x, crop.y, crop.w, crop.h).to_image();
    Ok(Patch {
        pixels,
        class: annotation.class,
        source_image_id: annotation.image_id.clone(),
        source_annotation_index: annotation_index,
        crop,
        jitter_u: u,
    })
}

/// Loads decoded source images for pool construction.
pub trait ImageSource: Sync {
    fn load(&self, record: &SourceImageRecord) -> Result<RgbImage, PatchError>;
}

/// Resolves record paths relative to a root directory.
#[derive(Debug, Clone)]
pub struct DirImageSource {
    pub root: PathBuf,
}

impl DirImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirImageSource { root: root.into() }
    }
}

impl ImageSource for DirImageSource {
    fn load(&self, record: &SourceImageRecord) -> Result<RgbImage, PatchError> {
        let path = self.root.join(&record.path);
        image::open(&path)
            .map(|img| img.to_rgb8())
            .map_err(|e| PatchError::Decode {
                path,
                message: e.to_string(),
            })
    }
}

/// In-memory images keyed by image id.
impl ImageSource for BTreeMap<String, RgbImage> {
    fn load(&self, record: &SourceImageRecord) -> Result<RgbImage, PatchError> {
        self.get(&record.image_id)
            .cloned()
            .ok_or_else(|| PatchError::Decode {
                path: PathBuf::from(&record.path),
                message: format!("no in-memory image for {:?}", record.image_id),
            })
    }
}

/// Per-class patch lists. Every class key is always present.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPool {
    by_class: BTreeMap<ClassLabel, Vec<Patch>>,
}

impl Default for PatchPool {
    fn default() -> Self {
        PatchPool {
            by_class: ClassLabel::ALL
                .into_iter()
                .map(|c| (c, Vec::new()))
                .collect(),
        }
    }
}

impl PatchPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, patch: Patch) {
        self.by_class
            .get_mut(&patch.class)
            .expect("all classes present")
            .push(patch);
    }

    pub fn class(&self, class: ClassLabel) -> &[Patch] {
        &self.by_class[&class]
    }

    pub fn get(&self, class: ClassLabel, index: usize) -> Option<&Patch> {
        self.by_class[&class].get(index)
    }

    pub fn len(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> BTreeMap<ClassLabel, usize> {
        self.by_class.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Patch> {
        self.by_class.values().flatten()
    }
}

#[derive(Debug, Serialize)]
pub struct ExtractionFailure {
    pub image_id: String,
    /// `None` when the whole image was skipped.
    pub annotation_index: Option<usize>,
    pub message: String,
}

#[derive(Debug)]
pub struct PoolBuild {
    pub pool: PatchPool,
    pub failures: Vec<ExtractionFailure>,
}

/// Extract one patch per center annotation (artifacts included).
///
/// Annotation `i` draws its jitter from substream `(seed, i)`, so the pool
/// does not depend on how images are scheduled across threads. Decode
/// failures skip the image and are collected in [`PoolBuild::failures`].
pub fn build_patch_pool<S: ImageSource>(
    manifest: &DatasetManifest,
    size_table: &SizeTable,
    seed: u64,
    source: &S,
) -> PoolBuild {
    let mut by_image: BTreeMap<&str, Vec<(usize, &CenterAnnotation)>> = BTreeMap::new();
    for (i, a) in manifest.center_annotations.iter().enumerate() {
        by_image
            .entry(a.image_id.as_str())
            .or_default()
            .push((i, a));
    }
    let jobs: Vec<(&SourceImageRecord, Vec<(usize, &CenterAnnotation)>)> = manifest
        .records
        .iter()
        .filter_map(|r| by_image.remove(r.image_id.as_str()).map(|anns| (r, anns)))
        .collect();

    type Outcome = (usize, Result<Patch, ExtractionFailure>);
    let per_image: Vec<Result<Vec<Outcome>, ExtractionFailure>> = jobs
        .par_iter()
        .map(|(record, anns)| {
            let image = source.load(record).map_err(|e| ExtractionFailure {
                image_id: record.image_id.clone(),
                annotation_index: None,
                message: e.to_string(),
            })?;
            if image.dimensions() != (record.width, record.height) {
                let e = PatchError::DimensionMismatch {
                    image_id: record.image_id.clone(),
                    expected_w: record.width,
                    expected_h: record.height,
                    actual_w: image.width(),
                    actual_h: image.height(),
                };
                return Err(ExtractionFailure {
                    image_id: record.image_id.clone(),
                    annotation_index: None,
                    message: e.to_string(),
                });
            }
            Ok(anns
                .iter()
                .map(|&(i, a)| {
                    let mut rng = seed::substream(seed, i as u64);
                    let outcome = extract_patch(&image, i, a, size_table, &mut rng).map_err(|e| {
                        ExtractionFailure {
                            image_id: a.image_id.clone(),
                            annotation_index: Some(i),
                            message: e.to_string(),
                        }
                    });
                    (i, outcome)
                })
                .collect())
        })
        .collect();

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for r in per_image {
        match r {
            Ok(v) => outcomes.extend(v),
            Err(f) => failures.push(f),
        }
    }
    outcomes.sort_by_key(|(i, _)| *i);

    let mut pool = PatchPool::new();
    for (_, outcome) in outcomes {
        match outcome {
            Ok(p) => pool.push(p),
            Err(f) => failures.push(f),
        }
    }
    PoolBuild { pool, failures }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    file: String,
    class: ClassLabel,
    source_image_id: String,
    source_annotation_index: usize,
    crop: Rect,
    jitter_u: f64,
}

pub const POOL_INDEX_FILE: &str = "index.json";

fn cache_file_name(p: &Patch) -> String {
    let id: String = p
        .source_image_id
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    format!(
        "{}/{}_{}.png",
        p.class.name(),
        id,
        p.source_annotation_index
    )
}

/// Write every patch as `<CLASS>/<image_id>_<annotation_index>.png` plus an
/// `index.json` carrying the metadata in pool order.
pub fn save_pool_cache(pool: &PatchPool, dir: &Path) -> Result<(), PatchError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PatchError::Io { path, source }
    };
    for class in ClassLabel::ALL {
        let d = dir.join(class.name());
        fs::create_dir_all(&d).map_err(io(&d))?;
    }
    let mut index = Vec::with_capacity(pool.len());
    for p in pool.iter() {
        let file = cache_file_name(p);
        let path = dir.join(&file);
        fs::write(&path, encode_png(&p.pixels)).map_err(io(&path))?;
        index.push(CacheEntry {
            file,
            class: p.class,
            source_image_id: p.source_image_id.clone(),
            source_annotation_index: p.source_annotation_index,
            crop: p.crop,
            jitter_u: p.jitter_u,
        });
    }
    let index_path = dir.join(POOL_INDEX_FILE);
    let f = fs::File::create(&index_path).map_err(io(&index_path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &index).map_err(|e| PatchError::Cache {
        path: index_path.clone(),
        message: e.to_string(),
    })?;
    Ok(())
}

pub fn load_pool_cache(dir: &Path) -> Result<PatchPool, PatchError> {
    let index_path = dir.join(POOL_INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|source| PatchError::Io {
        path: index_path.clone(),
        source,
    })?;
    let index: Vec<CacheEntry> = serde_json::from_str(&text).map_err(|e| PatchError::Cache {
        path: index_path.clone(),
        message: e.to_string(),
    })?;
    let mut pool = PatchPool::new();
    for entry in index {
        let path = dir.join(&entry.file);
        let pixels = image::open(&path)
            .map_err(|e| PatchError::Decode {
                path: path.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        if pixels.dimensions() != (entry.crop.w, entry.crop.h) {
            return Err(PatchError::Cache {
                path,
                message: "patch size differs from recorded crop".into(),
            });
        }
        pool.push(Patch {
            pixels,
            class: entry.class,
            source_image_id: entry.source_image_id,
            source_annotation_index: entry.source_annotation_index,
            crop: entry.crop,
            jitter_u: entry.jitter_u,
        });
    }
    Ok(pool)
}
