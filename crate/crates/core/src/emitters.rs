//! On-disk dataset formats and real/synthetic mixing.
//!
//! A dataset directory holds `images/`, `labels/` and a `manifest.json`
//! listing every image with its label artifact, provenance and (for
//! synthetic images) the plan seed it was generated from. Everything written
//! here is byte-stable: fixed PNG encoder settings, exact decimal rounding
//! for YOLO coordinates, and struct-ordered JSON keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation_io::{round_half_up, ClassLabel, DatasetManifest};
use crate::compositor::{BoundingBox, MultiLabel, SyntheticSample};
use crate::geometry::Rect;
use crate::patch_extraction::ImageSource;
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const MULTILABEL_FILE: &str = "multilabel.csv";
pub const COCO_FILE: &str = "annotations.json";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("class order: {0}")]
    ClassOrder(String),
    #[error("class {0} is not in the class order")]
    UnknownClass(ClassLabel),
    #[error("datasets differ in {0}; mixing needs identical format and class order")]
    Mismatch(&'static str),
    #[error(
        "real fraction {requested} needs {needed} real images but only {available} are available \
         (max achievable fraction {max_fraction:.6})"
    )]
    InsufficientReal {
        requested: f64,
        needed: u64,
        available: usize,
        max_fraction: f64,
    },
    #[error("real fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("failed to load real image {image_id:?}: {message}")]
    RealImage { image_id: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmitError + '_ {
    move |source| EmitError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    YoloTxt,
    CocoJson,
    MultilabelCsv,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "yolo_txt" | "yolo" => Ok(DatasetFormat::YoloTxt),
            "coco_json" | "coco" => Ok(DatasetFormat::CocoJson),
            "multilabel_csv" | "multilabel" => Ok(DatasetFormat::MultilabelCsv),
            other => Err(format!(
                "unknown format {other:?} (expected yolo_txt, coco_json or multilabel_csv)"
            )),
        }
    }
}

/// Class index order for detection labels: all five object classes exactly
/// once, optionally followed or interleaved by `ARTIFACT`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassLabel>", into = "Vec<ClassLabel>")]
pub struct ClassOrder(Vec<ClassLabel>);

impl Default for ClassOrder {
    fn default() -> Self {
        ClassOrder(ClassLabel::OBJECTS.to_vec())
    }
}

impl TryFrom<Vec<ClassLabel>> for ClassOrder {
    type Error = EmitError;

    fn try_from(classes: Vec<ClassLabel>) -> Result<Self, Self::Error> {
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].contains(c) {
                return Err(EmitError::ClassOrder(format!("{c} listed twice")));
            }
        }
        if let Some(missing) = ClassLabel::OBJECTS.iter().find(|c| !classes.contains(c)) {
            return Err(EmitError::ClassOrder(format!("{missing} missing")));
        }
        Ok(ClassOrder(classes))
    }
}

impl From<ClassOrder> for Vec<ClassLabel> {
    fn from(o: ClassOrder) -> Self {
        o.0
    }
}

impl ClassOrder {
    pub fn with_artifacts() -> Self {
        let mut v = ClassLabel::OBJECTS.to_vec();
        v.push(ClassLabel::Artifact);
        ClassOrder(v)
    }

    pub fn index_of(&self, class: ClassLabel) -> Option<usize> {
        self.0.iter().position(|&c| c == class)
    }

    pub fn class_at(&self, index: usize) -> Option<ClassLabel> {
        self.0.get(index).copied()
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.0
    }
}

/// `num / den` rounded half-up to six decimals, formatted exactly.
fn fixed6(num: u64, den: u64) -> String {
    let scaled = u128::from(num) * 1_000_000;
    let den = u128::from(den);
    let q = (2 * scaled + den) / (2 * den);
    format!("{}.{:06}", q / 1_000_000, q % 1_000_000)
}

/// One YOLO label line for a pixel rect on a `width` x `height` image.
pub fn yolo_line(index: usize, rect: &Rect, (width, height): (u32, u32)) -> String {
    // center = x + w/2, so normalize (2x + w) / 2W to stay in integers
    let (w, h) = (u64::from(width), u64::from(height));
    format!(
        "{} {} {} {} {}\n",
        index,
        fixed6(2 * u64::from(rect.x) + u64::from(rect.w), 2 * w),
        fixed6(2 * u64::from(rect.y) + u64::from(rect.h), 2 * h),
        fixed6(u64::from(rect.w), w),
        fixed6(u64::from(rect.h), h),
    )
}

fn yolo_text(
    boxes: &[BoundingBox],
    dims: (u32, u32),
    order: &ClassOrder,
) -> Result<String, EmitError> {
    let mut out = String::new();
    for b in boxes {
        let index = order
            .index_of(b.class)
            .ok_or(EmitError::UnknownClass(b.class))?;
        out.push_str(&yolo_line(index, &b.rect, dims));
    }
    Ok(out)
}

/// YOLO label text: `<class> <cx> <cy> <w> <h>` per box, normalized by the
/// canvas and rounded half-up to six decimals.
pub fn emit_yolo(sample: &SyntheticSample, class_order: &ClassOrder) -> Result<String, EmitError> {
    yolo_text(&sample.boxes, sample.image.dimensions(), class_order)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoloLine {
    pub class_index: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl YoloLine {
    /// Pixel `(x, y, w, h)` on a `width` x `height` image.
    pub fn to_pixels(&self, width: u32, height: u32) -> (f64, f64, f64, f64) {
        let (fw, fh) = (f64::from(width), f64::from(height));
        let (w, h) = (self.w * fw, self.h * fh);
        (self.cx * fw - w / 2.0, self.cy * fh - h / 2.0, w, h)
    }
}

pub fn parse_yolo_line(line: &str) -> Result<YoloLine, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    }
    let class_index = fields[0]
        .parse()
        .map_err(|_| format!("invalid class index {:?}", fields[0]))?;
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(&fields[1..]) {
        *slot = f.parse().map_err(|_| format!("invalid number {f:?}"))?;
    }
    Ok(YoloLine {
        class_index,
        cx: v[0],
        cy: v[1],
        w: v[2],
        h: v[3],
    })
}

/// Multi-label CSV with header `image,BACTERIA,CRYSTAL,RBC,WBC,YEAST`.
pub fn emit_multilabel(rows: &[(String, MultiLabel)]) -> String {
    let mut out = String::from("image");
    for c in ClassLabel::OBJECTS {
        out.push(',');
        out.push_str(c.name());
    }
    out.push('\n');
    for (name, label) in rows {
        out.push_str(name);
        for bit in label.0 {
            out.push_str(if bit { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    out
}

pub fn parse_multilabel(text: &str) -> Result<Vec<(String, MultiLabel)>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty multi-label file")?;
    let expected = emit_multilabel(&[]);
    if header != expected.trim_end() {
        return Err(format!("unexpected header {header:?}"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != 6 {
                return Err(format!("line {}: expected 6 cells", i + 2));
            }
            let mut bits = [false; 5];
            for (b, c) in bits.iter_mut().zip(&cells[1..]) {
                *b = match *c {
                    "0" => false,
                    "1" => true,
                    other => return Err(format!("line {}: invalid cell {other:?}", i + 2)),
                };
            }
            Ok((cells[0].to_string(), MultiLabel(bits)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [u32; 4],
    pub area: u64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub categories: Vec<CocoCategory>,
    pub annotations: Vec<CocoAnnotation>,
}

/// One labeled image, independent of where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<'a> {
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub boxes: &'a [BoundingBox],
}

pub fn coco_document(
    images: &[LabeledImage<'_>],
    class_order: &ClassOrder,
) -> Result<CocoDocument, EmitError> {
    let categories = class_order
        .classes()
        .iter()
        .enumerate()
        .map(|(i, c)| CocoCategory {
            id: i as u64 + 1,
            name: c.name().to_string(),
        })
        .collect();
    let mut doc_images = Vec::with_capacity(images.len());
    let mut annotations = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let image_id = i as u64 + 1;
        doc_images.push(CocoImage {
            id: image_id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
        });
        for b in img.boxes {
            let category = class_order
                .index_of(b.class)
                .ok_or(EmitError::UnknownClass(b.class))?;
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: category as u64 + 1,
                bbox: [b.rect.x, b.rect.y, b.rect.w, b.rect.h],
                area: b.rect.area(),
                iscrowd: 0,
            });
        }
    }
    Ok(CocoDocument {
        images: doc_images,
        categories,
        annotations,
    })
}

/// File name of the `k`-th (0-based) image of a generated dataset.
pub fn image_name(k: usize) -> String {
    format!("img_{:06}.png", k + 1)
}

/// Detection-interchange JSON for a sequence of samples. Ids are assigned
/// from 1 in input order.
pub fn emit_coco(
    samples: &[SyntheticSample],
    class_order: &ClassOrder,
) -> Result<String, EmitError> {
    let images: Vec<LabeledImage<'_>> = samples
        .iter()
        .enumerate()
        .map(|(k, s)| LabeledImage {
            file_name: image_name(k),
            width: s.image.width(),
            height: s.image.height(),
            boxes: &s.boxes,
        })
        .collect();
    Ok(to_json(&coco_document(&images, class_order)?))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("in-memory documents serialize");
    s.push('\n');
    s
}

/// Lossless PNG with fixed encoder settings.
pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Sub)
        .write_image(
            image.as_raw(),
            image.width(),
            image.height(),
            image::ExtendedColorType::Rgb8,
        )
        .expect("encoding to memory cannot fail");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Paths are relative to the dataset root, or absolute for mixed sets.
    pub image: String,
    pub label: String,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub plan_seed: Option<u64>,
    pub width: u32,
    pub height: u32,
    /// Presence bits, BACTERIA..YEAST.
    pub multilabel: String,
    pub objects: usize,
    #[serde(default)]
    pub artifacts: usize,
    #[serde(default)]
    pub drops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputManifest {
    pub format: DatasetFormat,
    pub class_order: ClassOrder,
    pub entries: Vec<ManifestEntry>,
}

impl OutputManifest {
    pub fn read(root: &Path) -> Result<Self, EmitError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| EmitError::Parse {
            path,
            message: e.to_string(),
        })
    }

    pub fn write(&self, root: &Path) -> Result<(), EmitError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, to_json(self)).map_err(io_err(&path))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub images_dir: String,
    pub labels_dir: String,
    pub manifest_file: String,
    pub format: DatasetFormat,
    pub class_order: ClassOrder,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>, format: DatasetFormat, class_order: ClassOrder) -> Self {
        DatasetLayout {
            root: root.into(),
            images_dir: IMAGES_DIR.into(),
            labels_dir: LABELS_DIR.into(),
            manifest_file: MANIFEST_FILE.into(),
            format,
            class_order,
        }
    }

    fn label_for(&self, image_file: &str) -> String {
        match self.format {
            DatasetFormat::YoloTxt => {
                let stem = image_file.strip_suffix(".png").unwrap_or(image_file);
                format!("{}/{stem}.txt", self.labels_dir)
            }
            DatasetFormat::MultilabelCsv => format!("{}/{MULTILABEL_FILE}", self.labels_dir),
            DatasetFormat::CocoJson => format!("{}/{COCO_FILE}", self.labels_dir),
        }
    }
}

/// A fully rendered image ready for writing.
struct Item<'a> {
    file: String,
    image: &'a RgbImage,
    boxes: &'a [BoundingBox],
    entry: ManifestEntry,
}

/// Incremental dataset writer. Images and per-image label files are written
/// as chunks arrive; shared label files and the manifest on [`finish`].
///
/// [`finish`]: DatasetWriter::finish
pub struct DatasetWriter {
    layout: DatasetLayout,
    entries: Vec<ManifestEntry>,
    shared: Vec<(String, u32, u32, Vec<BoundingBox>)>,
}

impl DatasetWriter {
    pub fn new(layout: DatasetLayout) -> Result<Self, EmitError> {
        for dir in [&layout.images_dir, &layout.labels_dir] {
            let path = layout.root.join(dir);
            fs::create_dir_all(&path).map_err(io_err(&path))?;
        }
        Ok(DatasetWriter {
            layout,
            entries: Vec::new(),
            shared: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn write_items(&mut self, items: Vec<Item<'_>>) -> Result<(), EmitError> {
        let layout = &self.layout;
        let images_dir = layout.root.join(&layout.images_dir);
        items
            .par_iter()
            .try_for_each(|item| -> Result<(), EmitError> {
                let path = images_dir.join(&item.file);
                fs::write(&path, encode_png(item.image)).map_err(io_err(&path))?;
                if layout.format == DatasetFormat::YoloTxt {
                    let label = layout.root.join(&item.entry.label);
                    let text = yolo_text(item.boxes, item.image.dimensions(), &layout.class_order)?;
                    fs::write(&label, text).map_err(io_err(&label))?;
                }
                Ok(())
            })?;
        for item in items {
            if layout.format != DatasetFormat::YoloTxt {
                self.shared.push((
                    item.file,
                    item.image.width(),
                    item.image.height(),
                    item.boxes.to_vec(),
                ));
            }
            self.entries.push(item.entry);
        }
        Ok(())
    }

    /// Append samples; they are numbered after everything written so far.
    pub fn push_samples(&mut self, samples: &[SyntheticSample]) -> Result<(), EmitError> {
        let offset = self.entries.len();
        let layout = &self.layout;
        let items = samples
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let file = image_name(offset + k);
                Item {
                    entry: ManifestEntry {
                        image: format!("{}/{file}", layout.images_dir),
                        label: layout.label_for(&file),
                        provenance: Provenance::Synthetic,
                        plan_seed: Some(s.plan.plan_seed),
                        width: s.image.width(),
                        height: s.image.height(),
                        multilabel: s.multilabel.bit_string(),
                        objects: s.boxes.iter().filter(|b| b.class.is_object()).count(),
                        artifacts: s.plan.artifact_count(),
                        drops: s.plan.drops.len(),
                    },
                    file,
                    image: &s.image,
                    boxes: &s.boxes,
                }
            })
            .collect();
        self.write_items(items)
    }

    pub fn finish(self) -> Result<OutputManifest, EmitError> {
        let layout = &self.layout;
        let labels_dir = layout.root.join(&layout.labels_dir);
        let mut class_names = String::new();
        for c in layout.class_order.classes() {
            let _ = writeln!(class_names, "{}", c.name());
        }
        let classes_path = layout.root.join(CLASSES_FILE);
        fs::write(&classes_path, class_names).map_err(io_err(&classes_path))?;

        match layout.format {
            DatasetFormat::YoloTxt => {}
            DatasetFormat::MultilabelCsv => {
                let rows: Vec<(String, MultiLabel)> = self
                    .shared
                    .iter()
                    .map(|(file, _, _, boxes)| (file.clone(), MultiLabel::from_boxes(boxes)))
                    .collect();
                let path = labels_dir.join(MULTILABEL_FILE);
                fs::write(&path, emit_multilabel(&rows)).map_err(io_err(&path))?;
            }
            DatasetFormat::CocoJson => {
                let images: Vec<LabeledImage<'_>> = self
                    .shared
                    .iter()
                    .map(|(file, width, height, boxes)| LabeledImage {
                        file_name: file.clone(),
                        width: *width,
                        height: *height,
                        boxes,
                    })
                    .collect();
                let path = labels_dir.join(COCO_FILE);
                fs::write(
                    &path,
                    to_json(&coco_document(&images, &layout.class_order)?),
                )
                .map_err(io_err(&path))?;
            }
        }

        let manifest = OutputManifest {
            format: layout.format,
            class_order: layout.class_order.clone(),
            entries: self.entries,
        };
        let path = layout.root.join(&layout.manifest_file);
        fs::write(&path, to_json(&manifest)).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

/// Write samples as `images/img_NNNNNN.png` with labels in the layout's
/// format and a manifest listing every image. Identical samples produce
/// identical bytes.
pub fn write_dataset(
    samples: &[SyntheticSample],
    layout: &DatasetLayout,
) -> Result<OutputManifest, EmitError> {
    let mut writer = DatasetWriter::new(layout.clone())?;
    writer.push_samples(samples)?;
    writer.finish()
}

/// Export box-annotated (exhaustively labeled) real images into the same
/// layout, for use as the real side of [`mix_datasets`]. Images are
/// re-encoded as PNG; box classes missing from the class order are skipped.
pub fn write_real_dataset<S: ImageSource>(
    manifest: &DatasetManifest,
    source: &S,
    layout: &DatasetLayout,
) -> Result<OutputManifest, EmitError> {
    let mut boxes: BTreeMap<&str, Vec<BoundingBox>> = BTreeMap::new();
    for b in &manifest.box_annotations {
        if layout.class_order.index_of(b.class).is_none() {
            continue;
        }
        boxes
            .entry(b.image_id.as_str())
            .or_default()
            .push(BoundingBox {
                class: b.class,
                rect: Rect::new(b.x as u32, b.y as u32, b.w as u32, b.h as u32),
            });
    }
    let mut writer = DatasetWriter::new(layout.clone())?;
    let empty = Vec::new();
    for chunk in manifest.records.chunks(64) {
        let images: Vec<RgbImage> = chunk
            .par_iter()
            .map(|r| {
                source.load(r).map_err(|e| EmitError::RealImage {
                    image_id: r.image_id.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        let items = chunk
            .iter()
            .zip(&images)
            .map(|(r, image)| {
                let b = boxes.get(r.image_id.as_str()).unwrap_or(&empty);
                let safe: String = r
                    .image_id
                    .chars()
                    .map(|c| {
                        if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                            c
                        } else {
                            '_'
                        }
                    })
                    .collect();
                let file = format!("real_{safe}.png");
                Item {
                    entry: ManifestEntry {
                        image: format!("{}/{file}", layout.images_dir),
                        label: layout.label_for(&file),
                        provenance: Provenance::Real,
                        plan_seed: None,
                        width: image.width(),
                        height: image.height(),
                        multilabel: MultiLabel::from_boxes(b).bit_string(),
                        objects: b.iter().filter(|x| x.class.is_object()).count(),
                        artifacts: 0,
                        drops: 0,
                    },
                    file,
                    image,
                    boxes: b,
                }
            })
            .collect();
        writer.write_items(items)?;
    }
    writer.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub real_fraction: f64,
    pub seed: u64,
}

/// Number of real images `r` with `r / (r + synthetic)` closest to the
/// requested fraction: `round_half_up(f * S / (1 - f))`. The achieved
/// fraction is then within `0.5 / (r + S)` of the request.
pub fn required_real(
    synthetic: usize,
    available: usize,
    fraction: f64,
) -> Result<usize, EmitError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(EmitError::InvalidFraction(fraction));
    }
    let max_fraction = if available + synthetic == 0 {
        0.0
    } else {
        available as f64 / (available + synthetic) as f64
    };
    let needed = if fraction == 0.0 {
        0
    } else if fraction == 1.0 {
        if synthetic > 0 {
            u64::MAX
        } else {
            available as u64
        }
    } else {
        round_half_up(fraction * synthetic as f64 / (1.0 - fraction))
    };
    if needed > available as u64 {
        return Err(EmitError::InsufficientReal {
            requested: fraction,
            needed,
            available,
            max_fraction,
        });
    }
    Ok(needed as usize)
}

/// All synthetic entries followed by a seeded subset of real entries
/// (sampled without replacement, kept in their original order).
pub fn mix_manifests(
    synthetic: &OutputManifest,
    real: &OutputManifest,
    spec: &MixSpec,
) -> Result<OutputManifest, EmitError> {
    if synthetic.format != real.format {
        return Err(EmitError::Mismatch("format"));
    }
    if synthetic.class_order != real.class_order {
        return Err(EmitError::Mismatch("class order"));
    }
    let r = required_real(
        synthetic.entries.len(),
        real.entries.len(),
        spec.real_fraction,
    )?;
    let mut picked =
        rand::seq::index::sample(&mut seed::stream(spec.seed), real.entries.len(), r).into_vec();
    picked.sort_unstable();

    let mut entries = synthetic.entries.clone();
    entries.extend(picked.into_iter().map(|i| {
        let mut e = real.entries[i].clone();
        e.provenance = Provenance::Real;
        e
    }));
    Ok(OutputManifest {
        format: synthetic.format,
        class_order: synthetic.class_order.clone(),
        entries,
    })
}

fn absolute(root: &Path, rel: &str) -> String {
    let p = Path::new(rel);
    let joined = if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    };
    joined.to_string_lossy().into_owned()
}

/// Mix two dataset directories into a merged manifest under `out`. Files are
/// referenced, not copied; entry paths become absolute.
pub fn mix_datasets(
    synthetic: &DatasetLayout,
    real: &DatasetLayout,
    spec: &MixSpec,
    out: &Path,
) -> Result<OutputManifest, EmitError> {
    let canonical = |p: &Path| fs::canonicalize(p).map_err(io_err(p));
    let load = |layout: &DatasetLayout| -> Result<OutputManifest, EmitError> {
        let root = canonical(&layout.root)?;
        let mut m = OutputManifest::read(&root)?;
        if m.format != layout.format {
            return Err(EmitError::Mismatch("format"));
        }
        for e in &mut m.entries {
            e.image = absolute(&root, &e.image);
            e.label = absolute(&root, &e.label);
        }
        Ok(m)
    };
    let mixed = mix_manifests(&load(synthetic)?, &load(real)?, spec)?;
    mixed.write(out)?;
    Ok(mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{AugmentChain, Stage};
    use crate::compositor::{BackgroundRealization, CompositionConfig, CompositionPlan, Preset};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn sample_with(boxes: Vec<BoundingBox>, w: u32, h: u32) -> SyntheticSample {
        SyntheticSample {
            image: RgbImage::new(w, h),
            multilabel: MultiLabel::from_boxes(&boxes),
            boxes,
            plan: CompositionPlan {
                config: Arc::new(CompositionConfig::preset(Preset::Detect416)),
                placements: vec![],
                background: BackgroundRealization::Constant { gray: 0 },
                post_paste_chain: AugmentChain::empty(Stage::PostPaste),
                plan_seed: 7,
                drops: vec![],
                reused_patches: 0,
            },
        }
    }

    fn bx(class: ClassLabel, x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
        BoundingBox {
            class,
            rect: Rect::new(x, y, w, h),
        }
    }

    #[test]
    fn yolo_empty() {
        assert_eq!(
            emit_yolo(&sample_with(vec![], 416, 416), &ClassOrder::default()).unwrap(),
            ""
        );
    }

    /// (50 + 18) / 416 = 0.16346153.., (60 + 18) / 416 = 0.1875, 36 / 416 = 0.08653846..
    #[test]
    fn yolo_known_line() {
        let cx: f64 = (50.0 + 18.0) / 416.0;
        let cy: f64 = (60.0 + 18.0) / 416.0;
        let w: f64 = 36.0 / 416.0;
        let oracle = format!("2 {cx:.6} {cy:.6} {w:.6} {w:.6}\n");
        let s = sample_with(vec![bx(ClassLabel::Rbc, 50, 60, 36, 36)], 416, 416);
        let text = emit_yolo(&s, &ClassOrder::default()).unwrap();
        assert_eq!(text, oracle);
        assert_eq!(text, "2 0.163462 0.187500 0.086538 0.086538\n");
    }

    #[test]
    fn yolo_full_canvas() {
        let s = sample_with(vec![bx(ClassLabel::Yeast, 0, 0, 416, 416)], 416, 416);
        assert_eq!(
            emit_yolo(&s, &ClassOrder::default()).unwrap(),
            "4 0.500000 0.500000 1.000000 1.000000\n"
        );
    }

    #[test]
    fn fixed6_rounds_exact_ties_up() {
        // 1/128 = 0.0078125 exactly
        assert_eq!(fixed6(1, 128), "0.007813");
        assert_eq!(fixed6(0, 5), "0.000000");
        assert_eq!(fixed6(3, 3), "1.000000");
    }

    #[test]
    fn yolo_unknown_class() {
        let s = sample_with(vec![bx(ClassLabel::Artifact, 0, 0, 4, 4)], 416, 416);
        assert!(matches!(
            emit_yolo(&s, &ClassOrder::default()),
            Err(EmitError::UnknownClass(ClassLabel::Artifact))
        ));
        assert!(emit_yolo(&s, &ClassOrder::with_artifacts())
            .unwrap()
            .starts_with("5 "));
    }

    #[test]
    fn multilabel_csv() {
        assert_eq!(
            emit_multilabel(&[]),
            "image,BACTERIA,CRYSTAL,RBC,WBC,YEAST\n"
        );
        let rows = vec![
            (
                "img_000001.png".to_string(),
                MultiLabel([false, false, true, false, false]),
            ),
            (
                "img_000002.png".to_string(),
                MultiLabel([true, false, false, false, true]),
            ),
            ("img_000003.png".to_string(), MultiLabel::default()),
        ];
        let text = emit_multilabel(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "img_000001.png,0,0,1,0,0");
        assert_eq!(lines[2], "img_000002.png,1,0,0,0,1");
        assert_eq!(parse_multilabel(&text).unwrap(), rows);
    }

    #[test]
    fn coco_documents() {
        let empty: CocoDocument =
            serde_json::from_str(&emit_coco(&[], &ClassOrder::default()).unwrap()).unwrap();
        assert!(empty.images.is_empty() && empty.annotations.is_empty());
        assert_eq!(empty.categories.len(), 5);
        assert_eq!(empty.categories[0].name, "BACTERIA");

        let samples = vec![
            sample_with(vec![bx(ClassLabel::Rbc, 1, 2, 36, 36)], 416, 416),
            sample_with(
                vec![
                    bx(ClassLabel::Wbc, 0, 0, 10, 20),
                    bx(ClassLabel::Rbc, 5, 5, 4, 4),
                ],
                416,
                416,
            ),
        ];
        let text = emit_coco(&samples, &ClassOrder::default()).unwrap();
        assert_eq!(text, emit_coco(&samples, &ClassOrder::default()).unwrap());
        let doc: CocoDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(doc.annotations.len(), 3);
        assert_eq!(doc.annotations[0].area, 1296);
        assert_eq!(doc.annotations[0].category_id, 3);
        assert_eq!(doc.annotations[2].id, 3);
        assert_eq!(doc.annotations[2].image_id, 2);
        assert_eq!(doc.images[1].file_name, "img_000002.png");
    }

    #[test]
    fn class_order_validation() {
        assert!(ClassOrder::try_from(vec![ClassLabel::Rbc]).is_err());
        let mut v = ClassLabel::OBJECTS.to_vec();
        v.push(ClassLabel::Rbc);
        assert!(ClassOrder::try_from(v).is_err());
        let mut v = ClassLabel::OBJECTS.to_vec();
        v.reverse();
        let o = ClassOrder::try_from(v).unwrap();
        assert_eq!(o.index_of(ClassLabel::Yeast), Some(0));
    }

    #[test]
    fn mix_counts() {
        assert_eq!(required_real(900, 1000, 0.0).unwrap(), 0);
        // r / (r + 900) = 0.1  =>  r = 100
        assert_eq!(required_real(900, 1000, 0.1).unwrap(), 100);
        match required_real(900, 10, 0.5) {
            Err(EmitError::InsufficientReal { max_fraction, .. }) => {
                assert!((max_fraction - 10.0 / 910.0).abs() < 1e-12);
                assert!((max_fraction - 0.011).abs() < 0.0005);
            }
            other => panic!("{other:?}"),
        }
        assert!(required_real(10, 100, 1.0).is_err());
        assert_eq!(required_real(0, 5, 1.0).unwrap(), 5);
        assert!(matches!(
            required_real(1, 1, -0.1),
            Err(EmitError::InvalidFraction(_))
        ));
    }

    fn fake_manifest(n: usize, provenance: Provenance) -> OutputManifest {
        OutputManifest {
            format: DatasetFormat::YoloTxt,
            class_order: ClassOrder::default(),
            entries: (0..n)
                .map(|i| ManifestEntry {
                    image: format!("images/{provenance:?}_{i}.png"),
                    label: format!("labels/{provenance:?}_{i}.txt"),
                    provenance,
                    plan_seed: None,
                    width: 4,
                    height: 4,
                    multilabel: "00000".into(),
                    objects: 0,
                    artifacts: 0,
                    drops: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn mix_selects_seeded_subset() {
        let syn = fake_manifest(900, Provenance::Synthetic);
        let real = fake_manifest(1000, Provenance::Real);
        let spec = MixSpec {
            real_fraction: 0.1,
            seed: 3,
        };
        let a = mix_manifests(&syn, &real, &spec).unwrap();
        assert_eq!(a.entries.len(), 1000);
        assert_eq!(
            a.entries
                .iter()
                .filter(|e| e.provenance == Provenance::Real)
                .count(),
            100
        );
        assert_eq!(a, mix_manifests(&syn, &real, &spec).unwrap());
        let b = mix_manifests(&syn, &real, &MixSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, b);
        let zero = mix_manifests(
            &syn,
            &real,
            &MixSpec {
                real_fraction: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(zero.entries, syn.entries);

        let mut other = real.clone();
        other.format = DatasetFormat::CocoJson;
        assert!(matches!(
            mix_manifests(&syn, &other, &spec),
            Err(EmitError::Mismatch("format"))
        ));
    }

    proptest! {
        #[test]
        fn yolo_round_trip(w in 1u32..4096, h in 1u32..4096, a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 0.0f64..1.0) {
            let bw = 1 + (a * f64::from(w - 1)) as u32;
            let bh = 1 + (b * f64::from(h - 1)) as u32;
            let x = (c * f64::from(w - bw)) as u32;
            let y = (d * f64::from(h - bh)) as u32;
            let line = yolo_line(0, &Rect::new(x, y, bw, bh), (w, h));
            let (px, py, pw, ph) = parse_yolo_line(&line).unwrap().to_pixels(w, h);
            prop_assert!((px - f64::from(x)).abs() <= 0.5);
            prop_assert!((py - f64::from(y)).abs() <= 0.5);
            prop_assert!((pw - f64::from(bw)).abs() <= 0.5);
            prop_assert!((ph - f64::from(bh)).abs() <= 0.5);
        }

        #[test]
        fn mix_fraction_within_one_image(s in 0usize..5000, r_avail in 0usize..5000, f in 0.0f64..1.0) {
            if let Ok(r) = required_real(s, r_avail, f) {
                let total = r + s;
                if total > 0 {
                    let achieved = r as f64 / total as f64;
                    prop_assert!((achieved - f).abs() <= 1.0 / total as f64);
                }
            }
        }
    }
}
