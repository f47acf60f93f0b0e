//! Class counts, label audits and distribution conformance.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation_io::{ClassLabel, DatasetManifest};
use crate::compositor::{MultiLabel, SyntheticSample};
use crate::emitters::{
    parse_multilabel, parse_yolo_line, ClassOrder, CocoDocument, DatasetFormat, ManifestEntry,
    OutputManifest, IMAGES_DIR, LABELS_DIR, MANIFEST_FILE,
};
use crate::patch_extraction::PatchPool;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}{}: {message}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("class {class} has zero expected probability but {observed} observations")]
    DegenerateExpected { class: ClassLabel, observed: u64 },
    #[error("expected distribution invalid: {0}")]
    InvalidExpected(String),
    #[error("no observations")]
    EmptyObserved,
    #[error("no critical value for alpha {alpha} with {df} degrees of freedom (tabulated: alpha 0.05/0.01, df 1..=8)")]
    NoCriticalValue { alpha: f64, df: usize },
}

fn read(path: &Path) -> Result<String, StatsError> {
    fs::read_to_string(path).map_err(|source| StatsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    /// All six classes are always present. `ARTIFACT` counts artifact
    /// placements and is never part of the conformance test.
    pub counts: BTreeMap<ClassLabel, u64>,
    pub total_images: u64,
    /// Placements abandoned during composition.
    pub drops: u64,
}

impl Default for ClassHistogram {
    fn default() -> Self {
        ClassHistogram {
            counts: ClassLabel::ALL.into_iter().map(|c| (c, 0)).collect(),
            total_images: 0,
            drops: 0,
        }
    }
}

impl ClassHistogram {
    pub fn get(&self, class: ClassLabel) -> u64 {
        self.counts[&class]
    }

    fn add(&mut self, class: ClassLabel, n: u64) {
        *self.counts.get_mut(&class).expect("all classes present") += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn object_total(&self) -> u64 {
        ClassLabel::OBJECTS.iter().map(|&c| self.get(c)).sum()
    }

    /// Object counts from boxes (detection) or set bits (multi-label). The
    /// artifact column always counts artifact placements.
    pub fn from_samples(samples: &[SyntheticSample], format: DatasetFormat) -> Self {
        let mut h = ClassHistogram::default();
        for s in samples {
            h.total_images += 1;
            h.drops += s.plan.drops.len() as u64;
            h.add(ClassLabel::Artifact, s.plan.artifact_count() as u64);
            match format {
                DatasetFormat::MultilabelCsv => {
                    for c in ClassLabel::OBJECTS {
                        h.add(c, u64::from(s.multilabel.contains(c)));
                    }
                }
                _ => {
                    for b in s.boxes.iter().filter(|b| b.class.is_object()) {
                        h.add(b.class, 1);
                    }
                }
            }
        }
        h
    }

    /// Annotated objects in a source manifest (centers, or boxes when a
    /// manifest has no centers).
    pub fn from_source(manifest: &DatasetManifest) -> Self {
        let mut h = ClassHistogram {
            total_images: manifest.records.len() as u64,
            ..Default::default()
        };
        if manifest.center_annotations.is_empty() {
            manifest
                .box_annotations
                .iter()
                .for_each(|a| h.add(a.class, 1));
        } else {
            manifest
                .center_annotations
                .iter()
                .for_each(|a| h.add(a.class, 1));
        }
        h
    }

    pub fn from_pool(pool: &PatchPool) -> Self {
        let mut h = ClassHistogram::default();
        for (c, n) in pool.counts() {
            h.add(c, n as u64);
        }
        h
    }

    /// Counts from a written dataset directory, read back from its labels.
    pub fn from_dataset(root: &Path) -> Result<Self, StatsError> {
        let manifest = read_manifest(root)?;
        let mut h = ClassHistogram {
            total_images: manifest.entries.len() as u64,
            ..Default::default()
        };
        for e in &manifest.entries {
            h.drops += e.drops as u64;
            h.add(ClassLabel::Artifact, e.artifacts as u64);
        }
        let labels = LabelIndex::load(root, &manifest)?;
        for e in &manifest.entries {
            match &labels {
                LabelIndex::Boxes(by_entry) => {
                    for (_, b) in &by_entry[&e.label] {
                        if let Ok(line) = b {
                            let class = manifest
                                .class_order
                                .class_at(line.class_index)
                                .filter(|c| c.is_object());
                            if let Some(c) = class {
                                h.add(c, 1);
                            }
                        }
                    }
                }
                LabelIndex::Coco(docs) => {
                    let (doc, by_name) = &docs[&e.label];
                    if let Some(&id) = by_name.get(file_name(&e.image)) {
                        for a in doc.annotations.iter().filter(|a| a.image_id == id) {
                            if let Some(c) = coco_class(&manifest.class_order, a.category_id)
                                .filter(|c| c.is_object())
                            {
                                h.add(c, 1);
                            }
                        }
                    }
                }
                LabelIndex::Multilabel(tables) => {
                    if let Some((_, bits)) = tables[&e.label].get(file_name(&e.image)) {
                        for c in ClassLabel::OBJECTS {
                            h.add(c, u64::from(bits.contains(c)));
                        }
                    }
                }
            }
        }
        Ok(h)
    }
}

fn coco_class(order: &ClassOrder, category_id: u64) -> Option<ClassLabel> {
    category_id
        .checked_sub(1)
        .and_then(|i| order.class_at(i as usize))
}

fn file_name(path: &str) -> &str {
    path.rsplit(['/', '\\']).next().unwrap_or(path)
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn read_manifest(root: &Path) -> Result<OutputManifest, StatsError> {
    let path = root.join(MANIFEST_FILE);
    serde_json::from_str(&read(&path)?).map_err(|e| StatsError::Parse {
        path,
        line: Some(e.line()),
        message: e.to_string(),
    })
}

type YoloLines = Vec<(usize, Result<crate::emitters::YoloLine, String>)>;

/// Parsed label artifacts, keyed by the manifest's label path.
enum LabelIndex {
    Boxes(HashMap<String, YoloLines>),
    Coco(HashMap<String, (CocoDocument, HashMap<String, u64>)>),
    /// image file name → (1-based line, bits)
    Multilabel(HashMap<String, HashMap<String, (usize, MultiLabel)>>),
}

impl LabelIndex {
    /// Missing YOLO files load as empty; missing shared label files are
    /// errors.
    fn load(root: &Path, manifest: &OutputManifest) -> Result<Self, StatsError> {
        let unique: BTreeSet<&str> = manifest.entries.iter().map(|e| e.label.as_str()).collect();
        Ok(match manifest.format {
            DatasetFormat::YoloTxt => LabelIndex::Boxes(
                unique
                    .into_par_iter()
                    .map(|l| {
                        let text = fs::read_to_string(resolve(root, l)).unwrap_or_default();
                        (l.to_string(), parse_yolo_text(&text))
                    })
                    .collect(),
            ),
            DatasetFormat::CocoJson => LabelIndex::Coco(
                unique
                    .into_iter()
                    .map(|l| {
                        let path = resolve(root, l);
                        let doc: CocoDocument =
                            serde_json::from_str(&read(&path)?).map_err(|e| StatsError::Parse {
                                path,
                                line: Some(e.line()),
                                message: e.to_string(),
                            })?;
                        let by_name = doc
                            .images
                            .iter()
                            .map(|i| (i.file_name.clone(), i.id))
                            .collect();
                        Ok((l.to_string(), (doc, by_name)))
                    })
                    .collect::<Result<_, StatsError>>()?,
            ),
            DatasetFormat::MultilabelCsv => LabelIndex::Multilabel(
                unique
                    .into_iter()
                    .map(|l| {
                        let path = resolve(root, l);
                        let rows = parse_multilabel(&read(&path)?).map_err(|message| {
                            StatsError::Parse {
                                path,
                                line: None,
                                message,
                            }
                        })?;
                        let table = rows
                            .into_iter()
                            .enumerate()
                            .map(|(i, (name, bits))| (name, (i + 2, bits)))
                            .collect();
                        Ok((l.to_string(), table))
                    })
                    .collect::<Result<_, StatsError>>()?,
            ),
        })
    }
}

fn parse_yolo_text(text: &str) -> YoloLines {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, parse_yolo_line(l)))
        .collect()
}

/// Upper critical values of the chi-square distribution, df 1..=8.
const CHI2_CRIT_05: [f64; 8] = [
    3.841459, 5.991465, 7.814728, 9.487729, 11.070498, 12.591587, 14.067140, 15.507313,
];
const CHI2_CRIT_01: [f64; 8] = [
    6.634897, 9.210340, 11.344867, 13.276704, 15.086272, 16.811894, 18.475307, 20.090235,
];

pub fn chi_square_critical(df: usize, alpha: f64) -> Option<f64> {
    let table = if alpha == 0.05 {
        &CHI2_CRIT_05
    } else if alpha == 0.01 {
        &CHI2_CRIT_01
    } else {
        return None;
    };
    df.checked_sub(1).and_then(|i| table.get(i)).copied()
}

/// Pearson statistic `sum (o - e)^2 / e` with `e = N p`. Cells with `p = 0`
/// must be empty and are skipped.
pub fn chi_square_statistic(observed: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = observed.iter().sum();
    observed
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&o, &p)| {
            let e = n as f64 * p;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub classes: Vec<ClassLabel>,
    pub observed: Vec<u64>,
    pub expected: Vec<f64>,
    pub statistic: f64,
    pub df: usize,
    pub alpha: f64,
    pub critical_value: f64,
    pub pass: bool,
}

/// Chi-square goodness of fit of the five object-class counts against
/// `expected` (probabilities over object classes, summing to 1).
pub fn conformance(
    observed: &ClassHistogram,
    expected: &BTreeMap<ClassLabel, f64>,
    alpha: f64,
) -> Result<ConformanceReport, StatsError> {
    if expected.contains_key(&ClassLabel::Artifact) {
        return Err(StatsError::InvalidExpected(
            "ARTIFACT is not part of the test".into(),
        ));
    }
    if expected.values().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(StatsError::InvalidExpected(
            "probabilities must be finite and >= 0".into(),
        ));
    }
    let sum: f64 = expected.values().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(StatsError::InvalidExpected(format!(
            "probabilities sum to {sum}"
        )));
    }
    if observed.object_total() == 0 {
        return Err(StatsError::EmptyObserved);
    }
    let mut classes = Vec::new();
    let mut obs = Vec::new();
    let mut probs = Vec::new();
    for c in ClassLabel::OBJECTS {
        let p = expected.get(&c).copied().unwrap_or(0.0);
        let o = observed.get(c);
        if p == 0.0 {
            if o > 0 {
                return Err(StatsError::DegenerateExpected {
                    class: c,
                    observed: o,
                });
            }
            continue;
        }
        classes.push(c);
        obs.push(o);
        probs.push(p);
    }
    let df = classes.len().saturating_sub(1);
    let critical_value =
        chi_square_critical(df, alpha).ok_or(StatsError::NoCriticalValue { alpha, df })?;
    let statistic = chi_square_statistic(&obs, &probs);
    let n = observed.object_total() as f64;
    Ok(ConformanceReport {
        classes,
        expected: probs.iter().map(|p| p * n).collect(),
        observed: obs,
        statistic,
        df,
        alpha,
        critical_value,
        pass: statistic < critical_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    MalformedLabel,
    UnknownClass,
    NonPositiveArea,
    OutsideCanvas,
    MultilabelMismatch,
    OrphanLabel,
    ImageWithoutLabel,
    MissingImage,
    UnreadableManifest,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Finding {
    pub path: PathBuf,
    /// 1-based line in `path`, when the finding points at one.
    pub line: Option<usize>,
    pub kind: FindingKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub findings: Vec<Finding>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Slack for six-decimal rounding of normalized coordinates.
const NORM_EPS: f64 = 1e-6;

fn box_findings(
    path: &Path,
    line: Option<usize>,
    (x0, y0, x1, y1): (f64, f64, f64, f64),
    (w, h): (f64, f64),
    findings: &mut Vec<Finding>,
) {
    let f = |kind, message: String| Finding {
        path: path.to_path_buf(),
        line,
        kind,
        message,
    };
    if x1 <= x0 || y1 <= y0 {
        findings.push(f(
            FindingKind::NonPositiveArea,
            format!("box has width {} and height {}", x1 - x0, y1 - y0),
        ));
    }
    let (ex, ey) = (NORM_EPS * w, NORM_EPS * h);
    if x0 < -ex || y0 < -ey || x1 > w + ex || y1 > h + ey {
        findings.push(f(
            FindingKind::OutsideCanvas,
            format!("box [{x0}, {y0}, {x1}, {y1}] outside {w}x{h}"),
        ));
    }
}

fn mismatch(
    path: &Path,
    line: Option<usize>,
    entry: &ManifestEntry,
    found: MultiLabel,
) -> Option<Finding> {
    (entry.multilabel != found.bit_string()).then(|| Finding {
        path: path.to_path_buf(),
        line,
        kind: FindingKind::MultilabelMismatch,
        message: format!(
            "manifest says {} for {}, labels give {}",
            entry.multilabel,
            entry.image,
            found.bit_string()
        ),
    })
}

fn audit_entry(
    root: &Path,
    manifest: &OutputManifest,
    labels: &LabelIndex,
    e: &ManifestEntry,
) -> Vec<Finding> {
    let mut out = Vec::new();
    let image_path = resolve(root, &e.image);
    let label_path = resolve(root, &e.label);
    if !image_path.is_file() {
        out.push(Finding {
            path: image_path.clone(),
            line: None,
            kind: FindingKind::MissingImage,
            message: "listed in manifest but not on disk".into(),
        });
    }
    let dims = (f64::from(e.width), f64::from(e.height));
    let mut boxes = Vec::new();
    match labels {
        LabelIndex::Boxes(by_label) => {
            if !label_path.is_file() {
                out.push(Finding {
                    path: image_path,
                    line: None,
                    kind: FindingKind::ImageWithoutLabel,
                    message: format!("label file {} missing", e.label),
                });
                return out;
            }
            for (line, parsed) in &by_label[&e.label] {
                match parsed {
                    Err(message) => out.push(Finding {
                        path: label_path.clone(),
                        line: Some(*line),
                        kind: FindingKind::MalformedLabel,
                        message: message.clone(),
                    }),
                    Ok(y) => {
                        match manifest.class_order.class_at(y.class_index) {
                            Some(c) => boxes.push(c),
                            None => out.push(Finding {
                                path: label_path.clone(),
                                line: Some(*line),
                                kind: FindingKind::UnknownClass,
                                message: format!(
                                    "class index {} not in class order",
                                    y.class_index
                                ),
                            }),
                        }
                        let (cx, cy, bw, bh) =
                            (y.cx * dims.0, y.cy * dims.1, y.w * dims.0, y.h * dims.1);
                        box_findings(
                            &label_path,
                            Some(*line),
                            (cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0),
                            dims,
                            &mut out,
                        );
                    }
                }
            }
        }
        LabelIndex::Coco(docs) => {
            let (doc, by_name) = &docs[&e.label];
            let Some(&id) = by_name.get(file_name(&e.image)) else {
                out.push(Finding {
                    path: image_path,
                    line: None,
                    kind: FindingKind::ImageWithoutLabel,
                    message: format!("no image record in {}", e.label),
                });
                return out;
            };
            for a in doc.annotations.iter().filter(|a| a.image_id == id) {
                let path = label_path.clone();
                match coco_class(&manifest.class_order, a.category_id) {
                    Some(c) => boxes.push(c),
                    None => out.push(Finding {
                        path: path.clone(),
                        line: None,
                        kind: FindingKind::UnknownClass,
                        message: format!(
                            "annotation {} has unknown category {}",
                            a.id, a.category_id
                        ),
                    }),
                }
                let [x, y, w, h] = a.bbox.map(f64::from);
                box_findings(&path, None, (x, y, x + w, y + h), dims, &mut out);
            }
        }
        LabelIndex::Multilabel(tables) => {
            let Some((line, bits)) = tables[&e.label].get(file_name(&e.image)) else {
                out.push(Finding {
                    path: image_path,
                    line: None,
                    kind: FindingKind::ImageWithoutLabel,
                    message: format!("no row in {}", e.label),
                });
                return out;
            };
            out.extend(mismatch(&label_path, Some(*line), e, *bits));
            return out;
        }
    }
    let found = MultiLabel(ClassLabel::OBJECTS.map(|c| boxes.contains(&c)));
    out.extend(mismatch(&label_path, None, e, found));
    out
}

fn list_dir(dir: &Path, ext: &str) -> BTreeSet<String> {
    fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|d| {
            let name = d.file_name().into_string().ok()?;
            name.strip_suffix(ext).map(str::to_string)
        })
        .collect()
}

/// Check every label against its image and the manifest. Findings are
/// sorted by path, then line.
pub fn audit_labels(root: &Path) -> AuditReport {
    let manifest = match read_manifest(root) {
        Ok(m) => m,
        Err(e) => {
            return AuditReport {
                findings: vec![Finding {
                    path: root.join(MANIFEST_FILE),
                    line: None,
                    kind: FindingKind::UnreadableManifest,
                    message: e.to_string(),
                }],
            }
        }
    };
    let labels = match LabelIndex::load(root, &manifest) {
        Ok(l) => l,
        Err(e) => {
            let (path, line) = match &e {
                StatsError::Parse { path, line, .. } => (path.clone(), *line),
                StatsError::Io { path, .. } => (path.clone(), None),
                _ => (root.to_path_buf(), None),
            };
            return AuditReport {
                findings: vec![Finding {
                    path,
                    line,
                    kind: FindingKind::MalformedLabel,
                    message: e.to_string(),
                }],
            };
        }
    };
    let mut findings: Vec<Finding> = manifest
        .entries
        .par_iter()
        .flat_map_iter(|e| audit_entry(root, &manifest, &labels, e))
        .collect();

    let listed: BTreeSet<&str> = manifest
        .entries
        .iter()
        .map(|e| file_name(&e.image))
        .collect();
    match &labels {
        LabelIndex::Boxes(_) => {
            let images = list_dir(&root.join(IMAGES_DIR), ".png");
            for stem in list_dir(&root.join(LABELS_DIR), ".txt") {
                if !images.contains(&stem) {
                    findings.push(Finding {
                        path: root.join(LABELS_DIR).join(format!("{stem}.txt")),
                        line: None,
                        kind: FindingKind::OrphanLabel,
                        message: format!("no image {IMAGES_DIR}/{stem}.png"),
                    });
                }
            }
        }
        LabelIndex::Coco(docs) => {
            for (label, (doc, _)) in docs {
                for img in doc
                    .images
                    .iter()
                    .filter(|i| !listed.contains(i.file_name.as_str()))
                {
                    findings.push(Finding {
                        path: resolve(root, label),
                        line: None,
                        kind: FindingKind::OrphanLabel,
                        message: format!("image record {} has no dataset image", img.file_name),
                    });
                }
            }
        }
        LabelIndex::Multilabel(tables) => {
            for (label, table) in tables {
                for (name, (line, _)) in table.iter().filter(|(n, _)| !listed.contains(n.as_str()))
                {
                    findings.push(Finding {
                        path: resolve(root, label),
                        line: Some(*line),
                        kind: FindingKind::OrphanLabel,
                        message: format!("row for {name} has no dataset image"),
                    });
                }
            }
        }
    }
    for stem in list_dir(&root.join(IMAGES_DIR), ".png") {
        let name = format!("{stem}.png");
        if !listed.contains(name.as_str()) {
            findings.push(Finding {
                path: root.join(IMAGES_DIR).join(name),
                line: None,
                kind: FindingKind::ImageWithoutLabel,
                message: "image not listed in manifest".into(),
            });
        }
    }
    findings.sort();
    AuditReport { findings }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub columns: Vec<String>,
    pub histograms: Vec<ClassHistogram>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conformance: Option<ConformanceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditReport>,
}

/// Aligned text table: one row per class, one column per histogram, then
/// totals, images and drops.
pub fn render_table(columns: &[(&str, &ClassHistogram)]) -> String {
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Class".to_string())
        .chain(columns.iter().map(|(n, _)| n.to_string()))
        .collect()];
    for c in ClassLabel::ALL {
        rows.push(
            std::iter::once(c.name().to_string())
                .chain(columns.iter().map(|(_, h)| h.get(c).to_string()))
                .collect(),
        );
    }
    type Cell = fn(&ClassHistogram) -> u64;
    let summary: [(&str, Cell); 3] = [
        ("Total", ClassHistogram::object_total),
        ("Images", |h| h.total_images),
        ("Drops", |h| h.drops),
    ];
    for (name, f) in summary {
        rows.push(
            std::iter::once(name.to_string())
                .chain(columns.iter().map(|(_, h)| f(h).to_string()))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..=columns.len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (k, r) in rows.iter().enumerate() {
        let _ = write!(out, "{:<w$}", r[0], w = widths[0]);
        for (cell, w) in r.iter().zip(&widths).skip(1) {
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
        if k == 0 || k == ClassLabel::ALL.len() {
            let total: usize = widths.iter().sum::<usize>() + 2 * columns.len();
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
