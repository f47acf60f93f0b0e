//! Source manifests: image records grouped by sample, with center and box
//! annotations.
//!
//! JSON is the canonical manifest format. Annotation tables exported from
//! labeling tools can be supplied as CSV and attached to a JSON manifest
//! with [`DatasetManifest::attach`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Object classes. The first five are objects of interest; `Artifact` marks
/// debris that is extracted and pasted as a distractor but never labeled by
/// default.
///
/// Declaration order is the canonical (alphabetical) label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassLabel {
    Bacteria,
    Crystal,
    Rbc,
    Wbc,
    Yeast,
    Artifact,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 6] = [
        ClassLabel::Bacteria,
        ClassLabel::Crystal,
        ClassLabel::Rbc,
        ClassLabel::Wbc,
        ClassLabel::Yeast,
        ClassLabel::Artifact,
    ];

    /// The label space of emitted targets, in presence-vector bit order.
    pub const OBJECTS: [ClassLabel; 5] = [
        ClassLabel::Bacteria,
        ClassLabel::Crystal,
        ClassLabel::Rbc,
        ClassLabel::Wbc,
        ClassLabel::Yeast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Bacteria => "BACTERIA",
            ClassLabel::Crystal => "CRYSTAL",
            ClassLabel::Rbc => "RBC",
            ClassLabel::Wbc => "WBC",
            ClassLabel::Yeast => "YEAST",
            ClassLabel::Artifact => "ARTIFACT",
        }
    }

    pub fn is_object(self) -> bool {
        self != ClassLabel::Artifact
    }

    /// Position in the five-bit presence vector, `None` for artifacts.
    pub fn object_index(self) -> Option<usize> {
        Self::OBJECTS.iter().position(|&c| c == self)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassLabel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown class {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceImageRecord {
    #[serde(rename = "id")]
    pub image_id: String,
    /// Patient / urine-sample grouping. Splits never separate a sample.
    pub sample_id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CenterAnnotation {
    pub image_id: String,
    pub x: i64,
    pub y: i64,
    pub class: ClassLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub class: ClassLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "images")]
    pub records: Vec<SourceImageRecord>,
    #[serde(rename = "centers", default)]
    pub center_annotations: Vec<CenterAnnotation>,
    #[serde(rename = "boxes", default)]
    pub box_annotations: Vec<BoxAnnotation>,
    #[serde(rename = "meta", default)]
    pub metadata: BTreeMap<String, String>,
}

/// Where in an input a syntax error was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Locus {
    Json { line: usize, column: usize },
    Csv { record: u64, line: u64 },
    Unknown,
}

impl fmt::Display for Locus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Locus::Json { line, column } => write!(f, "line {line}, column {column}"),
            Locus::Csv { record, line } => write!(f, "record {record} (line {line})"),
            Locus::Unknown => f.write_str("unknown position"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Center,
    Box,
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotationKind::Center => "center",
            AnnotationKind::Box => "box",
        })
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("syntax error at {locus}: {message}")]
    Syntax { locus: Locus, message: String },
    #[error("{kind} annotation #{index} references unknown image_id {image_id:?}")]
    Referential {
        kind: AnnotationKind,
        index: usize,
        image_id: String,
    },
    #[error("{kind} annotation #{index} out of bounds: {message}")]
    Bounds {
        kind: AnnotationKind,
        index: usize,
        message: String,
    },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    DuplicateImageId,
    MissingSampleId,
    EmptyDimensions,
    ReferentialError,
    BoundsError,
    DuplicateAnnotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    pub kind: IssueKind,
    pub severity: Severity,
    /// `images[3]`, `centers[12]`, ...
    pub locus: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Warning)
    }

    pub fn is_valid(&self) -> bool {
        self.errors().next().is_none()
    }
}

/// Parsed CSV annotation table; the header decides the kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotationTable {
    Centers(Vec<CenterAnnotation>),
    Boxes(Vec<BoxAnnotation>),
}

impl DatasetManifest {
    pub fn record(&self, image_id: &str) -> Option<&SourceImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn record_index(&self) -> HashMap<&str, &SourceImageRecord> {
        self.records
            .iter()
            .map(|r| (r.image_id.as_str(), r))
            .collect()
    }

    pub fn sample_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.sample_id.as_str()).collect()
    }

    /// Append CSV annotations, then re-check the whole manifest.
    pub fn attach(mut self, table: AnnotationTable) -> Result<Self, ManifestError> {
        match table {
            AnnotationTable::Centers(c) => self.center_annotations.extend(c),
            AnnotationTable::Boxes(b) => self.box_annotations.extend(b),
        }
        check(&self)?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization is infallible")
    }
}

/// Parse a JSON manifest and enforce its invariants.
pub fn parse_manifest<R: Read>(input: R) -> Result<DatasetManifest, ManifestError> {
    let manifest: DatasetManifest =
        serde_json::from_reader(input).map_err(|e| ManifestError::Syntax {
            locus: if e.line() > 0 {
                Locus::Json {
                    line: e.line(),
                    column: e.column(),
                }
            } else {
                Locus::Unknown
            },
            message: e.to_string(),
        })?;
    check(&manifest)?;
    Ok(manifest)
}

pub fn parse_manifest_str(input: &str) -> Result<DatasetManifest, ManifestError> {
    parse_manifest(input.as_bytes())
}

#[derive(Deserialize)]
struct CenterRow {
    image_id: String,
    x: i64,
    y: i64,
    class: String,
}

#[derive(Deserialize)]
struct BoxRow {
    image_id: String,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    class: String,
}

const CENTER_HEADER: [&str; 4] = ["image_id", "x", "y", "class"];
const BOX_HEADER: [&str; 6] = ["image_id", "x", "y", "w", "h", "class"];

/// Parse a center (`image_id,x,y,class`) or box (`image_id,x,y,w,h,class`)
/// annotation table. References are not resolved here.
pub fn parse_annotation_csv<R: Read>(input: R) -> Result<AnnotationTable, ManifestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    if header == CENTER_HEADER {
        let mut out = Vec::new();
        for row in reader.deserialize::<CenterRow>() {
            let row = row.map_err(csv_error)?;
            let class = parse_class(&row.class, out.len() + 1)?;
            out.push(CenterAnnotation {
                image_id: row.image_id,
                x: row.x,
                y: row.y,
                class,
            });
        }
        Ok(AnnotationTable::Centers(out))
    } else if header == BOX_HEADER {
        let mut out = Vec::new();
        for row in reader.deserialize::<BoxRow>() {
            let row = row.map_err(csv_error)?;
            let class = parse_class(&row.class, out.len() + 1)?;
            out.push(BoxAnnotation {
                image_id: row.image_id,
                x: row.x,
                y: row.y,
                w: row.w,
                h: row.h,
                class,
            });
        }
        Ok(AnnotationTable::Boxes(out))
    } else {
        Err(ManifestError::Syntax {
            locus: Locus::Csv { record: 0, line: 1 },
            message: format!(
                "unrecognized header {:?}; expected {:?} or {:?}",
                header.join(","),
                CENTER_HEADER.join(","),
                BOX_HEADER.join(",")
            ),
        })
    }
}

fn parse_class(name: &str, record: usize) -> Result<ClassLabel, ManifestError> {
    name.trim()
        .parse()
        .map_err(|message| ManifestError::Syntax {
            // data records start on line 2
            locus: Locus::Csv {
                record: record as u64,
                line: record as u64 + 1,
            },
            message,
        })
}

fn csv_error(e: csv::Error) -> ManifestError {
    let locus = match e.position() {
        Some(p) => Locus::Csv {
            record: p.record(),
            line: p.line(),
        },
        None => Locus::Unknown,
    };
    ManifestError::Syntax {
        locus,
        message: e.to_string(),
    }
}

/// Convert the first error of the validation report into a hard failure.
fn check(manifest: &DatasetManifest) -> Result<(), ManifestError> {
    let report = validate_manifest(manifest);
    let Some(issue) = report.errors().next() else {
        return Ok(());
    };
    let locate = |locus: &str| -> (AnnotationKind, usize) {
        let kind = if locus.starts_with("boxes") {
            AnnotationKind::Box
        } else {
            AnnotationKind::Center
        };
        let index = locus
            .trim_end_matches(']')
            .rsplit('[')
            .next()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        (kind, index)
    };
    Err(match issue.kind {
        IssueKind::ReferentialError => {
            let (kind, index) = locate(&issue.locus);
            let image_id = match kind {
                AnnotationKind::Center => manifest.center_annotations[index].image_id.clone(),
                AnnotationKind::Box => manifest.box_annotations[index].image_id.clone(),
            };
            ManifestError::Referential {
                kind,
                index,
                image_id,
            }
        }
        IssueKind::BoundsError => {
            let (kind, index) = locate(&issue.locus);
            ManifestError::Bounds {
                kind,
                index,
                message: issue.message.clone(),
            }
        }
        _ => ManifestError::Invalid(format!("{}: {}", issue.locus, issue.message)),
    })
}

/// List every invariant violation. Errors make the manifest unusable;
/// warnings (duplicate identical annotations) are informational.
pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    let mut issues = Vec::new();
    let mut push = |kind, severity, locus: String, message: String| {
        issues.push(ValidationIssue {
            kind,
            severity,
            locus,
            message,
        })
    };

    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if let Some(first) = seen.insert(r.image_id.as_str(), i) {
            push(
                IssueKind::DuplicateImageId,
                Severity::Error,
                format!("images[{i}]"),
                format!(
                    "duplicate image id {:?} (first at images[{first}])",
                    r.image_id
                ),
            );
        }
        if r.sample_id.trim().is_empty() {
            push(
                IssueKind::MissingSampleId,
                Severity::Error,
                format!("images[{i}]"),
                format!("image {:?} has no sample_id", r.image_id),
            );
        }
        if r.width == 0 || r.height == 0 {
            push(
                IssueKind::EmptyDimensions,
                Severity::Error,
                format!("images[{i}]"),
                format!(
                    "image {:?} has dimensions {}x{}",
                    r.image_id, r.width, r.height
                ),
            );
        }
    }

    // First record wins for lookups when ids are duplicated.
    let mut index: HashMap<&str, &SourceImageRecord> = HashMap::new();
    for r in &manifest.records {
        index.entry(r.image_id.as_str()).or_insert(r);
    }

    let mut seen_centers: HashSet<&CenterAnnotation> = HashSet::new();
    for (i, c) in manifest.center_annotations.iter().enumerate() {
        let locus = format!("centers[{i}]");
        let Some(r) = index.get(c.image_id.as_str()) else {
            push(
                IssueKind::ReferentialError,
                Severity::Error,
                locus,
                format!("unknown image_id {:?}", c.image_id),
            );
            continue;
        };
        if c.x < 0 || c.y < 0 || c.x >= i64::from(r.width) || c.y >= i64::from(r.height) {
            push(
                IssueKind::BoundsError,
                Severity::Error,
                locus,
                format!(
                    "center ({}, {}) outside {}x{} image {:?}",
                    c.x, c.y, r.width, r.height, c.image_id
                ),
            );
        } else if !seen_centers.insert(c) {
            push(
                IssueKind::DuplicateAnnotation,
                Severity::Warning,
                locus,
                format!(
                    "duplicate center ({}, {}, {}) on {:?}",
                    c.x, c.y, c.class, c.image_id
                ),
            );
        }
    }

    for (i, b) in manifest.box_annotations.iter().enumerate() {
        let locus = format!("boxes[{i}]");
        let Some(r) = index.get(b.image_id.as_str()) else {
            push(
                IssueKind::ReferentialError,
                Severity::Error,
                locus,
                format!("unknown image_id {:?}", b.image_id),
            );
            continue;
        };
        let inside = b.w > 0
            && b.h > 0
            && b.x >= 0
            && b.y >= 0
            && b.x + b.w <= i64::from(r.width)
            && b.y + b.h <= i64::from(r.height);
        if !inside {
            push(
                IssueKind::BoundsError,
                Severity::Error,
                locus,
                format!(
                    "box ({}, {}, {}, {}) not a positive-area rect inside {}x{} image {:?}",
                    b.x, b.y, b.w, b.h, r.width, r.height, b.image_id
                ),
            );
        }
    }

    ValidationReport { issues }
}

/// Half-up rounding used for all count and size arithmetic.
pub(crate) fn round_half_up(v: f64) -> u64 {
    (v + 0.5).floor().max(0.0) as u64
}

/// Split by sample (patient) so no sample contributes images to both sides.
///
/// Exactly `round_half_up(test_fraction * samples)` sample ids go to test.
/// Sample ids are shuffled from their sorted order, so the partition depends
/// only on the set of ids, the fraction and the seed.
pub fn split_by_sample(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), ManifestError> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(ManifestError::Invalid(format!(
            "test fraction {test_fraction} outside [0, 1]"
        )));
    }
    let mut samples: Vec<&str> = manifest.sample_ids().into_iter().collect();
    let n_test = round_half_up(test_fraction * samples.len() as f64) as usize;
    samples.shuffle(&mut seed::stream(seed));
    let test_samples: HashSet<&str> = samples[..n_test].iter().copied().collect();

    let test_images: HashSet<&str> = manifest
        .records
        .iter()
        .filter(|r| test_samples.contains(r.sample_id.as_str()))
        .map(|r| r.image_id.as_str())
        .collect();

    let side = |in_test: bool| DatasetManifest {
        records: manifest
            .records
            .iter()
            .filter(|r| test_images.contains(r.image_id.as_str()) == in_test)
            .cloned()
            .collect(),
        center_annotations: manifest
            .center_annotations
            .iter()
            .filter(|a| test_images.contains(a.image_id.as_str()) == in_test)
            .cloned()
            .collect(),
        box_annotations: manifest
            .box_annotations
            .iter()
            .filter(|a| test_images.contains(a.image_id.as_str()) == in_test)
            .cloned()
            .collect(),
        metadata: manifest.metadata.clone(),
    };
    Ok((side(false), side(true)))
}
