//! Composition of synthetic images from a patch pool.
//!
//! Generation is split in two: [`sample_plan`] makes every random choice
//! (object count, classes, patches, augmentations, positions, background)
//! and records it in a [`CompositionPlan`]; [`render`] turns a plan into
//! pixels and labels without consuming any randomness. A plan therefore
//! reproduces its image exactly, and labels are derived from the same
//! rectangles the pixels were pasted into.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation_io::{ClassLabel, DatasetManifest};
use crate::augmentation::{
    apply_chain, sample_chain, AugmentChain, AugmentError, AugmentationConfig, Stage,
};
pub use crate::geometry::{pairwise_iou, Rect};
use crate::patch_extraction::PatchPool;
use crate::seed;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("no usable object class: every sampled class has an empty patch pool")]
    EmptyPool,
    #[error("plan references {class} patch #{index}, which the pool does not hold")]
    StalePlan { class: ClassLabel, index: usize },
    #[error("plan placement of {class} patch #{index} does not match the augmented patch size")]
    SizeMismatch { class: ClassLabel, index: usize },
    #[error("composition config: {0}")]
    Config(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// How many objects of interest go into one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CountSampler {
    /// Uniform over `min..=max`.
    UniformRange { min: u32, max: u32 },
    /// Resample per-image object counts observed in a source manifest.
    Empirical { counts: Vec<u32> },
}

impl CountSampler {
    pub fn empirical_from(manifest: &DatasetManifest) -> Self {
        let mut per_image: BTreeMap<&str, u32> = manifest
            .records
            .iter()
            .map(|r| (r.image_id.as_str(), 0))
            .collect();
        for a in &manifest.center_annotations {
            if a.class.is_object() {
                if let Some(n) = per_image.get_mut(a.image_id.as_str()) {
                    *n += 1;
                }
            }
        }
        // manifest order, not id order
        let counts = manifest
            .records
            .iter()
            .map(|r| per_image[r.image_id.as_str()])
            .collect();
        CountSampler::Empirical { counts }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            CountSampler::UniformRange { min, max } => rng.random_range(*min..=*max),
            CountSampler::Empirical { counts } => counts[rng.random_range(0..counts.len())],
        }
    }

    fn validate(&self) -> Result<(), ComposeError> {
        match self {
            CountSampler::UniformRange { min, max } if min > max => Err(ComposeError::Config(
                format!("count range [{min}, {max}] inverted"),
            )),
            CountSampler::Empirical { counts } if counts.is_empty() => Err(ComposeError::Config(
                "empirical count sampler has no observations".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Which class each object of interest is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassSampler {
    /// Equal probability over the object classes that have patches.
    Uniform,
    /// Class frequencies, e.g. from the source annotations. Weights need not
    /// be normalized.
    Empirical { weights: BTreeMap<ClassLabel, f64> },
}

impl ClassSampler {
    pub fn empirical_from(manifest: &DatasetManifest) -> Self {
        let mut weights: BTreeMap<ClassLabel, f64> =
            ClassLabel::OBJECTS.into_iter().map(|c| (c, 0.0)).collect();
        for a in &manifest.center_annotations {
            if let Some(w) = weights.get_mut(&a.class) {
                *w += 1.0;
            }
        }
        ClassSampler::Empirical { weights }
    }

    fn validate(&self) -> Result<(), ComposeError> {
        if let ClassSampler::Empirical { weights } = self {
            if weights.contains_key(&ClassLabel::Artifact) {
                return Err(ComposeError::Config(
                    "artifacts are controlled by artifact_rate, not class weights".into(),
                ));
            }
            if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(ComposeError::Config(
                    "class weights must be finite and >= 0".into(),
                ));
            }
            if !weights.values().any(|w| *w > 0.0) {
                return Err(ComposeError::Config("all class weights are zero".into()));
            }
        }
        Ok(())
    }

    /// Object classes that can be drawn given the pool, with their weights.
    pub fn support(&self, pool: &PatchPool) -> Vec<(ClassLabel, f64)> {
        ClassLabel::OBJECTS
            .into_iter()
            .filter(|&c| !pool.class(c).is_empty())
            .filter_map(|c| match self {
                ClassSampler::Uniform => Some((c, 1.0)),
                ClassSampler::Empirical { weights } => weights
                    .get(&c)
                    .copied()
                    .filter(|w| *w > 0.0)
                    .map(|w| (c, w)),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapPolicy {
    /// Maximum IoU between any two paste rectangles.
    pub max_iou: f64,
    /// Position draws per object before it is dropped.
    pub max_attempts: u32,
}

impl Default for OverlapPolicy {
    fn default() -> Self {
        OverlapPolicy {
            max_iou: 0.1,
            max_attempts: 50,
        }
    }
}

/// The blank canvas objects are pasted onto. Gray levels are 8-bit, noise
/// sigma is a fraction of full range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackgroundModel {
    Constant { gray: u8 },
    SampledConstant { range: [u8; 2] },
    ConstantPlusNoise { gray: u8, sigma: f64 },
}

impl Default for BackgroundModel {
    fn default() -> Self {
        BackgroundModel::SampledConstant { range: [210, 235] }
    }
}

impl BackgroundModel {
    fn validate(&self) -> Result<(), ComposeError> {
        match *self {
            BackgroundModel::SampledConstant { range: [lo, hi] } if lo > hi => Err(
                ComposeError::Config(format!("background range [{lo}, {hi}] inverted")),
            ),
            BackgroundModel::ConstantPlusNoise { sigma, .. } if !(0.0..=1.0).contains(&sigma) => {
                Err(ComposeError::Config(format!(
                    "background sigma {sigma} outside [0, 1]"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BackgroundRealization {
        match *self {
            BackgroundModel::Constant { gray } => BackgroundRealization::Constant { gray },
            BackgroundModel::SampledConstant { range: [lo, hi] } => {
                BackgroundRealization::Constant {
                    gray: rng.random_range(lo..=hi),
                }
            }
            BackgroundModel::ConstantPlusNoise { gray, sigma } => BackgroundRealization::Noisy {
                gray,
                sigma,
                seed: rng.random(),
            },
        }
    }

    /// True when every realization is a single flat gray level.
    pub fn is_flat(&self) -> bool {
        !matches!(self, BackgroundModel::ConstantPlusNoise { sigma, .. } if *sigma > 0.0)
    }
}

/// A background with all randomness resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundRealization {
    Constant { gray: u8 },
    Noisy { gray: u8, sigma: f64, seed: u64 },
}

impl BackgroundRealization {
    pub fn render(&self, (width, height): (u32, u32)) -> RgbImage {
        match *self {
            BackgroundRealization::Constant { gray } => {
                RgbImage::from_pixel(width, height, Rgb([gray; 3]))
            }
            BackgroundRealization::Noisy { gray, sigma, seed } => {
                let mut img = RgbImage::from_pixel(width, height, Rgb([gray; 3]));
                if sigma > 0.0 {
                    let normal = Normal::new(0.0, sigma * 255.0).expect("validated sigma");
                    let mut rng = seed::stream(seed);
                    for v in img.iter_mut() {
                        *v = (f64::from(*v) + normal.sample(&mut rng))
                            .round()
                            .clamp(0.0, 255.0) as u8;
                    }
                }
                img
            }
        }
    }
}

/// Draw a background and render it.
pub fn realize_background<R: Rng + ?Sized>(
    model: &BackgroundModel,
    canvas: (u32, u32),
    rng: &mut R,
) -> RgbImage {
    model.sample(rng).render(canvas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    /// `[width, height]` in pixels.
    pub canvas: [u32; 2],
    pub count: CountSampler,
    pub class_sampler: ClassSampler,
    /// Expected artifact (distractor) patches per image; Poisson distributed.
    pub artifact_rate: f64,
    pub overlap: OverlapPolicy,
    pub background: BackgroundModel,
    pub augmentation: AugmentationConfig,
    /// Emit boxes for artifact placements as a sixth class.
    #[serde(default)]
    pub label_artifacts: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// 384 x 384 canvases for multi-label classification.
    #[serde(rename = "weak-384")]
    Weak384,
    /// 416 x 416 canvases for detection.
    #[serde(rename = "detect-416")]
    Detect416,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weak-384" => Ok(Preset::Weak384),
            "detect-416" => Ok(Preset::Detect416),
            other => Err(format!(
                "unknown preset {other:?} (expected weak-384 or detect-416)"
            )),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Weak384 => "weak-384",
            Preset::Detect416 => "detect-416",
        }
    }

    pub fn canvas(self) -> [u32; 2] {
        match self {
            Preset::Weak384 => [384, 384],
            Preset::Detect416 => [416, 416],
        }
    }
}

impl CompositionConfig {
    pub fn preset(preset: Preset) -> Self {
        let count = match preset {
            Preset::Weak384 => CountSampler::UniformRange { min: 1, max: 12 },
            Preset::Detect416 => CountSampler::UniformRange { min: 1, max: 19 },
        };
        CompositionConfig {
            canvas: preset.canvas(),
            count,
            class_sampler: ClassSampler::Uniform,
            artifact_rate: 2.0,
            overlap: OverlapPolicy::default(),
            background: BackgroundModel::default(),
            augmentation: AugmentationConfig::default(),
            label_artifacts: false,
        }
    }

    pub fn canvas_dims(&self) -> (u32, u32) {
        (self.canvas[0], self.canvas[1])
    }

    pub fn validate(&self) -> Result<(), ComposeError> {
        let [w, h] = self.canvas;
        if w == 0 || h == 0 {
            return Err(ComposeError::Config(format!("canvas {w}x{h} is empty")));
        }
        self.count.validate()?;
        self.class_sampler.validate()?;
        if !self.artifact_rate.is_finite() || self.artifact_rate < 0.0 {
            return Err(ComposeError::Config(format!(
                "artifact_rate {} must be finite and >= 0",
                self.artifact_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap.max_iou) {
            return Err(ComposeError::Config(format!(
                "max_iou {} outside [0, 1]",
                self.overlap.max_iou
            )));
        }
        if self.overlap.max_attempts == 0 {
            return Err(ComposeError::Config("max_attempts must be >= 1".into()));
        }
        self.background.validate()?;
        self.augmentation.validate()?;
        if w != h && self.augmentation.post_paste.may_transpose() {
            return Err(ComposeError::Config(format!(
                "post-paste rotate90 would transpose the non-square {w}x{h} canvas"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub class: ClassLabel,
    pub pool_index: usize,
    /// Top-left corner on the canvas.
    pub position: (u32, u32),
    /// Patch size after its pre-paste chain.
    pub pasted_size: (u32, u32),
    pub pre_paste_chain: AugmentChain,
}

impl PlacedObject {
    pub fn rect(&self) -> Rect {
        Rect::new(
            self.position.0,
            self.position.1,
            self.pasted_size.0,
            self.pasted_size.1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// No position within the attempt budget satisfied the overlap limit.
    OverlapExhausted,
    /// The augmented patch is larger than the canvas.
    TooLarge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedObject {
    pub class: ClassLabel,
    pub pool_index: usize,
    pub reason: DropReason,
}

/// Every random decision behind one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionPlan {
    pub config: Arc<CompositionConfig>,
    /// Paste order; later placements are drawn over earlier ones.
    pub placements: Vec<PlacedObject>,
    pub background: BackgroundRealization,
    pub post_paste_chain: AugmentChain,
    pub plan_seed: u64,
    pub drops: Vec<DroppedObject>,
    /// Placements whose patch was already used earlier in this plan.
    pub reused_patches: usize,
}

impl CompositionPlan {
    pub fn canvas(&self) -> (u32, u32) {
        self.config.canvas_dims()
    }

    /// Paste rectangles of all placements (artifacts included) in final,
    /// post-augmentation canvas coordinates.
    pub fn paste_rects(&self) -> Vec<Rect> {
        self.placements
            .iter()
            .map(|p| self.post_paste_chain.map_rect(p.rect(), self.canvas()))
            .collect()
    }

    pub fn artifact_count(&self) -> usize {
        self.placements
            .iter()
            .filter(|p| !p.class.is_object())
            .count()
    }
}

/// Try up to `max_attempts` uniformly drawn fully-on-canvas positions.
fn place<R: Rng + ?Sized>(
    size: (u32, u32),
    canvas: (u32, u32),
    placed: &[PlacedObject],
    policy: &OverlapPolicy,
    rng: &mut R,
) -> Option<(u32, u32)> {
    for _ in 0..policy.max_attempts {
        let x = rng.random_range(0..=canvas.0 - size.0);
        let y = rng.random_range(0..=canvas.1 - size.1);
        let candidate = Rect::new(x, y, size.0, size.1);
        if placed
            .iter()
            .all(|p| pairwise_iou(&candidate, &p.rect()) <= policy.max_iou)
        {
            return Some((x, y));
        }
    }
    None
}

/// Sample a plan from the stream seeded by `plan_seed`.
pub fn sample_plan(
    config: &Arc<CompositionConfig>,
    pool: &PatchPool,
    plan_seed: u64,
) -> Result<CompositionPlan, ComposeError> {
    config.validate()?;
    let support = config.class_sampler.support(pool);
    if support.is_empty() {
        return Err(ComposeError::EmptyPool);
    }
    let class_index = WeightedIndex::new(support.iter().map(|(_, w)| *w))
        .map_err(|e| ComposeError::Config(e.to_string()))?;

    let mut rng = seed::stream(plan_seed);
    let canvas = config.canvas_dims();
    let background = config.background.sample(&mut rng);

    let mut placements: Vec<PlacedObject> = Vec::new();
    let mut drops = Vec::new();
    let mut try_place = |class: ClassLabel,
                         rng: &mut seed::Stream,
                         placements: &mut Vec<PlacedObject>|
     -> Result<(), ComposeError> {
        let candidates = pool.class(class);
        let pool_index = rng.random_range(0..candidates.len());
        let chain = sample_chain(&config.augmentation.pre_paste, Stage::PrePaste, rng)?;
        let pasted_size = chain.output_dims(candidates[pool_index].pixels.dimensions());
        let reason = if pasted_size.0 > canvas.0 || pasted_size.1 > canvas.1 {
            Some(DropReason::TooLarge)
        } else {
            match place(pasted_size, canvas, placements, &config.overlap, rng) {
                Some(position) => {
                    placements.push(PlacedObject {
                        class,
                        pool_index,
                        position,
                        pasted_size,
                        pre_paste_chain: chain,
                    });
                    None
                }
                None => Some(DropReason::OverlapExhausted),
            }
        };
        if let Some(reason) = reason {
            drops.push(DroppedObject {
                class,
                pool_index,
                reason,
            });
        }
        Ok(())
    };

    let n_objects = config.count.sample(&mut rng);
    for _ in 0..n_objects {
        let class = support[class_index.sample(&mut rng)].0;
        try_place(class, &mut rng, &mut placements)?;
    }

    let artifacts = pool.class(ClassLabel::Artifact);
    let n_artifacts = if config.artifact_rate > 0.0 && !artifacts.is_empty() {
        let poisson =
            Poisson::new(config.artifact_rate).map_err(|e| ComposeError::Config(e.to_string()))?;
        poisson.sample(&mut rng) as u32
    } else {
        0
    };
    for _ in 0..n_artifacts {
        try_place(ClassLabel::Artifact, &mut rng, &mut placements)?;
    }

    let post_paste_chain =
        sample_chain(&config.augmentation.post_paste, Stage::PostPaste, &mut rng)?;

    let mut seen = HashSet::new();
    let reused_patches = placements
        .iter()
        .filter(|p| !seen.insert((p.class, p.pool_index)))
        .count();

    Ok(CompositionPlan {
        config: Arc::clone(config),
        placements,
        background,
        post_paste_chain,
        plan_seed,
        drops,
        reused_patches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class: ClassLabel,
    pub rect: Rect,
}

/// Presence bits ordered BACTERIA, CRYSTAL, RBC, WBC, YEAST.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiLabel(pub [bool; 5]);

impl MultiLabel {
    pub fn from_boxes(boxes: &[BoundingBox]) -> Self {
        let mut bits = [false; 5];
        for b in boxes {
            if let Some(i) = b.class.object_index() {
                bits[i] = true;
            }
        }
        MultiLabel(bits)
    }

    pub fn contains(&self, class: ClassLabel) -> bool {
        class.object_index().is_some_and(|i| self.0[i])
    }

    /// `"00100"` for RBC only.
    pub fn bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bits(s: &str) -> Option<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 5 {
            return None;
        }
        let mut bits = [false; 5];
        for (b, c) in bits.iter_mut().zip(chars) {
            *b = match c {
                '0' => false,
                '1' => true,
                _ => return None,
            };
        }
        Some(MultiLabel(bits))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub boxes: Vec<BoundingBox>,
    pub multilabel: MultiLabel,
    pub plan: CompositionPlan,
}

/// Wall-clock time spent per generation stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub plan: Duration,
    pub augment: Duration,
    pub paste: Duration,
    pub encode: Duration,
}

impl std::ops::AddAssign for StageTimes {
    fn add_assign(&mut self, o: Self) {
        self.plan += o.plan;
        self.augment += o.augment;
        self.paste += o.paste;
        self.encode += o.encode;
    }
}

/// Rasterize a plan. Consumes no randomness.
pub fn render(plan: &CompositionPlan, pool: &PatchPool) -> Result<SyntheticSample, ComposeError> {
    render_timed(plan, pool, &mut StageTimes::default())
}

pub fn render_timed(
    plan: &CompositionPlan,
    pool: &PatchPool,
    times: &mut StageTimes,
) -> Result<SyntheticSample, ComposeError> {
    let canvas_dims = plan.canvas();
    let t = Instant::now();
    let mut canvas = plan.background.render(canvas_dims);
    times.paste += t.elapsed();

    for p in &plan.placements {
        let patch = pool
            .get(p.class, p.pool_index)
            .ok_or(ComposeError::StalePlan {
                class: p.class,
                index: p.pool_index,
            })?;
        let t = Instant::now();
        let pixels = if p.pre_paste_chain.is_empty() {
            std::borrow::Cow::Borrowed(&patch.pixels)
        } else {
            std::borrow::Cow::Owned(apply_chain(&patch.pixels, &p.pre_paste_chain))
        };
        times.augment += t.elapsed();
        if pixels.dimensions() != p.pasted_size || !p.rect().fits_in(canvas_dims.0, canvas_dims.1) {
            return Err(ComposeError::SizeMismatch {
                class: p.class,
                index: p.pool_index,
            });
        }
        let t = Instant::now();
        image::imageops::replace(
            &mut canvas,
            pixels.as_ref(),
            i64::from(p.position.0),
            i64::from(p.position.1),
        );
        times.paste += t.elapsed();
    }

    let t = Instant::now();
    if !plan.post_paste_chain.is_empty() {
        canvas = apply_chain(&canvas, &plan.post_paste_chain);
    }
    times.augment += t.elapsed();

    let label_artifacts = plan.config.label_artifacts;
    let boxes: Vec<BoundingBox> = plan
        .placements
        .iter()
        .filter(|p| p.class.is_object() || label_artifacts)
        .map(|p| BoundingBox {
            class: p.class,
            rect: plan.post_paste_chain.map_rect(p.rect(), canvas_dims),
        })
        .collect();
    Ok(SyntheticSample {
        image: canvas,
        multilabel: MultiLabel::from_boxes(&boxes),
        boxes,
        plan: plan.clone(),
    })
}
