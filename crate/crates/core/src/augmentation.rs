//! Seeded, label-preserving image augmentations.
//!
//! Geometric operations are restricted to flips and right-angle rotations,
//! so a pasted rectangle maps to an exact rectangle. Photometric operations
//! work on 8-bit channels and clamp instead of wrapping.

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Rect;
use crate::seed;

pub const BRIGHTNESS_LIMITS: [f64; 2] = [-0.2, 0.2];
pub const CONTRAST_LIMITS: [f64; 2] = [0.8, 1.25];
pub const NOISE_LIMITS: [f64; 2] = [0.0, 0.05];
pub const ROTATE_LIMITS: [f64; 2] = [1.0, 3.0];

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("augmentation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    FlipH,
    FlipV,
    /// `k` clockwise quarter turns, `k` in 1..=3.
    Rotate90 {
        k: u8,
    },
    /// Additive shift as a fraction of full range.
    Brightness {
        delta: f64,
    },
    /// Scale about mid-range (127.5).
    Contrast {
        factor: f64,
    },
    /// i.i.d. Gaussian noise, `sigma` as a fraction of full range. The seed
    /// makes the op a pure function of its parameters.
    GaussianNoise {
        sigma: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    FlipH,
    FlipV,
    Rotate90,
    Brightness,
    Contrast,
    GaussianNoise,
}

impl AugmentOp {
    pub fn kind(&self) -> OpKind {
        match self {
            AugmentOp::FlipH => OpKind::FlipH,
            AugmentOp::FlipV => OpKind::FlipV,
            AugmentOp::Rotate90 { .. } => OpKind::Rotate90,
            AugmentOp::Brightness { .. } => OpKind::Brightness,
            AugmentOp::Contrast { .. } => OpKind::Contrast,
            AugmentOp::GaussianNoise { .. } => OpKind::GaussianNoise,
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            AugmentOp::FlipH | AugmentOp::FlipV | AugmentOp::Rotate90 { .. }
        )
    }

    fn check(&self) -> Result<(), AugmentError> {
        let within = |v: f64, [lo, hi]: [f64; 2], name: &str| {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(AugmentError::Config(format!(
                    "{name} {v} outside [{lo}, {hi}]"
                )))
            }
        };
        match *self {
            AugmentOp::FlipH | AugmentOp::FlipV => Ok(()),
            AugmentOp::Rotate90 { k } => within(f64::from(k), ROTATE_LIMITS, "rotate90 k"),
            AugmentOp::Brightness { delta } => within(delta, BRIGHTNESS_LIMITS, "brightness"),
            AugmentOp::Contrast { factor } => within(factor, CONTRAST_LIMITS, "contrast"),
            AugmentOp::GaussianNoise { sigma, .. } => within(sigma, NOISE_LIMITS, "noise sigma"),
        }
    }

    /// Where `rect` lands after this op on a `dims` canvas, and the new
    /// canvas dimensions.
    pub fn map_rect(&self, rect: Rect, dims: (u32, u32)) -> (Rect, (u32, u32)) {
        let (w, h) = dims;
        match *self {
            AugmentOp::FlipH => (Rect::new(w - rect.x - rect.w, rect.y, rect.w, rect.h), dims),
            AugmentOp::FlipV => (Rect::new(rect.x, h - rect.y - rect.h, rect.w, rect.h), dims),
            AugmentOp::Rotate90 { k: 1 } => (
                Rect::new(h - rect.y - rect.h, rect.x, rect.h, rect.w),
                (h, w),
            ),
            AugmentOp::Rotate90 { k: 2 } => (
                Rect::new(w - rect.x - rect.w, h - rect.y - rect.h, rect.w, rect.h),
                dims,
            ),
            AugmentOp::Rotate90 { k: 3 } => (
                Rect::new(rect.y, w - rect.x - rect.w, rect.h, rect.w),
                (h, w),
            ),
            AugmentOp::Rotate90 { .. } => (rect, dims),
            _ => (rect, dims),
        }
    }

    pub fn apply(&self, image: RgbImage) -> RgbImage {
        use image::imageops;
        match *self {
            AugmentOp::FlipH => imageops::flip_horizontal(&image),
            AugmentOp::FlipV => imageops::flip_vertical(&image),
            AugmentOp::Rotate90 { k } => match k % 4 {
                1 => imageops::rotate90(&image),
                2 => imageops::rotate180(&image),
                3 => imageops::rotate270(&image),
                _ => image,
            },
            AugmentOp::Brightness { delta } => {
                let shift = delta * 255.0;
                map_channels(image, |v| v + shift)
            }
            AugmentOp::Contrast { factor } => map_channels(image, |v| (v - 127.5) * factor + 127.5),
            AugmentOp::GaussianNoise { sigma, seed } => {
                if sigma == 0.0 {
                    return image;
                }
                let normal = Normal::new(0.0, sigma * 255.0).expect("sigma is finite and positive");
                let mut rng = seed::stream(seed);
                map_channels(image, |v| v + normal.sample(&mut rng))
            }
        }
    }
}

fn map_channels(mut image: RgbImage, mut f: impl FnMut(f64) -> f64) -> RgbImage {
    for v in image.iter_mut() {
        *v = f(f64::from(*v)).round().clamp(0.0, 255.0) as u8;
    }
    image
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PrePaste,
    PostPaste,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentChain {
    pub stage: Stage,
    pub ops: Vec<AugmentOp>,
}

impl AugmentChain {
    pub fn empty(stage: Stage) -> Self {
        AugmentChain { stage, ops: vec![] }
    }

    /// Checks parameter ranges and that no kind appears twice.
    pub fn new(stage: Stage, ops: Vec<AugmentOp>) -> Result<Self, AugmentError> {
        for (i, op) in ops.iter().enumerate() {
            op.check()?;
            if ops[..i].iter().any(|o| o.kind() == op.kind()) {
                return Err(AugmentError::Config(format!(
                    "{:?} appears twice",
                    op.kind()
                )));
            }
        }
        Ok(AugmentChain { stage, ops })
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn output_dims(&self, dims: (u32, u32)) -> (u32, u32) {
        self.ops.iter().fold(dims, |d, op| match op {
            AugmentOp::Rotate90 { k } if k % 2 == 1 => (d.1, d.0),
            _ => d,
        })
    }

    /// Map a rectangle through every geometric op of the chain.
    pub fn map_rect(&self, rect: Rect, dims: (u32, u32)) -> Rect {
        self.ops
            .iter()
            .fold((rect, dims), |(r, d), op| op.map_rect(r, d))
            .0
    }
}

/// Apply ops in order. Pure in `(image, chain)`.
pub fn apply_chain(image: &RgbImage, chain: &AugmentChain) -> RgbImage {
    chain
        .ops
        .iter()
        .fold(image.clone(), |img, op| op.apply(img))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub probability: f64,
    /// Parameter range `[lo, hi]`; ignored for flips.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
}

impl OpConfig {
    pub fn off() -> Self {
        OpConfig {
            enabled: false,
            probability: 0.0,
            range: None,
        }
    }

    pub fn on(probability: f64, range: Option<[f64; 2]>) -> Self {
        OpConfig {
            enabled: true,
            probability,
            range,
        }
    }

    fn active(&self) -> bool {
        self.enabled && self.probability > 0.0
    }

    fn range_or(&self, limits: [f64; 2]) -> [f64; 2] {
        self.range.unwrap_or(limits)
    }

    fn check(&self, name: &str, limits: Option<[f64; 2]>) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(AugmentError::Config(format!(
                "{name} probability {} outside [0, 1]",
                self.probability
            )));
        }
        if let (Some([lo, hi]), Some([min, max])) = (self.range, limits) {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(AugmentError::Config(format!(
                    "{name} range [{lo}, {hi}] inverted"
                )));
            }
            if lo < min || hi > max {
                return Err(AugmentError::Config(format!(
                    "{name} range [{lo}, {hi}] outside [{min}, {max}]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-op switches for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub flip_h: OpConfig,
    pub flip_v: OpConfig,
    pub rotate90: OpConfig,
    pub brightness: OpConfig,
    pub contrast: OpConfig,
    pub gaussian_noise: OpConfig,
}

impl StageConfig {
    pub fn disabled() -> Self {
        StageConfig {
            flip_h: OpConfig::off(),
            flip_v: OpConfig::off(),
            rotate90: OpConfig::off(),
            brightness: OpConfig::off(),
            contrast: OpConfig::off(),
            gaussian_noise: OpConfig::off(),
        }
    }

    /// Flips and right-angle rotations only.
    pub fn geometric(probability: f64) -> Self {
        StageConfig {
            flip_h: OpConfig::on(probability, None),
            flip_v: OpConfig::on(probability, None),
            rotate90: OpConfig::on(probability, Some(ROTATE_LIMITS)),
            ..Self::disabled()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        self.flip_h.check("flip_h", None)?;
        self.flip_v.check("flip_v", None)?;
        self.rotate90.check("rotate90", Some(ROTATE_LIMITS))?;
        self.brightness
            .check("brightness", Some(BRIGHTNESS_LIMITS))?;
        self.contrast.check("contrast", Some(CONTRAST_LIMITS))?;
        self.gaussian_noise
            .check("gaussian_noise", Some(NOISE_LIMITS))
    }

    /// True when an enabled op can change the canvas shape.
    pub fn may_transpose(&self) -> bool {
        self.rotate90.active()
    }

    /// True when an enabled op touches pixel values.
    pub fn is_photometric(&self) -> bool {
        self.brightness.active() || self.contrast.active() || self.gaussian_noise.active()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub pre_paste: StageConfig,
    pub post_paste: StageConfig,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            pre_paste: StageConfig {
                flip_h: OpConfig::on(0.5, None),
                flip_v: OpConfig::on(0.5, None),
                rotate90: OpConfig::on(0.5, Some(ROTATE_LIMITS)),
                brightness: OpConfig::on(0.3, Some([-0.1, 0.1])),
                contrast: OpConfig::on(0.3, Some([0.9, 1.1])),
                gaussian_noise: OpConfig::off(),
            },
            post_paste: StageConfig {
                flip_h: OpConfig::on(0.5, None),
                flip_v: OpConfig::on(0.5, None),
                rotate90: OpConfig::on(0.5, Some(ROTATE_LIMITS)),
                brightness: OpConfig::on(0.2, Some([-0.05, 0.05])),
                contrast: OpConfig::on(0.2, Some([0.9, 1.1])),
                gaussian_noise: OpConfig::on(0.3, Some([0.0, 0.02])),
            },
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            pre_paste: StageConfig::disabled(),
            post_paste: StageConfig::disabled(),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        self.pre_paste.validate()?;
        self.post_paste.validate()
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::PrePaste => &self.pre_paste,
            Stage::PostPaste => &self.post_paste,
        }
    }
}

/// Draw a chain: each enabled op is included independently with its
/// probability, in the fixed order flip_h, flip_v, rotate90, brightness,
/// contrast, noise. Parameters are uniform over the configured range.
pub fn sample_chain<R: Rng + ?Sized>(
    config: &StageConfig,
    stage: Stage,
    rng: &mut R,
) -> Result<AugmentChain, AugmentError> {
    config.validate()?;
    let mut ops = Vec::new();
    let hit = |c: &OpConfig, rng: &mut R| c.enabled && rng.random::<f64>() < c.probability;

    if hit(&config.flip_h, rng) {
        ops.push(AugmentOp::FlipH);
    }
    if hit(&config.flip_v, rng) {
        ops.push(AugmentOp::FlipV);
    }
    if hit(&config.rotate90, rng) {
        let [lo, hi] = config.rotate90.range_or(ROTATE_LIMITS);
        let k = rng.random_range(lo.ceil() as u8..=hi.floor() as u8);
        ops.push(AugmentOp::Rotate90 { k });
    }
    if hit(&config.brightness, rng) {
        let [lo, hi] = config.brightness.range_or(BRIGHTNESS_LIMITS);
        ops.push(AugmentOp::Brightness {
            delta: rng.random_range(lo..=hi),
        });
    }
    if hit(&config.contrast, rng) {
        let [lo, hi] = config.contrast.range_or(CONTRAST_LIMITS);
        ops.push(AugmentOp::Contrast {
            factor: rng.random_range(lo..=hi),
        });
    }
    if hit(&config.gaussian_noise, rng) {
        let [lo, hi] = config.gaussian_noise.range_or(NOISE_LIMITS);
        let sigma = rng.random_range(lo..=hi);
        ops.push(AugmentOp::GaussianNoise {
            sigma,
            seed: rng.random(),
        });
    }
    AugmentChain::new(stage, ops)
}
