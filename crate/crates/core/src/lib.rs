//! Deterministic copy-paste synthesis of labeled training images.
//!
//! Source fields of view carry only center-point annotations. This crate
//! cuts a class-sized patch around each center, composes random selections
//! of those patches onto blank canvases, and emits the exact labels that
//! follow from the composition: bounding boxes for detection and a presence
//! vector for multi-label classification.
//!
//! The pipeline is split into pure stages so that every synthetic image is
//! a function of `(config, pool, seed, index)`:
//!
//! - [`annotation_io`] parses and splits source manifests.
//! - [`patch_extraction`] crops jittered per-object patches into a [`PatchPool`].
//! - [`augmentation`] holds the seeded, label-preserving image transforms.
//! - [`compositor`] samples a [`CompositionPlan`] and renders it.
//! - [`stream`] addresses an unbounded sample sequence by index.
//! - [`emitters`] writes YOLO / COCO / multi-label datasets and mixes in real data.
//! - [`stats`] audits datasets and checks class-distribution conformance.
//! - [`cli`] wires the stages into the `patchsynth` command.

pub mod annotation_io;
pub mod augmentation;
pub mod cli;
pub mod compositor;
pub mod config;
pub mod emitters;
pub mod fixtures;
pub mod geometry;
pub mod patch_extraction;
pub mod seed;
pub mod stats;
pub mod stream;

pub use annotation_io::{ClassLabel, DatasetManifest};
pub use compositor::{CompositionConfig, CompositionPlan, Rect, SyntheticSample};
pub use patch_extraction::{Patch, PatchPool, SizeTable};
pub use stream::GeneratorSpec;
