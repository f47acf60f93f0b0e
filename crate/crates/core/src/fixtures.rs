//! Procedural toy fields of view for tests and demos.
//!
//! Objects are drawn as filled discs with a class-specific color and radius
//! on a noisy gray background. The images look nothing like real urine
//! sediment; they only exercise the pipeline end to end with annotations
//! that are exact by construction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::annotation_io::{
    BoxAnnotation, CenterAnnotation, ClassLabel, DatasetManifest, SourceImageRecord,
};
use crate::emitters::encode_png;
use crate::patch_extraction::{build_patch_pool, PatchPool, SizeTable};
use crate::seed;

pub const DEMO_FOV: (u32, u32) = (320, 240);

fn style(class: ClassLabel) -> (Rgb<u8>, u32) {
    match class {
        ClassLabel::Bacteria => (Rgb([60, 90, 60]), 4),
        ClassLabel::Crystal => (Rgb([230, 230, 120]), 14),
        ClassLabel::Rbc => (Rgb([200, 80, 80]), 12),
        ClassLabel::Wbc => (Rgb([120, 120, 200]), 17),
        ClassLabel::Yeast => (Rgb([170, 140, 90]), 9),
        ClassLabel::Artifact => (Rgb([90, 90, 90]), 11),
    }
}

/// Size table matching the disc radii of the toy images.
pub fn demo_size_table() -> SizeTable {
    SizeTable::new(
        ClassLabel::ALL
            .into_iter()
            .map(|c| {
                let side = 2 * style(c).1 + 8;
                (c, (side, side))
            })
            .collect(),
    )
    .expect("all classes covered")
}

fn draw_disc(img: &mut RgbImage, cx: i64, cy: i64, r: u32, color: Rgb<u8>) {
    let r = i64::from(r);
    for y in (cy - r).max(0)..(cy + r + 1).min(i64::from(img.height())) {
        for x in (cx - r).max(0)..(cx + r + 1).min(i64::from(img.width())) {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// `n_images` toy FOVs spread over `n_images / 2` (at least one) sample ids,
/// with both center and box annotations. Images are returned keyed by id.
pub fn demo_dataset(n_images: usize, seed: u64) -> (DatasetManifest, BTreeMap<String, RgbImage>) {
    let mut rng = seed::stream(seed);
    let (w, h) = DEMO_FOV;
    let n_samples = (n_images / 2).max(1);
    let mut manifest = DatasetManifest::default();
    let mut images = BTreeMap::new();
    for i in 0..n_images {
        let id = format!("fov{i:04}");
        let mut img = RgbImage::from_fn(w, h, |_, _| {
            let v = rng.random_range(205..=225u8);
            Rgb([v, v, v])
        });
        let n_objects = rng.random_range(3..=8);
        for k in 0..n_objects {
            let class = if k == 0 {
                ClassLabel::ALL[i % ClassLabel::ALL.len()]
            } else {
                ClassLabel::ALL[rng.random_range(0..ClassLabel::ALL.len())]
            };
            let (color, r) = style(class);
            let cx = rng.random_range(r..w - r);
            let cy = rng.random_range(r..h - r);
            draw_disc(&mut img, i64::from(cx), i64::from(cy), r, color);
            manifest.center_annotations.push(CenterAnnotation {
                image_id: id.clone(),
                x: i64::from(cx),
                y: i64::from(cy),
                class,
            });
            manifest.box_annotations.push(BoxAnnotation {
                image_id: id.clone(),
                x: i64::from(cx - r),
                y: i64::from(cy - r),
                w: i64::from(2 * r + 1),
                h: i64::from(2 * r + 1),
                class,
            });
        }
        manifest.records.push(SourceImageRecord {
            image_id: id.clone(),
            sample_id: format!("sample{:03}", i % n_samples),
            path: format!("fov/{id}.png"),
            width: w,
            height: h,
        });
        images.insert(id, img);
    }
    (manifest, images)
}

/// Patch pool cut from a small toy dataset.
pub fn demo_pool(seed: u64) -> PatchPool {
    let (manifest, images) = demo_dataset(12, seed);
    let build = build_patch_pool(&manifest, &demo_size_table(), seed, &images);
    assert!(
        build.failures.is_empty(),
        "demo extraction failed: {:?}",
        build.failures
    );
    build.pool
}

/// Write a toy dataset to `dir`: `manifest.json`, `size_table.json` and the
/// images under `fov/`.
pub fn write_demo_dataset(
    dir: &Path,
    n_images: usize,
    seed: u64,
) -> std::io::Result<DatasetManifest> {
    let (manifest, images) = demo_dataset(n_images, seed);
    fs::create_dir_all(dir.join("fov"))?;
    for r in &manifest.records {
        fs::write(dir.join(&r.path), encode_png(&images[&r.image_id]))?;
    }
    fs::write(dir.join("manifest.json"), manifest.to_json())?;
    fs::write(dir.join("size_table.json"), demo_size_table().to_json())?;
    Ok(manifest)
}
