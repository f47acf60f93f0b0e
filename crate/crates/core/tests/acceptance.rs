//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion; run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use patchsynth::annotation_io::ClassLabel;
use patchsynth::augmentation::{
    apply_chain, AugmentChain, AugmentOp, AugmentationConfig, OpConfig, Stage, StageConfig,
};
use patchsynth::compositor::{
    render, sample_plan, BackgroundModel, ClassSampler, CompositionConfig, CountSampler,
    OverlapPolicy, Preset,
};
use patchsynth::emitters::{
    mix_manifests, parse_yolo_line, required_real, yolo_line, ClassOrder, DatasetFormat,
    DatasetLayout, DatasetWriter, ManifestEntry, MixSpec, OutputManifest, Provenance,
};
use patchsynth::fixtures::{demo_dataset, demo_pool, demo_size_table};
use patchsynth::geometry::Rect;
use patchsynth::patch_extraction::extract_patch;
use patchsynth::seed;
use patchsynth::stats::{chi_square_critical, chi_square_statistic, conformance, ClassHistogram};
use patchsynth::stream::{self, GeneratorSpec};
use rand::Rng;

fn report(name: &str, pass: bool, detail: impl AsRef<str>) {
    println!(
        "{} {name}: {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn end_to_end_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    patchsynth::fixtures::write_demo_dataset(&data, 30, 3).unwrap();
    std::fs::write(
        data.join("pipeline.toml"),
        "seed = 0\npreset = \"detect-416\"\n[paths]\nmanifest = \"manifest.json\"\nsize_table = \"size_table.json\"\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let run = || {
        let t = Instant::now();
        let status = Command::new(env!("CARGO_BIN_EXE_patchsynth"))
            .args(["synth", "--count", "200", "--seed", "1234", "--config"])
            .arg(data.join("pipeline.toml"))
            .arg("--out")
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        let tree = read_tree(&out);
        std::fs::remove_dir_all(&out).unwrap();
        (tree, t.elapsed())
    };
    let (a, ta) = run();
    let (b, tb) = run();
    let pngs = a.keys().filter(|k| k.ends_with(".png")).count();
    let labels = a
        .keys()
        .filter(|k| k.ends_with(".txt") && k.starts_with("labels"))
        .count();
    let slowest = ta.max(tb);
    let pass = a == b
        && pngs == 200
        && labels == 200
        && a.contains_key("manifest.json")
        && slowest < Duration::from_secs(60);
    report(
        "end-to-end determinism",
        pass,
        format!(
            "{} files ({pngs} images, {labels} labels), trees identical: {}, slowest run {:.1}s (limit 60s)",
            a.len(),
            a == b,
            slowest.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Flat background, no artifacts, no post-paste photometric ops.
fn exact_label_config() -> CompositionConfig {
    let mut augmentation = AugmentationConfig::default();
    augmentation.post_paste.brightness = OpConfig::off();
    augmentation.post_paste.contrast = OpConfig::off();
    augmentation.post_paste.gaussian_noise = OpConfig::off();
    CompositionConfig {
        artifact_rate: 0.0,
        background: BackgroundModel::SampledConstant { range: [210, 235] },
        augmentation,
        ..CompositionConfig::preset(Preset::Detect416)
    }
}

fn violating_pixels(image: &RgbImage, background: Rgb<u8>, boxes: &[Rect]) -> usize {
    image
        .enumerate_pixels()
        .filter(|(x, y, p)| **p != background && !boxes.iter().any(|b| b.contains(*x, *y)))
        .count()
}

fn background_color(sample: &patchsynth::SyntheticSample) -> Rgb<u8> {
    match sample.plan.background {
        patchsynth::compositor::BackgroundRealization::Constant { gray } => Rgb([gray; 3]),
        ref other => panic!("expected flat background, got {other:?}"),
    }
}

#[test]
fn label_exactness() {
    let t = Instant::now();
    let spec = GeneratorSpec::new(exact_label_config(), demo_pool(7), 99).unwrap();
    let mut violations = 0usize;
    let mut boxes_total = 0usize;
    let mut non_background = 0usize;
    for i in 0..500 {
        let s = spec.sample_at(i).unwrap();
        let bg = background_color(&s);
        let rects: Vec<Rect> = s.boxes.iter().map(|b| b.rect).collect();
        boxes_total += rects.len();
        non_background += s.image.pixels().filter(|p| **p != bg).count();
        violations += violating_pixels(&s.image, bg, &rects);
    }
    let pass = violations == 0 && non_background > 0;
    report(
        "label exactness",
        pass,
        format!(
            "500 samples, {boxes_total} boxes, {non_background} non-background pixels, {violations} outside boxes (tolerance 0), {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Chi-square of jitter draws from `n` extractions against uniform over
/// nine equal bins of [0, 0.1]. Also returns the number of crops whose
/// dimensions fall outside [round(0.9 nominal), nominal].
fn jitter_run(master: u64, n: usize) -> (f64, usize, bool) {
    let (manifest, images) = demo_dataset(20, 5);
    let table = demo_size_table();
    let mut out_of_range = 0;
    let mut us = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % manifest.center_annotations.len();
        let ann = &manifest.center_annotations[k];
        let img = &images[&ann.image_id];
        let patch =
            extract_patch(img, k, ann, &table, &mut seed::substream(master, i as u64)).unwrap();
        let (nw, nh) = table.get(ann.class);
        let lo = |nominal: u32| (0.9 * f64::from(nominal)).round() as u32;
        let (w, h) = patch.pixels.dimensions();
        if !(lo(nw)..=nw).contains(&w)
            || !(lo(nh)..=nh).contains(&h)
            || patch.crop.w != w
            || patch.crop.h != h
        {
            out_of_range += 1;
        }
        us.push(patch.jitter_u);
    }
    let bins = 9usize;
    let mut observed = vec![0u64; bins];
    for u in &us {
        observed[((u / 0.1 * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let stat = chi_square_statistic(&observed, &vec![1.0 / bins as f64; bins]);
    (
        stat,
        out_of_range,
        us.iter().all(|u| (0.0..=0.1).contains(u)),
    )
}

#[test]
fn jitter_bounds() {
    let n = 10_000;
    let crit = chi_square_critical(8, 0.05).unwrap();
    // the seed `extract` uses for master seed 0
    let (stat, out_of_range, u_in_range) =
        jitter_run(seed::domain_seed(0, seed::Domain::Extraction), n);

    // calibration: over independent masters the test should reject about
    // 5% of the time; more than 15 of 100 has probability < 1e-4
    let rejections = (0..100u64)
        .filter(|&m| jitter_run(seed::mix64(m), 2_000).0 >= crit)
        .count();

    let pass = out_of_range == 0 && u_in_range && stat < crit && rejections <= 15;
    report(
        "jitter bounds",
        pass,
        format!(
            "{n} patches, {out_of_range} with dims outside [round(0.9 nominal), nominal]; \
             u chi-square {stat:.3} vs critical {crit} (df 8, alpha 0.05); \
             calibration: {rejections}/100 seeded runs reject (expected ~5)"
        ),
    );
    assert!(pass);
}

fn iou_oracle(a: &Rect, b: &Rect) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w).saturating_sub(a.x.max(b.x)) as f64;
    let iy = (a.y + a.h).min(b.y + b.h).saturating_sub(a.y.max(b.y)) as f64;
    let inter = ix * iy;
    inter / ((a.w * a.h) as f64 + (b.w * b.h) as f64 - inter)
}

#[test]
fn overlap_policy() {
    let pool = demo_pool(3);
    // dense: up to 30 objects of up to 42 px on 256 px
    let base = CompositionConfig {
        canvas: [256, 256],
        count: CountSampler::UniformRange { min: 10, max: 30 },
        artifact_rate: 3.0,
        ..CompositionConfig::preset(Preset::Detect416)
    };
    let mut results = Vec::new();
    for max_iou in [0.1, 0.0] {
        let config = Arc::new(CompositionConfig {
            overlap: OverlapPolicy {
                max_iou,
                ..OverlapPolicy::default()
            },
            ..base.clone()
        });
        let mut worst = 0.0f64;
        let mut intersecting = 0usize;
        let mut pairs = 0usize;
        let mut drops = 0usize;
        for s in 0..1000 {
            let plan = sample_plan(&config, &pool, seed::substream_seed(77, s)).unwrap();
            drops += plan.drops.len();
            let rects = plan.paste_rects();
            for i in 0..rects.len() {
                for j in i + 1..rects.len() {
                    pairs += 1;
                    worst = worst.max(iou_oracle(&rects[i], &rects[j]));
                    if iou_oracle(&rects[i], &rects[j]) > 0.0 {
                        intersecting += 1;
                    }
                }
            }
        }
        results.push((max_iou, worst, intersecting, pairs, drops));
    }
    let pass = results[0].1 <= 0.1 && results[1].2 == 0;
    report(
        "overlap policy",
        pass,
        results
            .iter()
            .map(|(m, w, i, p, d)| {
                format!("max_iou {m}: worst {w:.4} over {p} pairs, {i} intersecting, {d} drops")
            })
            .collect::<Vec<_>>()
            .join("; "),
    );
    assert!(pass);
}

#[test]
fn class_distribution_conformance() {
    let pool = demo_pool(11);
    let config = Arc::new(CompositionConfig {
        class_sampler: ClassSampler::Uniform,
        ..CompositionConfig::preset(Preset::Detect416)
    });
    let expected: BTreeMap<ClassLabel, f64> =
        ClassLabel::OBJECTS.into_iter().map(|c| (c, 0.2)).collect();
    let mut passes = 0;
    let mut min_placements = usize::MAX;
    let mut drops = 0usize;
    for run in 0..100u64 {
        let mut hist = ClassHistogram::default();
        let mut placements = 0usize;
        let mut i = 0u64;
        while placements < 10_000 {
            let plan =
                sample_plan(&config, &pool, seed::substream_seed(seed::mix64(run), i)).unwrap();
            drops += plan.drops.iter().filter(|d| d.class.is_object()).count();
            for p in plan.placements.iter().filter(|p| p.class.is_object()) {
                *hist.counts.get_mut(&p.class).unwrap() += 1;
                placements += 1;
            }
            i += 1;
        }
        min_placements = min_placements.min(placements);
        if conformance(&hist, &expected, 0.05).unwrap().pass {
            passes += 1;
        }
    }
    let pass = passes >= 95;
    report(
        "class-distribution conformance",
        pass,
        format!("{passes}/100 runs pass at alpha 0.05 (need >= 95); >= {min_placements} placements per run; {drops} object drops in total"),
    );
    assert!(pass);
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
                width: 416,
                height: 416,
                multilabel: "00000".into(),
                objects: 0,
                artifacts: 0,
                drops: 0,
            })
            .collect(),
    }
}

#[test]
fn mix_ratio() {
    let syn = fake_manifest(900, Provenance::Synthetic);
    let real = fake_manifest(1000, Provenance::Real);
    let mixed = mix_manifests(
        &syn,
        &real,
        &MixSpec {
            real_fraction: 0.1,
            seed: 5,
        },
    )
    .unwrap();
    let n_real = mixed
        .entries
        .iter()
        .filter(|e| e.provenance == Provenance::Real)
        .count();
    let distinct: std::collections::BTreeSet<&str> =
        mixed.entries.iter().map(|e| e.image.as_str()).collect();
    let exact = n_real == 100 && mixed.entries.len() == 1000 && distinct.len() == 1000;

    let mut rng = seed::stream(31);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut trials = 0;
    while trials < 2000 {
        let s = rng.random_range(0..3000usize);
        let avail = rng.random_range(0..3000usize);
        let f: f64 = rng.random_range(0.0..1.0);
        let Ok(r) = required_real(s, avail, f) else {
            continue;
        };
        trials += 1;
        let total = (r + s) as f64;
        if total > 0.0 {
            worst_excess = worst_excess.max((r as f64 / total - f).abs() - 1.0 / total);
        }
    }
    let pass = exact && n_real == 100 && worst_excess <= 0.0;
    report(
        "mix ratio",
        pass,
        format!(
            "900 + 1000 at 0.1 selected {n_real} real of {} entries; {trials} random sizes, max(|achieved - f| - 1/total) = {worst_excess:.3e} (must be <= 0)",
            mixed.entries.len()
        ),
    );
    assert!(pass);
}

#[test]
fn scale_parity() {
    let workers = 4;
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let spec = GeneratorSpec::new(
        CompositionConfig::preset(Preset::Detect416),
        demo_pool(1),
        8,
    )
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let mut writer = DatasetWriter::new(DatasetLayout::new(
        tmp.path(),
        DatasetFormat::YoloTxt,
        ClassOrder::default(),
    ))
    .unwrap();
    let total = 7_700u64;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .unwrap();
    let mut start = 0;
    while start < total {
        let n = (total - start).min(256);
        let samples = stream::batch(&spec, start, n as usize, workers).unwrap();
        pool.install(|| writer.push_samples(&samples)).unwrap();
        start += n;
    }
    let manifest = writer.finish().unwrap();
    let elapsed = t.elapsed();
    let dims_ok = manifest
        .entries
        .iter()
        .all(|e| (e.width, e.height) == (416, 416));
    let mean_objects =
        manifest.entries.iter().map(|e| e.objects).sum::<usize>() as f64 / total as f64;

    let bench = stream::bench(&spec, 400, workers).unwrap();
    let time_ok = elapsed < Duration::from_secs(600) && manifest.entries.len() == 7_700 && dims_ok;
    let efficiency_ok = bench.parallel_efficiency >= 0.6;
    let pass = time_ok && efficiency_ok;
    report(
        "scale parity",
        pass,
        format!(
            "7700 images 416x416 written in {:.1}s (limit 600s, mean {mean_objects:.2} objects); \
             efficiency at {workers} workers {:.3} (need >= 0.6) on a machine with {cpus} CPU(s)",
            elapsed.as_secs_f64(),
            bench.parallel_efficiency
        ),
    );
    assert!(time_ok);
    // Parallel efficiency is a property of the hardware as much as of the
    // code; with fewer than four cores it cannot be met and is only reported.
    if cpus >= workers {
        assert!(efficiency_ok);
    }
}

#[test]
fn yolo_round_trip() {
    let mut rng = seed::stream(17);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let w = rng.random_range(1..=4096u32);
        let h = rng.random_range(1..=4096u32);
        let bw = rng.random_range(1..=w);
        let bh = rng.random_range(1..=h);
        let x = rng.random_range(0..=w - bw);
        let y = rng.random_range(0..=h - bh);
        let line = yolo_line(0, &Rect::new(x, y, bw, bh), (w, h));
        let (px, py, pw, ph) = parse_yolo_line(&line).unwrap().to_pixels(w, h);
        for (got, want) in [(px, x), (py, y), (pw, bw), (ph, bh)] {
            worst = worst.max((got - f64::from(want)).abs());
        }
    }
    let pass = worst <= 0.5;
    report(
        "yolo round-trip",
        pass,
        format!("10000 boxes, worst coordinate error {worst:.4} px (limit 0.5)"),
    );
    assert!(pass);
}

fn random_image<R: Rng>(rng: &mut R) -> RgbImage {
    let (w, h) = (rng.random_range(1..=48), rng.random_range(1..=48));
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

fn chain(ops: Vec<AugmentOp>) -> AugmentChain {
    AugmentChain::new(Stage::PrePaste, ops).unwrap()
}

/// Reference index maps, written out pixel by pixel.
fn flip_h_ref(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        *img.get_pixel(img.width() - 1 - x, y)
    })
}

fn flip_v_ref(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        *img.get_pixel(x, img.height() - 1 - y)
    })
}

/// Clockwise quarter turn: output (x, y) takes input (y, H - 1 - x).
fn rot90_ref(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.height(), img.width(), |x, y| {
        *img.get_pixel(y, img.height() - 1 - x)
    })
}

#[test]
fn augmentation_algebra() {
    let mut rng = seed::stream(4242);
    let mut failures = Vec::new();
    let fh = chain(vec![AugmentOp::FlipH]);
    let fv = chain(vec![AugmentOp::FlipV]);
    let rot = |k| chain(vec![AugmentOp::Rotate90 { k }]);
    for i in 0..1000 {
        let img = random_image(&mut rng);
        let checks = [
            (
                "flip_h twice",
                apply_chain(&apply_chain(&img, &fh), &fh) == img,
            ),
            (
                "flip_v twice",
                apply_chain(&apply_chain(&img, &fv), &fv) == img,
            ),
            (
                "flip_h index map",
                apply_chain(&img, &fh) == flip_h_ref(&img),
            ),
            (
                "flip_v index map",
                apply_chain(&img, &fv) == flip_v_ref(&img),
            ),
            (
                "rot90 index map",
                apply_chain(&img, &rot(1)) == rot90_ref(&img),
            ),
            (
                "rot90 four times",
                (0..4).fold(img.clone(), |acc, _| apply_chain(&acc, &rot(1))) == img,
            ),
            (
                "rot180 = flip_h . flip_v",
                apply_chain(&img, &rot(2)) == flip_h_ref(&flip_v_ref(&img)),
            ),
            (
                "rot270 . rot90",
                apply_chain(&apply_chain(&img, &rot(1)), &rot(3)) == img,
            ),
        ];
        failures.extend(
            checks
                .iter()
                .filter(|(_, ok)| !ok)
                .map(|(n, _)| format!("image {i}: {n}")),
        );
    }

    // post-paste flips: the flipped render equals the exact index map of
    // the unflipped one, and its content stays inside the mapped boxes
    let pool = demo_pool(9);
    let mut post = StageConfig::disabled();
    post.flip_h = OpConfig::on(0.5, None);
    post.flip_v = OpConfig::on(0.5, None);
    let config = Arc::new(CompositionConfig {
        artifact_rate: 0.0,
        background: BackgroundModel::Constant { gray: 220 },
        augmentation: AugmentationConfig {
            pre_paste: StageConfig::geometric(0.5),
            post_paste: post,
        },
        ..CompositionConfig::preset(Preset::Detect416)
    });
    let mut flipped_plans = 0;
    let mut stray = 0usize;
    for s in 0..200 {
        let plan = sample_plan(&config, &pool, s).unwrap();
        if plan.post_paste_chain.is_empty() {
            continue;
        }
        flipped_plans += 1;
        let flipped = render(&plan, &pool).unwrap();
        let mut unflipped_plan = plan.clone();
        unflipped_plan.post_paste_chain = AugmentChain::empty(Stage::PostPaste);
        let unflipped = render(&unflipped_plan, &pool).unwrap();
        let mut expected = unflipped.image.clone();
        for op in &plan.post_paste_chain.ops {
            expected = match op {
                AugmentOp::FlipH => flip_h_ref(&expected),
                AugmentOp::FlipV => flip_v_ref(&expected),
                other => panic!("unexpected post op {other:?}"),
            };
        }
        if flipped.image != expected {
            failures.push(format!("plan {s}: flipped render is not the index map"));
        }
        let rects: Vec<Rect> = flipped.boxes.iter().map(|b| b.rect).collect();
        stray += violating_pixels(&flipped.image, Rgb([220; 3]), &rects);
    }
    let pass = failures.is_empty() && stray == 0 && flipped_plans > 0;
    report(
        "augmentation algebra",
        pass,
        format!(
            "1000 images x 8 identities, {} failures; {flipped_plans} post-flipped renders, {stray} relocated pixels outside mapped boxes",
            failures.len()
        ),
    );
    assert!(pass, "{failures:?}");
}
