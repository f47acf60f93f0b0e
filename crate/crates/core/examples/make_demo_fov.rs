//! Writes a toy source dataset plus a pipeline config:
//!
//!     cargo run --example make_demo_fov -- /tmp/demo [n_images] [seed]

use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "demo".into()));
    let n: usize = args.next().map_or(40, |s| s.parse().expect("n_images"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));

    let manifest = patchsynth::fixtures::write_demo_dataset(&dir, n, seed)?;
    std::fs::write(
        dir.join("pipeline.toml"),
        format!(
            "seed = {seed}\npreset = \"detect-416\"\n\n[paths]\nmanifest = \"manifest.json\"\n\
             size_table = \"size_table.json\"\npool_cache = \"pool\"\noutput = \"synth\"\n"
        ),
    )?;
    println!(
        "wrote {} images with {} centers to {}",
        manifest.records.len(),
        manifest.center_annotations.len(),
        dir.display()
    );
    Ok(())
}
