use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchsynth::emitters::{OutputManifest, Provenance};

fn patchsynth(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchsynth"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PATCHSYNTH_WORKERS")
        .output()
        .unwrap()
}

fn demo(dir: &Path) -> PathBuf {
    patchsynth::fixtures::write_demo_dataset(dir, 16, 2).unwrap();
    let config = dir.join("pipeline.toml");
    std::fs::write(
        &config,
        "seed = 5\npreset = \"detect-416\"\n\n[paths]\nmanifest = \"manifest.json\"\n\
         size_table = \"size_table.json\"\npool_cache = \"pool\"\noutput = \"synth\"\n",
    )
    .unwrap();
    config
}

fn error_report(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON in {text}"));
    serde_json::from_str(line).unwrap()
}

#[test]
fn count_zero_gives_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    demo(tmp.path());
    let out = patchsynth(
        &["synth", "--config", "pipeline.toml", "--count", "0"],
        tmp.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = OutputManifest::read(&tmp.path().join("synth")).unwrap();
    assert!(m.entries.is_empty());
    assert!(tmp.path().join("synth/images").is_dir());
    assert!(tmp.path().join("synth/labels").is_dir());
    assert!(tmp.path().join("synth/provenance.toml").is_file());
}

#[test]
fn pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    demo(dir);

    let out = patchsynth(&["validate", "--config", "pipeline.toml"], dir);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["valid"], true);

    let out = patchsynth(
        &[
            "split",
            "--config",
            "pipeline.toml",
            "--test-fraction",
            "0.25",
            "--out",
            "split",
        ],
        dir,
    );
    assert!(out.status.success());
    let train: patchsynth::DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("split/train.json")).unwrap())
            .unwrap();
    let test: patchsynth::DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("split/test.json")).unwrap())
            .unwrap();
    assert_eq!(train.records.len() + test.records.len(), 16);
    assert!(train.sample_ids().is_disjoint(&test.sample_ids()));
    assert_eq!(test.sample_ids().len(), 2, "round_half_up(0.25 * 8)");

    assert!(patchsynth(&["extract", "--config", "pipeline.toml"], dir)
        .status
        .success());
    assert!(dir.join("pool/index.json").is_file());

    let out = patchsynth(
        &[
            "synth",
            "--config",
            "pipeline.toml",
            "--count",
            "12",
            "--workers",
            "2",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(patchsynth(
        &["export-real", "--config", "pipeline.toml", "--out", "real"],
        dir
    )
    .status
    .success());
    let out = patchsynth(
        &[
            "mix",
            "--config",
            "pipeline.toml",
            "--synthetic",
            "synth",
            "--real",
            "real",
            "--real-fraction",
            "0.2",
            "--out",
            "mixed",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mixed = OutputManifest::read(&dir.join("mixed")).unwrap();
    // r / (r + 12) = 0.2  =>  r = 3
    assert_eq!(
        mixed
            .entries
            .iter()
            .filter(|e| e.provenance == Provenance::Real)
            .count(),
        3
    );

    let out = patchsynth(
        &[
            "stats",
            "--config",
            "pipeline.toml",
            "--json",
            "synth",
            "mixed",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["datasets"][0]["histogram"]["total_images"], 12);
    assert_eq!(report["datasets"][1]["histogram"]["total_images"], 15);
    assert!(report["datasets"][0]["conformance"]["statistic"].is_number());
    let out = patchsynth(&["stats", "--config", "pipeline.toml", "synth"], dir);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("Class"));
    assert!(table.lines().any(|l| l.starts_with("RBC")));

    let out = patchsynth(
        &[
            "mix",
            "--config",
            "pipeline.toml",
            "--synthetic",
            "synth",
            "--real",
            "real",
            "--real-fraction",
            "0.9",
            "--out",
            "m2",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(3));
    let err = error_report(&out);
    assert_eq!(err["error"]["kind"], "data");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("max achievable"));
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn flags_and_config_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    demo(dir);
    std::fs::write(
        dir.join("full.toml"),
        "seed = 9\ncount = 6\npreset = \"weak-384\"\n\n[paths]\nmanifest = \"manifest.json\"\n\
         size_table = \"size_table.json\"\noutput = \"a\"\n\n[emitter]\nformat = \"coco_json\"\n\
         class_order = [\"BACTERIA\", \"CRYSTAL\", \"RBC\", \"WBC\", \"YEAST\"]\n",
    )
    .unwrap();
    assert!(patchsynth(&["synth", "--config", "full.toml"], dir)
        .status
        .success());
    let out = patchsynth(
        &[
            "synth",
            "--config",
            "pipeline.toml",
            "--seed",
            "9",
            "--count",
            "6",
            "--preset",
            "weak-384",
            "--format",
            "coco_json",
            "--out",
            "b",
        ],
        dir,
    );
    assert!(out.status.success());
    let strip = |t: Vec<(String, Vec<u8>)>| {
        t.into_iter()
            .filter(|(n, _)| n != "provenance.toml")
            .collect::<Vec<_>>()
    };
    let (a, b) = (tree(&dir.join("a")), tree(&dir.join("b")));
    assert_eq!(strip(a), strip(b));

    // the provenance record alone reproduces the run
    let prov = dir.join("a/provenance.toml");
    let before = tree(&dir.join("a"));
    std::fs::copy(&prov, dir.join("prov.toml")).unwrap();
    std::fs::remove_dir_all(dir.join("a")).unwrap();
    assert!(patchsynth(&["synth", "--config", "prov.toml"], dir)
        .status
        .success());
    assert_eq!(tree(&dir.join("a")), before);
}

#[test]
fn worker_count_does_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    demo(dir);
    for (w, out) in [("1", "w1"), ("3", "w3")] {
        let o = patchsynth(
            &[
                "synth",
                "--config",
                "pipeline.toml",
                "--count",
                "10",
                "--workers",
                w,
                "--out",
                out,
            ],
            dir,
        );
        assert!(o.status.success());
    }
    let strip = |t: Vec<(String, Vec<u8>)>| {
        t.into_iter()
            .filter(|(n, _)| n != "provenance.toml")
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(tree(&dir.join("w1"))), strip(tree(&dir.join("w3"))));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    demo(dir);

    // config: no count
    let out = patchsynth(&["synth", "--config", "pipeline.toml"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_report(&out)["error"]["kind"], "config");
    assert_eq!(error_report(&out)["error"]["subcommand"], "synth");

    // config: unparseable flag value and unknown key
    assert_eq!(
        patchsynth(&["synth", "--preset", "huge"], dir)
            .status
            .code(),
        Some(2)
    );
    std::fs::write(
        dir.join("bad.toml"),
        "seed = 1\npreset = \"detect-416\"\nbogus = 1\n",
    )
    .unwrap();
    assert_eq!(
        patchsynth(&["validate", "--config", "bad.toml"], dir)
            .status
            .code(),
        Some(2)
    );

    // data: dangling annotation
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    std::fs::write(
        dir.join("manifest.json"),
        text.replacen("\"image_id\": \"fov0000\"", "\"image_id\": \"nope\"", 1),
    )
    .unwrap();
    let out = patchsynth(&["validate", "--config", "pipeline.toml"], dir);
    assert_eq!(out.status.code(), Some(3));

    // io: manifest missing
    std::fs::remove_file(dir.join("manifest.json")).unwrap();
    let out = patchsynth(&["validate", "--config", "pipeline.toml"], dir);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_report(&out)["error"]["kind"], "io");
}

#[test]
fn stats_reports_corrupted_label() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    demo(dir);
    assert!(
        patchsynth(&["synth", "--config", "pipeline.toml", "--count", "3"], dir)
            .status
            .success()
    );
    let label = dir.join("synth/labels/img_000002.txt");
    let text = std::fs::read_to_string(&label).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut f: Vec<&str> = lines[0].split(' ').collect();
    f[3] = "0.000000";
    lines[0] = f.join(" ");
    std::fs::write(&label, lines.join("\n") + "\n").unwrap();

    let out = patchsynth(&["stats", "--json", "synth"], dir);
    assert_eq!(out.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let findings = report["datasets"][0]["audit"]["findings"]
        .as_array()
        .unwrap();
    assert_eq!(findings.len(), 1, "{findings:?}");
    assert_eq!(findings[0]["kind"], "non_positive_area");
    assert_eq!(findings[0]["line"], 1);
    assert!(findings[0]["path"]
        .as_str()
        .unwrap()
        .ends_with("img_000002.txt"));
}

#[test]
fn bench_without_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = patchsynth(&["bench", "--count", "8", "--workers", "2"], tmp.path());
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["parallel"]["workers"], 2);
    assert!(report["parallel_efficiency"].as_f64().unwrap() > 0.0);
}
