//! The `patchsynth` command.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 I/O error.
//! Failures print a JSON object `{"error": {...}}` on stderr.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::annotation_io::{
    parse_annotation_csv, parse_manifest, split_by_sample, validate_manifest, ClassLabel,
    DatasetManifest, ManifestError,
};
use crate::compositor::{ClassSampler, ComposeError, Preset};
use crate::config::{ConfigError, PipelineConfig, PROVENANCE_FILE};
use crate::emitters::{
    mix_datasets, write_real_dataset, DatasetFormat, DatasetLayout, DatasetWriter, EmitError,
    MixSpec, OutputManifest, Provenance,
};
use crate::patch_extraction::{
    build_patch_pool, load_pool_cache, save_pool_cache, DirImageSource, PatchError, PatchPool,
    SizeTable, POOL_INDEX_FILE,
};
use crate::seed::{domain_seed, Domain};
use crate::stats::{self, ClassHistogram, StatsError};
use crate::stream::{self, GeneratorSpec};

pub const WORKERS_ENV: &str = "PATCHSYNTH_WORKERS";

/// Images rendered per chunk during `synth`.
const SYNTH_CHUNK: usize = 256;

#[derive(Debug, Parser)]
#[command(
    name = "patchsynth",
    version,
    about = "Copy-paste synthesis of labeled microscopy datasets"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of images (synth) or samples (bench).
    #[arg(long, global = true)]
    pub count: Option<u64>,
    /// Canvas preset: weak-384 or detect-416. Replaces any [composition] table.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// Worker threads.
    #[arg(long, global = true, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    /// Label format: yolo_txt, coco_json or multilabel_csv.
    #[arg(long, global = true)]
    pub format: Option<DatasetFormat>,
    /// Fraction of real images in a mixed set.
    #[arg(long, global = true)]
    pub real_fraction: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a source manifest and its annotations.
    Validate,
    /// Split the source manifest by sample id into train/test manifests.
    Split {
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Cut the patch pool and write it as a cache directory.
    Extract,
    /// Generate a synthetic dataset.
    Synth,
    /// Export the box-annotated source images as a dataset for mixing.
    ExportReal,
    /// Mix a real dataset into a synthetic one.
    Mix {
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        real: Option<PathBuf>,
    },
    /// Class counts, label audit and conformance for datasets.
    Stats {
        /// Dataset directories; defaults to the configured output.
        datasets: Vec<PathBuf>,
        /// Print JSON instead of the text table.
        #[arg(long)]
        json: bool,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Measure generation throughput and parallel efficiency.
    Bench,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Split { .. } => "split",
            Command::Extract => "extract",
            Command::Synth => "synth",
            Command::ExportReal => "export-real",
            Command::Mix { .. } => "mix",
            Command::Stats { .. } => "stats",
            Command::Bench => "bench",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Data,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Io => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            kind: ErrorKind::Io,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        let kind = match e {
            ManifestError::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Data,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<PatchError> for CliError {
    fn from(e: PatchError) -> Self {
        let kind = match e {
            PatchError::Io { .. } => ErrorKind::Io,
            PatchError::SizeTable(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<ComposeError> for CliError {
    fn from(e: ComposeError) -> Self {
        let kind = match e {
            ComposeError::Config(_) | ComposeError::Augment(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<EmitError> for CliError {
    fn from(e: EmitError) -> Self {
        let kind = match e {
            EmitError::Io { .. } => ErrorKind::Io,
            EmitError::InvalidFraction(_) | EmitError::ClassOrder(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        let kind = match e {
            StatsError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Data,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let name = cli.command.name();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let report = json!({
                "error": {
                    "subcommand": name,
                    "kind": e.kind,
                    "exit_code": e.kind.exit_code(),
                    "message": e.message,
                }
            });
            eprintln!("{report}");
            e.kind.exit_code()
        }
    }
}

/// Config file (if any) with flag overrides applied.
pub fn resolve_config(global: &GlobalArgs) -> CliResult<PipelineConfig> {
    let mut config = match &global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(count) = global.count {
        config.count = Some(count);
    }
    if let Some(preset) = global.preset {
        config.preset = preset;
        config.composition = None;
    }
    if let Some(format) = global.format {
        config.emitter.format = format;
    }
    if let Some(f) = global.real_fraction {
        config.mix.real_fraction = Some(f);
    }
    if let Some(out) = &global.out {
        config.paths.output = Some(absolute(out));
    }
    config.validate()?;
    Ok(config)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn workers(global: &GlobalArgs) -> usize {
    global
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn execute(cli: Cli) -> CliResult<()> {
    let config = resolve_config(&cli.global)?;
    let workers = workers(&cli.global);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    let name = cli.command.name();
    pool.install(|| match cli.command {
        Command::Validate => cmd_validate(&config),
        Command::Split { test_fraction } => cmd_split(&config, test_fraction, workers),
        Command::Extract => cmd_extract(&config, workers),
        Command::Synth => cmd_synth(&config, workers),
        Command::ExportReal => cmd_export_real(&config, workers),
        Command::Mix { synthetic, real } => cmd_mix(&config, synthetic, real, workers),
        Command::Stats {
            datasets,
            json,
            alpha,
        } => cmd_stats(&config, datasets, json, alpha),
        Command::Bench => cmd_bench(&config, workers),
    })
    .map_err(|mut e| {
        e.message = format!("{name}: {}", e.message);
        e
    })
}

fn load_manifest(config: &PipelineConfig) -> CliResult<DatasetManifest> {
    let path = config.require(&config.paths.manifest, "paths.manifest")?;
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut manifest = parse_manifest(std::io::BufReader::new(file))
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    for csv in [&config.paths.centers_csv, &config.paths.boxes_csv]
        .into_iter()
        .flatten()
    {
        let file = fs::File::open(csv).map_err(|e| CliError::io(csv, e))?;
        let table = parse_annotation_csv(std::io::BufReader::new(file))
            .map_err(|e| CliError::data(format!("{}: {e}", csv.display())))?;
        manifest = manifest.attach(table)?;
    }
    Ok(manifest)
}

fn images_root(config: &PipelineConfig) -> CliResult<PathBuf> {
    if let Some(root) = &config.paths.images_root {
        return Ok(root.clone());
    }
    let manifest = config.require(&config.paths.manifest, "paths.manifest")?;
    Ok(manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn output_dir(config: &PipelineConfig) -> CliResult<&Path> {
    Ok(config.require(
        &config.paths.output,
        "output directory (--out or paths.output)",
    )?)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_provenance(
    dir: &Path,
    config: &PipelineConfig,
    subcommand: &str,
    workers: usize,
) -> CliResult<()> {
    write_file(
        &dir.join(PROVENANCE_FILE),
        config.provenance(subcommand, workers),
    )
}

/// Write to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: Serialize>(v: &T) {
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(v).expect("report serializes")
    ));
}

fn cmd_validate(config: &PipelineConfig) -> CliResult<()> {
    let manifest = load_manifest(config)?;
    let report = validate_manifest(&manifest);
    print_json(&json!({
        "valid": report.is_valid(),
        "images": manifest.records.len(),
        "centers": manifest.center_annotations.len(),
        "boxes": manifest.box_annotations.len(),
        "issues": report.issues,
    }));
    if report.is_valid() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "{} validation error(s)",
            report.errors().count()
        )))
    }
}

fn ensure_valid(manifest: &DatasetManifest) -> CliResult<()> {
    let report = validate_manifest(manifest);
    let errors: Vec<_> = report.errors().collect();
    match errors.first() {
        None => Ok(()),
        Some(first) => Err(CliError::data(format!(
            "manifest invalid ({} error(s)); first: {}: {}",
            errors.len(),
            first.locus,
            first.message
        ))),
    }
}

fn cmd_split(config: &PipelineConfig, test_fraction: Option<f64>, workers: usize) -> CliResult<()> {
    let mut config = config.clone();
    if let Some(f) = test_fraction {
        config.split.test_fraction = f;
        config.validate()?;
    }
    let manifest = load_manifest(&config)?;
    ensure_valid(&manifest)?;
    let (train, test) = split_by_sample(
        &manifest,
        config.split.test_fraction,
        domain_seed(config.seed, Domain::Split),
    )?;
    let out = output_dir(&config)?;
    write_file(&out.join("train.json"), train.to_json())?;
    write_file(&out.join("test.json"), test.to_json())?;
    write_provenance(out, &config, "split", workers)?;
    print_json(&json!({
        "train": {"images": train.records.len(), "samples": train.sample_ids().len()},
        "test": {"images": test.records.len(), "samples": test.sample_ids().len()},
    }));
    Ok(())
}

fn size_table(config: &PipelineConfig) -> CliResult<SizeTable> {
    let path = config.require(&config.paths.size_table, "paths.size_table")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    SizeTable::from_json(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct ExtractSummary<'a> {
    patches: BTreeMap<ClassLabel, usize>,
    failures: &'a [crate::patch_extraction::ExtractionFailure],
}

fn extract(
    config: &PipelineConfig,
) -> CliResult<(PatchPool, Vec<crate::patch_extraction::ExtractionFailure>)> {
    let manifest = load_manifest(config)?;
    ensure_valid(&manifest)?;
    let table = size_table(config)?;
    let source = DirImageSource::new(images_root(config)?);
    let build = build_patch_pool(
        &manifest,
        &table,
        domain_seed(config.seed, Domain::Extraction),
        &source,
    );
    Ok((build.pool, build.failures))
}

fn cmd_extract(config: &PipelineConfig, workers: usize) -> CliResult<()> {
    let dir = match &config.paths.pool_cache {
        Some(d) => d.clone(),
        None => output_dir(config)?.join("pool"),
    };
    let (pool, failures) = extract(config)?;
    save_pool_cache(&pool, &dir)?;
    write_provenance(&dir, config, "extract", workers)?;
    print_json(&ExtractSummary {
        patches: pool.counts(),
        failures: &failures,
    });
    Ok(())
}

/// Pool from the configured cache when it exists, else extracted afresh.
fn pool(config: &PipelineConfig) -> CliResult<PatchPool> {
    if let Some(dir) = &config.paths.pool_cache {
        if dir.join(POOL_INDEX_FILE).is_file() {
            return Ok(load_pool_cache(dir)?);
        }
    }
    let (pool, failures) = extract(config)?;
    for f in &failures {
        eprintln!("extraction skipped {}: {}", f.image_id, f.message);
    }
    Ok(pool)
}

fn layout(config: &PipelineConfig, root: &Path) -> DatasetLayout {
    DatasetLayout::new(
        root,
        config.emitter.format,
        config.emitter.class_order.clone(),
    )
}

fn cmd_synth(config: &PipelineConfig, workers: usize) -> CliResult<()> {
    let count = config
        .count
        .ok_or_else(|| CliError::config("synth needs --count or a top-level count"))?;
    let out = output_dir(config)?;
    let spec = GeneratorSpec::new(
        config.composition(),
        pool(config)?,
        domain_seed(config.seed, Domain::Sampling),
    )?;
    let mut writer = DatasetWriter::new(layout(config, out))?;
    let mut hist = ClassHistogram::default();
    let mut start = 0u64;
    while start < count {
        let n = (count - start).min(SYNTH_CHUNK as u64) as usize;
        let samples = stream::batch(&spec, start, n, workers)?;
        writer.push_samples(&samples)?;
        let h = ClassHistogram::from_samples(&samples, config.emitter.format);
        for (c, k) in h.counts {
            *hist.counts.get_mut(&c).expect("all classes") += k;
        }
        hist.total_images += h.total_images;
        hist.drops += h.drops;
        start += n as u64;
    }
    writer.finish()?;
    write_provenance(out, config, "synth", workers)?;
    print_json(&hist);
    Ok(())
}

fn cmd_export_real(config: &PipelineConfig, workers: usize) -> CliResult<()> {
    let manifest = load_manifest(config)?;
    ensure_valid(&manifest)?;
    if manifest.box_annotations.is_empty() {
        return Err(CliError::data("manifest has no box annotations to export"));
    }
    let out = output_dir(config)?;
    let source = DirImageSource::new(images_root(config)?);
    let written = write_real_dataset(&manifest, &source, &layout(config, out))?;
    write_provenance(out, config, "export-real", workers)?;
    print_json(&json!({"images": written.entries.len()}));
    Ok(())
}

fn cmd_mix(
    config: &PipelineConfig,
    synthetic: Option<PathBuf>,
    real: Option<PathBuf>,
    workers: usize,
) -> CliResult<()> {
    let mut config = config.clone();
    if let Some(s) = synthetic {
        config.mix.synthetic = Some(absolute(&s));
    }
    if let Some(r) = real {
        config.mix.real = Some(absolute(&r));
    }
    let synthetic = config.require(&config.mix.synthetic, "--synthetic (or mix.synthetic)")?;
    let real = config.require(&config.mix.real, "--real (or mix.real)")?;
    let fraction = config
        .mix
        .real_fraction
        .ok_or_else(|| CliError::config("mix needs --real-fraction"))?;
    let out = output_dir(&config)?;
    let spec = MixSpec {
        real_fraction: fraction,
        seed: domain_seed(config.seed, Domain::Mix),
    };
    let mixed = mix_datasets(
        &layout(&config, synthetic),
        &layout(&config, real),
        &spec,
        out,
    )?;
    write_provenance(out, &config, "mix", workers)?;
    let n_real = mixed
        .entries
        .iter()
        .filter(|e| e.provenance == Provenance::Real)
        .count();
    print_json(&json!({
        "entries": mixed.entries.len(),
        "real": n_real,
        "achieved_fraction": if mixed.entries.is_empty() { 0.0 } else { n_real as f64 / mixed.entries.len() as f64 },
    }));
    Ok(())
}

#[derive(Serialize)]
struct DatasetStats {
    name: String,
    path: PathBuf,
    histogram: ClassHistogram,
    #[serde(skip_serializing_if = "Option::is_none")]
    conformance: Option<stats::ConformanceReport>,
    audit: stats::AuditReport,
}

/// Normalized class probabilities the configured sampler aims for, given
/// the classes the pool can supply.
fn expected_distribution(
    config: &PipelineConfig,
    pool: Option<&PatchPool>,
) -> BTreeMap<ClassLabel, f64> {
    let weights: Vec<(ClassLabel, f64)> = match (pool, &config.composition().class_sampler) {
        (Some(p), sampler) => sampler.support(p),
        (None, ClassSampler::Uniform) => {
            ClassLabel::OBJECTS.into_iter().map(|c| (c, 1.0)).collect()
        }
        (None, ClassSampler::Empirical { weights }) => {
            weights.iter().map(|(c, w)| (*c, *w)).collect()
        }
    };
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    weights.into_iter().map(|(c, w)| (c, w / total)).collect()
}

fn cmd_stats(
    config: &PipelineConfig,
    mut datasets: Vec<PathBuf>,
    as_json: bool,
    alpha: f64,
) -> CliResult<()> {
    if datasets.is_empty() {
        datasets.push(output_dir(config)?.to_path_buf());
    }
    let mut columns: Vec<(String, ClassHistogram)> = Vec::new();
    let mut pool_for_expected = None;
    if config.paths.manifest.is_some() {
        columns.push((
            "Source".into(),
            ClassHistogram::from_source(&load_manifest(config)?),
        ));
    }
    if let Some(dir) = &config.paths.pool_cache {
        if dir.join(POOL_INDEX_FILE).is_file() {
            let pool = load_pool_cache(dir)?;
            columns.push(("Pool".into(), ClassHistogram::from_pool(&pool)));
            pool_for_expected = Some(pool);
        }
    }
    let expected = expected_distribution(config, pool_for_expected.as_ref());

    let mut reports = Vec::new();
    for dir in &datasets {
        let manifest = OutputManifest::read(dir)?;
        let histogram = ClassHistogram::from_dataset(dir)?;
        // only meaningful for purely synthetic detection sets
        let synthetic_only = manifest
            .entries
            .iter()
            .all(|e| e.provenance == Provenance::Synthetic);
        let conformance = (synthetic_only
            && manifest.format != DatasetFormat::MultilabelCsv
            && histogram.object_total() > 0)
            .then(|| stats::conformance(&histogram, &expected, alpha))
            .transpose()?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        reports.push(DatasetStats {
            name,
            path: dir.clone(),
            histogram,
            conformance,
            audit: stats::audit_labels(dir),
        });
    }

    if as_json {
        print_json(&json!({
            "columns": columns.iter().map(|(n, h)| json!({"name": n, "histogram": h})).collect::<Vec<_>>(),
            "datasets": reports,
        }));
    } else {
        let mut cols: Vec<(&str, &ClassHistogram)> =
            columns.iter().map(|(n, h)| (n.as_str(), h)).collect();
        cols.extend(reports.iter().map(|r| (r.name.as_str(), &r.histogram)));
        let mut text = stats::render_table(&cols);
        for r in &reports {
            if let Some(c) = &r.conformance {
                let _ = writeln!(
                    text,
                    "{}: chi-square {:.4} (df {}, critical {:.4} at alpha {}) {}",
                    r.name,
                    c.statistic,
                    c.df,
                    c.critical_value,
                    c.alpha,
                    if c.pass { "pass" } else { "FAIL" }
                );
            }
            let _ = writeln!(
                text,
                "{}: {} audit finding(s)",
                r.name,
                r.audit.findings.len()
            );
            for f in &r.audit.findings {
                let line = f.line.map(|l| format!(":{l}")).unwrap_or_default();
                let _ = writeln!(
                    text,
                    "  {}{line}: {:?}: {}",
                    f.path.display(),
                    f.kind,
                    f.message
                );
            }
        }
        emit(&text);
    }
    let findings: usize = reports.iter().map(|r| r.audit.findings.len()).sum();
    if findings > 0 {
        return Err(CliError::data(format!("{findings} audit finding(s)")));
    }
    Ok(())
}

fn cmd_bench(config: &PipelineConfig, workers: usize) -> CliResult<()> {
    let n = config.count.unwrap_or(200) as usize;
    let pool = if config.paths.manifest.is_some() || config.paths.pool_cache.is_some() {
        pool(config)?
    } else {
        crate::fixtures::demo_pool(config.seed)
    };
    let spec = GeneratorSpec::new(
        config.composition(),
        pool,
        domain_seed(config.seed, Domain::Sampling),
    )?;
    let report = stream::bench(&spec, n, workers)?;
    print_json(&report);
    Ok(())
}
