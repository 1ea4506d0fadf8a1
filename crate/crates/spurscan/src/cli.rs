//! Command-line surface tying the pipeline together.
//!
//! Every subcommand is deterministic under a fixed seed, and `analyze`
//! is deterministic regardless of `--threads`: samples fan out over a
//! scoped worker pool but results are collected in input order, so the
//! emitted report is byte-identical at any parallelism degree.
//!
//! Exit codes: 0 success (for `analyze`/`score`, additionally
//! aggregate > 0), 1 usage/config error, 2 spurious-dominated result.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, ClassLabel, CorpusFile};
use crate::ig::{self, IgConfig};
use crate::nn::{self, ModelConfig};
use crate::pe_map::{self, RegionKind};
use crate::report::{self, AnalysisReport, ModelInfo, SampleRecord};
use crate::scoring;
use crate::synth::{self, PlantSpec};

const EXIT_OK: u8 = 0;
const EXIT_ERR: u8 = 1;
const EXIT_SPURIOUS: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "spurscan",
    version,
    about = "Measure how much byte-level PE malware detectors rely on spurious file regions"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the byte-region partition of one PE file
    Map(MapArgs),
    /// Attribute every corpus file and write the analysis report
    Analyze(AnalyzeArgs),
    /// Re-derive the scores of an existing report and check consistency
    Score(ScoreArgs),
    /// Compare analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic corpus with a planted class marker
    Synth(SynthArgs),
    /// Train the toy detector on a labeled corpus directory
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Args)]
struct MapArgs {
    /// PE file to map
    file: PathBuf,
    /// Emit the partition as JSON instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Weight file identifying architecture, configuration and weights
    #[arg(long)]
    weights: PathBuf,
    /// CSV manifest (path,label,family); relative paths resolve
    /// against the manifest's directory
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    manifest: Option<PathBuf>,
    /// Corpus directory with goodware/ and malware/ subdirectories
    #[arg(long)]
    input: Option<PathBuf>,
    /// Interpolation steps of the attribution quadrature
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Report JSON output path
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-class summary CSV here
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Also write the binned attribution curve (CSV) here
    #[arg(long)]
    bins_out: Option<PathBuf>,
    /// Number of attribution bins for --bins-out
    #[arg(long, default_value_t = 200)]
    bins: usize,
    /// Worker threads; defaults to the available cores.  The
    /// SPURSCAN_THREADS environment variable overrides this flag.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Report JSON produced by `analyze`
    report: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Architecture to check
    #[arg(long, value_enum, default_value_t = ArchChoice::Both)]
    arch: ArchChoice,
    /// Window of the scaled-down check configs
    #[arg(long, default_value_t = 256)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArchChoice {
    Malconv,
    Bbdnn,
    Both,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Region that carries the planted marker
    #[arg(long, value_enum)]
    plant: PlantChoice,
    /// Marker probability in the correlated class (the other class
    /// gets it with probability 1 - p)
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    /// Files per class
    #[arg(long)]
    n: usize,
    /// Output directory; files land in goodware/ and malware/
    #[arg(long)]
    out: PathBuf,
    /// Class the marker correlates with
    #[arg(long, value_enum, default_value_t = ClassChoice::Malware)]
    class: ClassChoice,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlantChoice {
    Dos,
    Slack,
    Overlay,
    /// Content of the code section
    Code,
}

impl PlantChoice {
    fn region(self) -> RegionKind {
        match self {
            Self::Dos => RegionKind::Dos,
            Self::Slack => RegionKind::Slack,
            Self::Overlay => RegionKind::Overlay,
            Self::Code => RegionKind::Code,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClassChoice {
    Goodware,
    Malware,
}

impl ClassChoice {
    fn label(self) -> ClassLabel {
        match self {
            Self::Goodware => ClassLabel::Goodware,
            Self::Malware => ClassLabel::Malware,
        }
    }
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    /// Training config JSON (model, epochs, lr, seed)
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory with goodware/ and malware/ subdirectories
    #[arg(long)]
    corpus: PathBuf,
    /// Weight file output path
    #[arg(long)]
    out: PathBuf,
}

/// On-disk shape of the `train-toy --config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainToyConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Parse argv and run; the process exit code distinguishes success,
/// usage/config errors, and spurious-dominated analysis results.
pub fn run() -> ExitCode {
    // Die quietly when the reader of a pipeline goes away
    // (`spurscan map … | head`) instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Map(args) => cmd_map(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Score(args) => cmd_score(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::TrainToy(args) => cmd_train_toy(&args),
    };
    match code {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERR)
        }
    }
}

fn cmd_map(args: &MapArgs) -> anyhow::Result<u8> {
    let bytes = fs::read(&args.file)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", args.file.display()))?;
    let layout = pe_map::parse_pe(&bytes)?;
    let map = pe_map::region_map(&layout);
    let rep = pe_map::map_report(&layout, &map);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rep)?);
    } else {
        println!(
            "{}: {} bytes{}",
            args.file.display(),
            rep.file_len,
            if rep.malformed { " (malformed)" } else { "" }
        );
        for r in &rep.regions {
            println!(
                "  {:16} [{:#010x}, {:#010x})  {} bytes",
                r.kind,
                r.start,
                r.end,
                r.end - r.start
            );
        }
        match rep.code_section {
            Some(i) => println!("  code section: #{i}"),
            None => println!("  code section: none"),
        }
    }
    Ok(EXIT_OK)
}

/// Worker threads for `analyze`: the environment variable wins over
/// the flag, the flag over the detected core count.
fn thread_count(flag: Option<usize>) -> anyhow::Result<usize> {
    let n = match std::env::var("SPURSCAN_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| anyhow::anyhow!("SPURSCAN_THREADS must be a positive integer, got {v:?}"))?,
        Err(_) => flag.unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }),
    };
    anyhow::ensure!(n > 0, "thread count must be positive");
    Ok(n)
}

fn load_corpus(
    manifest: Option<&Path>,
    input: Option<&Path>,
    window: usize,
) -> anyhow::Result<corpus::ScannedCorpus> {
    let (manifest, base) = match (manifest, input) {
        (Some(path), None) => {
            let bytes = fs::read(path)
                .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
            let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            (corpus::load_manifest(&bytes)?, base)
        }
        (None, Some(dir)) => (corpus::scan_dir(dir)?, PathBuf::new()),
        _ => anyhow::bail!("exactly one of --manifest and --input is required"),
    };
    Ok(corpus::scan(&manifest, &base, &[window]))
}

fn analyze_one(
    cfg: &ModelConfig,
    store: &nn::WeightStore,
    igc: &IgConfig,
    file: &CorpusFile,
    keep_attr: bool,
) -> Result<(SampleRecord, Option<ig::AttributionVector>), nn::NnError> {
    let map = pe_map::region_map(&file.layout);
    let attr = ig::integrated_gradients(cfg, store, igc, &file.bytes)?;
    let scores = scoring::sample_scores(&attr, &map);
    let record = SampleRecord {
        path: file.entry.path.to_string_lossy().into_owned(),
        label: file.entry.label,
        file_len: file.bytes.len() as u64,
        scores,
        completeness_residual: attr.completeness_residual,
        prediction: attr.score_x,
    };
    Ok((record, keep_attr.then_some(attr)))
}

fn print_table(report: &AnalysisReport) {
    for row in &report.per_class.rows {
        println!(
            "{:9} (n={}): dos {:.4}  slack {:.4}  text {:.4}  overlay {:.4}",
            row.label.name(),
            row.n,
            row.mean_dos,
            row.mean_slack,
            row.mean_text,
            row.mean_overlay
        );
    }
    println!(
        "aggregate: {:+.4} over {} samples ({} skipped)",
        report.dataset.aggregate, report.dataset.n_samples, report.dataset.n_skipped
    );
}

fn cmd_analyze(args: &AnalyzeArgs) -> anyhow::Result<u8> {
    let weight_bytes = fs::read(&args.weights)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", args.weights.display()))?;
    let (cfg, store) = nn::load_weights(&weight_bytes)?;
    let igc = IgConfig {
        steps: args.steps,
        ..IgConfig::default()
    };
    anyhow::ensure!(igc.steps > 0, "--steps must be positive");
    let threads = thread_count(args.threads)?;

    let scanned = load_corpus(args.manifest.as_deref(), args.input.as_deref(), cfg.window)?;
    for r in &scanned.rejected {
        eprintln!("skipping {}: {}", r.path.display(), r.reason);
    }
    anyhow::ensure!(
        !scanned.files.is_empty(),
        "no usable PE files in the corpus ({} rejected)",
        scanned.rejected.len()
    );

    // Fan the samples out over a scoped pool but collect in input
    // order, so the report never depends on scheduling.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?;
    let keep_attr = args.bins_out.is_some();
    let results: Vec<Result<(SampleRecord, Option<ig::AttributionVector>), nn::NnError>> = pool
        .install(|| {
            scanned
                .files
                .par_iter()
                .map(|file| analyze_one(&cfg, &store, &igc, file, keep_attr))
                .collect()
        });

    let mut records = Vec::with_capacity(results.len());
    let mut attrs = Vec::new();
    for (file, result) in scanned.files.iter().zip(results) {
        match result {
            Ok((record, attr)) => {
                records.push(record);
                attrs.extend(attr);
            }
            Err(e) => eprintln!("skipping {}: {e}", file.entry.path.display()),
        }
    }

    let report = report::build_report(ModelInfo::of(&cfg), igc, records, scanned.stats)?;
    fs::write(&args.out, report::emit_json(&report))
        .map_err(|e| anyhow::anyhow!("writing {}: {e}", args.out.display()))?;
    if let Some(path) = &args.summary {
        fs::write(path, report::emit_summary_csv(&report))
            .map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    }
    if let Some(path) = &args.bins_out {
        anyhow::ensure!(args.bins > 0, "--bins must be positive");
        let binned = report::bin_attributions(&attrs, args.bins, cfg.window);
        fs::write(path, report::emit_bins_csv(&binned))
            .map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    }

    println!("wrote {}", args.out.display());
    print_table(&report);
    Ok(if report.dataset.aggregate > 0.0 {
        EXIT_OK
    } else {
        EXIT_SPURIOUS
    })
}

fn cmd_score(args: &ScoreArgs) -> anyhow::Result<u8> {
    let bytes = fs::read(&args.report)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", args.report.display()))?;
    let report = report::parse_json(&bytes)?;
    let (dataset, per_class) = report::recompute(&report)?;
    anyhow::ensure!(
        dataset == report.dataset && per_class == report.per_class,
        "report is self-inconsistent: stored scores do not match its own sample records"
    );
    print_table(&report);
    Ok(if report.dataset.aggregate > 0.0 {
        EXIT_OK
    } else {
        EXIT_SPURIOUS
    })
}

fn cmd_gradcheck(args: &GradcheckArgs) -> anyhow::Result<u8> {
    let configs: Vec<ModelConfig> = match args.arch {
        ArchChoice::Malconv => vec![ModelConfig::malconv_small(args.window)],
        ArchChoice::Bbdnn => vec![ModelConfig::bbdnn_small(args.window)],
        ArchChoice::Both => vec![
            ModelConfig::malconv_small(args.window),
            ModelConfig::bbdnn_small(args.window),
        ],
    };
    let mut all_passed = true;
    for cfg in &configs {
        let rep = nn::gradcheck(cfg, args.seed)?;
        println!(
            "{:8} max rel err: input {:.2e} ({} cells), params {:.2e} ({} cells) -> {}",
            rep.arch,
            rep.max_input_rel_err,
            rep.input_cells_checked,
            rep.max_param_rel_err,
            rep.param_cells_checked,
            if rep.passed() { "ok" } else { "FAIL" }
        );
        all_passed &= rep.passed();
    }
    Ok(if all_passed { EXIT_OK } else { EXIT_ERR })
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<u8> {
    let plant = PlantSpec::new(args.plant.region(), args.class.label(), args.p);
    let files = synth::gen_dataset(args.n, &synth::example_spec(), &plant, args.seed)?;
    synth::write_dataset(&files, &args.out)
        .map_err(|e| anyhow::anyhow!("writing {}: {e}", args.out.display()))?;
    let planted = files.iter().filter(|f| f.planted).count();
    println!(
        "wrote {} files ({} carrying the marker) under {}",
        files.len(),
        planted,
        args.out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_train_toy(args: &TrainToyArgs) -> anyhow::Result<u8> {
    let cfg_bytes = fs::read(&args.config)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", args.config.display()))?;
    let cfg: TrainToyConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| anyhow::anyhow!("parsing {}: {e}", args.config.display()))?;

    let scanned = load_corpus(None, Some(&args.corpus), cfg.model.window)?;
    for r in &scanned.rejected {
        eprintln!("skipping {}: {}", r.path.display(), r.reason);
    }
    let samples: Vec<(&[u8], ClassLabel)> = scanned
        .files
        .iter()
        .map(|f| (f.bytes.as_slice(), f.entry.label))
        .collect();
    anyhow::ensure!(!samples.is_empty(), "corpus has no trainable files");

    let trained = synth::train_toy(&cfg.model, &samples, cfg.epochs, cfg.lr, cfg.seed)?;
    fs::write(&args.out, nn::save_weights(&cfg.model, &trained.store))
        .map_err(|e| anyhow::anyhow!("writing {}: {e}", args.out.display()))?;
    println!(
        "trained {} epochs on {} files: loss {:.4}, accuracy {:.3}; wrote {}",
        trained.epochs,
        samples.len(),
        trained.final_loss,
        trained.final_accuracy,
        args.out.display()
    );
    Ok(EXIT_OK)
}
