use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cdt_core::audio::{read_wav, write_wav};
use cdt_core::conditioning::{extract_quality, extract_scene, write_condition_file, CondMode, ContentExtractor};
use cdt_core::corpus::{generate_corpus, CorpusSpec, Manifest, SplitSpec};
use cdt_core::degradation::{evaluation_noise_bank, training_noise_bank, NoiseBank, SnrSpec};
use cdt_core::evaluation::{comparison_table, evaluate_system, EvalReport, SystemSummary, REPORT_FILE};
use cdt_core::rng::derived_rng;
use cdt_core::training::{build_pair, fit, RunConfig, TrainedModel, CONFIG_FILE};
use cdt_core::vcmodel::Variant;
use cdt_core::CdtError;

/// Conditional denoising training for noise-robust voice conversion.
#[derive(Parser)]
#[command(name = "cdt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with speaker-disjoint splits and noise banks.
    Corpus(CorpusArgs),
    /// Mix one utterance with a noise at a random SNR.
    Degrade(DegradeArgs),
    /// Write content, quality and scene tracks for one utterance.
    ExtractConditions(ExtractArgs),
    /// Train a model; the run directory lives under $CDT_RUN_ROOT.
    Train(TrainArgs),
    /// Convert a source utterance to the voice of a target utterance.
    Convert(ConvertArgs),
    /// Score a checkpoint on unseen speakers and unseen noise.
    Evaluate(EvaluateArgs),
    /// Print one table from several evaluation reports.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    #[arg(long, default_value_t = 10)]
    utts_per_speaker: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100.0)]
    token_ms: f64,
    #[arg(long, default_value_t = 2)]
    extra_tokens: usize,
    /// Speaker fractions for train, valid and eval.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VALID", "EVAL"], default_values_t = [0.8, 0.1, 0.1])]
    split: Vec<f64>,
    /// Seconds per synthetic noise recording.
    #[arg(long, default_value_t = 4.0)]
    noise_seconds: f64,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Noise manifest (`noise_id<TAB>path`); defaults to the built-in training bank.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Use the built-in evaluation bank instead of the training bank.
    #[arg(long, conflicts_with = "noise")]
    eval_bank: bool,
    #[arg(long, default_value_t = 0.0)]
    snr_low: f64,
    #[arg(long, default_value_t = 20.0)]
    snr_high: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// `fw` (frame-wise) or `uw` (utterance-wise) for quality and scene.
    #[arg(long, default_value = "fw")]
    mode: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `conditioning.variant`: none-none, uw-uw, uw-fw, fw-uw or fw-fw.
    #[arg(long)]
    variant: Option<String>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.train_manifest`.
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    /// Overrides `run.valid_manifest`.
    #[arg(long)]
    valid_manifest: Option<PathBuf>,
    /// Run directory name under the run root; defaults to `<variant>-seed<seed>`.
    #[arg(long)]
    name: Option<String>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long, env = "CDT_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Expected conditioning variant; must match the checkpoint.
    #[arg(long)]
    conditioning: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation manifest; its speakers must be unseen in training.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 250)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report directory; defaults to `eval-seed<seed>` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Report directories (or report.json files).
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes already spelled out by their wrapper.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 2 for bad configuration or arguments, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<CdtError>(),
            Some(CdtError::Config { .. } | CdtError::Argument(_))
        )
    });
    if usage {
        2
    } else {
        1
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Corpus(a) => corpus(a),
        Command::Degrade(a) => degrade(a),
        Command::ExtractConditions(a) => extract_conditions(a),
        Command::Train(a) => train(a),
        Command::Convert(a) => convert(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
    }
}

fn corpus(a: CorpusArgs) -> anyhow::Result<()> {
    let spec = CorpusSpec {
        n_speakers: a.speakers,
        n_utts_per_speaker: a.utts_per_speaker,
        split: SplitSpec {
            train: a.split[0],
            valid: a.split[1],
            eval: a.split[2],
        },
        token_ms: a.token_ms,
        extra_tokens: a.extra_tokens,
    };
    let corpus = generate_corpus(&spec, a.seed)?;
    let paths = corpus.write(&a.out)?;
    let noise_dir = a.out.join("noise");
    let train = training_noise_bank(16_000, a.noise_seconds, a.seed)?.save(noise_dir.join("train"), "train_noise")?;
    let eval = evaluation_noise_bank(16_000, a.noise_seconds, a.seed)?.save(noise_dir.join("eval"), "eval_noise")?;
    for (what, p) in [
        ("train", &paths.train),
        ("valid", &paths.valid),
        ("eval", &paths.eval),
        ("speakers", &paths.speakers),
        ("train noise", &train),
        ("eval noise", &eval),
    ] {
        println!("{what:<12} {}", p.display());
    }
    Ok(())
}

fn degrade(a: DegradeArgs) -> anyhow::Result<()> {
    let clean = read_wav(&a.input)?;
    let sr = clean.sample_rate_hz();
    let bank = match &a.noise {
        Some(m) => NoiseBank::load(m, a.seed)?,
        None if a.eval_bank => evaluation_noise_bank(sr, 4.0, a.seed)?,
        None => training_noise_bank(sr, 4.0, a.seed)?,
    };
    let snr = SnrSpec::new(a.snr_low, a.snr_high).map_err(|e| CdtError::config("snr-low", e.to_string()))?;
    let mel = cdt_core::audio::MelConfig {
        sample_rate_hz: sr,
        ..Default::default()
    };
    let mut rng = derived_rng(a.seed, &["degrade"]);
    let pair = build_pair(&clean, &bank, &snr, &mel, &mut rng)?;
    write_wav(&pair.noisy_source, &a.output)?;
    println!("noise {} snr_db {:.3} -> {}", pair.noise_id, pair.snr_db, a.output.display());
    Ok(())
}

fn extract_conditions(a: ExtractArgs) -> anyhow::Result<()> {
    let mode: CondMode = a.mode.parse().map_err(|_| CdtError::config("mode", format!("unknown mode `{}`", a.mode)))?;
    let w = read_wav(&a.input)?;
    let stem = a
        .input
        .file_stem()
        .and_then(|s| s.to_str())
        .context("input path has no file name")?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let tracks = [
        ContentExtractor::default().track(&w),
        extract_quality(&w, mode),
        extract_scene(&w, mode),
    ];
    for t in &tracks {
        let p = a.out_dir.join(format!("{stem}.{}.ctrk", t.kind));
        write_condition_file(t, &p)?;
        println!("{:<8} {:>4} x {:<4} {}", t.kind.to_string(), t.n_frames(), t.dim(), p.display());
    }
    Ok(())
}

fn parse_variant(s: &str) -> anyhow::Result<Variant> {
    Ok(s.parse::<Variant>()?)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let mut c = RunConfig::load(p)?;
            let abs = std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))?;
            c.resolve_paths(abs.parent().unwrap_or(Path::new("/")));
            c
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &a.variant {
        cfg.conditioning.variant = parse_variant(v)?;
    }
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    let cwd = std::env::current_dir()?;
    if let Some(p) = &a.train_manifest {
        cfg.run.train_manifest = cwd.join(p).to_string_lossy().into_owned();
    }
    if let Some(p) = &a.valid_manifest {
        cfg.run.valid_manifest = cwd.join(p).to_string_lossy().into_owned();
    }
    cfg.validate()?;
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| format!("{}-seed{}", cfg.variant(), cfg.run.seed));
    let run_dir = a.run_root.join(name);
    let out = fit(&cfg, &run_dir, a.resume)?;
    println!(
        "{} steps{}, best valid L1 {:.5}",
        out.steps,
        if out.stopped_early { " (early stop)" } else { "" },
        out.best_valid_loss
    );
    println!("run dir    {}", run_dir.display());
    println!("best       {}", out.best_checkpoint.display());
    Ok(())
}

fn convert(a: ConvertArgs) -> anyhow::Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    if let Some(v) = &a.conditioning {
        let v = parse_variant(v).map_err(|_| CdtError::config("conditioning", format!("unknown variant `{v}`")))?;
        model
            .check_variant(Some(v))
            .map_err(|e| CdtError::config("conditioning", e.to_string()))?;
    }
    let source = read_wav(&a.source)?;
    let target = read_wav(&a.target)?;
    let out = model.convert(&source, &target)?;
    write_wav(&out.waveform, &a.output)?;
    println!("{} frames -> {}", out.mel.n_frames(), a.output.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let report = evaluate_system(&model, &manifest, a.pairs, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-seed{}", a.seed))
    });
    report.save(&out)?;
    model.config.save(&out.join(CONFIG_FILE))?;
    print!("{}", report.table());
    println!("report     {}", out.display());
    Ok(())
}

fn compare(a: CompareArgs) -> anyhow::Result<()> {
    let mut identity: Vec<SystemSummary> = Vec::new();
    let mut systems: Vec<SystemSummary> = Vec::new();
    for p in &a.reports {
        let file = if p.is_dir() { p.join(REPORT_FILE) } else { p.clone() };
        let report = EvalReport::load(&file)?;
        if !identity.contains(&report.identity) {
            identity.push(report.identity);
        }
        let mut s = report.system;
        // Several runs of one variant are told apart by their run directory.
        if a.reports.len() > 1 {
            let run = file.parent().and_then(Path::parent).and_then(Path::file_name);
            if let Some(run) = run.and_then(|n| n.to_str()) {
                s.system = format!("{} [{run}]", s.system);
            }
        }
        systems.push(s);
    }
    if systems.is_empty() {
        bail!("no reports given");
    }
    if identity.len() > 1 {
        for (i, r) in identity.iter_mut().enumerate() {
            r.system = format!("{} #{}", r.system, i + 1);
        }
    }
    identity.extend(systems);
    print!("{}", comparison_table(&identity));
    Ok(())
}
