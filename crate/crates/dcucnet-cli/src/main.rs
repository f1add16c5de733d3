//! Command-line pipeline: corpus synthesis, training, enhancement,
//! evaluation, and gradient verification.
//!
//! Exit codes are stable: 0 success, 2 I/O or file-format error, 3 training
//! divergence, 4 checkpoint integrity, 5 gradient-check failure, 64 usage or
//! configuration error. stdout carries machine-readable key=value output;
//! stderr carries human-readable progress.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcucnet::data::{build_corpus, Corpus, CorpusSpec, Split};
use dcucnet::error::DcucError;
use dcucnet::gradcheck::{
    check_gradients, run_full_model_check, run_kernel_checks, run_model_checks, CheckSettings,
};
use dcucnet::model::checkpoint::{load_checkpoint, save_checkpoint};
use dcucnet::model::{enhance, ModelConfig, ModelState};
use dcucnet::train_eval::{
    evaluate, si_snr, train, EvalOptions, OptimizerKind, SiSnrVariant, TrainConfig,
};
use dcucnet::visual_frontend::read_dvid;
use dcucnet::wav::{read_wav, write_wav};

const EXIT_IO: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "dcucnet", version, about = "Audio-visual speech enhancement pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio-visual corpus on disk.
    Synth(SynthArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Enhance one WAV file using its video stream and a checkpoint.
    Enhance(EnhanceArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient verification suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower SNR bound in dB.
    #[arg(long, default_value_t = 0.0)]
    snr_lo: f64,
    /// Upper SNR bound in dB.
    #[arg(long, default_value_t = 10.0)]
    snr_hi: f64,
    /// Scene duration in seconds.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (from `synth`).
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// History file (defaults to <out>.history).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Optimizer: adam or sgd_momentum.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint every N steps (0 = only at the end).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Loss variant: scale_invariant or plain_snr.
    #[arg(long)]
    si_snr_variant: Option<String>,
    /// Train on random crops of this many video frames.
    #[arg(long)]
    crop_frames: Option<usize>,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input noisy WAV (PCM16 mono).
    #[arg(long = "in")]
    input: PathBuf,
    /// Input video stream (DVID).
    #[arg(long)]
    video: PathBuf,
    /// Output WAV path.
    #[arg(long)]
    out: PathBuf,
    /// Optional clean reference; when given, the SI-SNR improvement is
    /// reported on stderr.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Zero the visual embedding (audio-only ablation).
    #[arg(long, default_value_t = false)]
    zero_visual: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// kernel (per-op checks) or model (composite + full micro-model).
    #[arg(long, default_value = "kernel")]
    scope: String,
    /// Inject a deliberately wrong gradient to exercise the failure path.
    #[arg(long, hide = true, default_value_t = false)]
    self_test_fail: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, everything else is usage
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Enhance(args) => cmd_enhance(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &DcucError) -> u8 {
    match e {
        DcucError::Io { .. } | DcucError::Format(_) | DcucError::Synthesis(_) => EXIT_IO,
        DcucError::TrainingDiverged { .. } => EXIT_DIVERGED,
        DcucError::Checkpoint(_) => EXIT_CHECKPOINT,
        DcucError::Nondeterminism(_) => EXIT_GRADCHECK,
        DcucError::InvalidInput(_) | DcucError::ConfigMismatch(_) | DcucError::Shape(_) => {
            EXIT_USAGE
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<u8, DcucError> {
    let spec = CorpusSpec {
        num_scenes: args.scenes,
        duration_s: args.duration,
        snr_range_db: (args.snr_lo, args.snr_hi),
        seed: args.seed,
        ..Default::default()
    };
    let corpus = build_corpus(spec)?;
    eprintln!("writing {} scenes to {}", corpus.len(), args.out.display());
    corpus.save(&args.out)?;
    println!("scenes={}", corpus.len());
    println!("out={}", args.out.display());
    Ok(0)
}

/// Flat key=value config: one pair per line, `#` comments. Unknown keys are
/// rejected by name.
fn parse_train_config(path: &Path) -> Result<BTreeMap<String, String>, DcucError> {
    const KNOWN: &[&str] = &[
        "epochs",
        "batch_size",
        "learning_rate",
        "optimizer",
        "grad_clip",
        "seed",
        "eval_every",
        "si_snr_variant",
        "crop_frames",
        "dropout",
        "mask_bound",
        "model_seed",
    ];
    let text = fs::read_to_string(path).map_err(|e| DcucError::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            DcucError::InvalidInput(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        let k = k.trim();
        if !KNOWN.contains(&k) {
            return Err(DcucError::InvalidInput(format!(
                "{}:{}: unknown config key {k:?}",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, DcucError> {
    v.parse::<T>()
        .map_err(|_| DcucError::InvalidInput(format!("config key {key}: cannot parse {v:?}")))
}

fn cmd_train(args: TrainArgs) -> Result<u8, DcucError> {
    let file = match &args.config {
        Some(p) => parse_train_config(p)?,
        None => BTreeMap::new(),
    };
    let fget = |k: &str| file.get(k).map(String::as_str);

    let mut cfg = TrainConfig::default();
    if let Some(v) = fget("epochs") {
        cfg.epochs = parse_num("epochs", v)?;
    }
    if let Some(v) = fget("batch_size") {
        cfg.batch_size = parse_num("batch_size", v)?;
    }
    if let Some(v) = fget("learning_rate") {
        cfg.learning_rate = parse_num("learning_rate", v)?;
    }
    if let Some(v) = fget("optimizer") {
        cfg.optimizer = OptimizerKind::parse(v)?;
    }
    if let Some(v) = fget("grad_clip") {
        cfg.grad_clip = parse_num("grad_clip", v)?;
    }
    if let Some(v) = fget("seed") {
        cfg.seed = parse_num("seed", v)?;
    }
    if let Some(v) = fget("eval_every") {
        cfg.eval_every = parse_num("eval_every", v)?;
    }
    if let Some(v) = fget("si_snr_variant") {
        cfg.si_snr_variant = SiSnrVariant::parse(v)?;
    }
    if let Some(v) = fget("crop_frames") {
        cfg.crop_frames = if v == "none" {
            None
        } else {
            Some(parse_num("crop_frames", v)?)
        };
    }
    // flags win over the file
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = &args.optimizer {
        cfg.optimizer = OptimizerKind::parse(v)?;
    }
    if let Some(v) = args.grad_clip {
        cfg.grad_clip = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = &args.si_snr_variant {
        cfg.si_snr_variant = SiSnrVariant::parse(v)?;
    }
    if let Some(v) = args.crop_frames {
        cfg.crop_frames = Some(v);
    }

    let mut mcfg = ModelConfig {
        seed: cfg.seed,
        ..Default::default()
    };
    if let Some(v) = fget("model_seed") {
        mcfg.seed = parse_num("model_seed", v)?;
    }
    if let Some(v) = fget("dropout") {
        mcfg.conformer.dropout = parse_num("dropout", v)?;
    }
    if let Some(v) = fget("mask_bound") {
        mcfg.mask_bound = if v == "none" {
            None
        } else {
            Some(parse_num("mask_bound", v)?)
        };
    }

    let corpus = Corpus::open(&args.corpus)?;
    let model = ModelState::init(mcfg)?;
    eprintln!(
        "training on {} scenes ({} epochs, batch {}, lr {})",
        corpus.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate
    );
    let (trained, history) = train(model, &corpus, &cfg)?;
    save_checkpoint(&trained, &args.out)?;

    let history_path = args
        .history
        .unwrap_or_else(|| args.out.with_extension("history"));
    fs::write(&history_path, history.to_lines()).map_err(|e| DcucError::io(&history_path, e))?;

    println!("steps={}", history.steps.len());
    if let Some(s) = history.steps.last() {
        println!("final_loss={}", s.loss);
    }
    println!("checkpoint={}", args.out.display());
    println!("history={}", history_path.display());
    Ok(0)
}

fn cmd_enhance(args: EnhanceArgs) -> Result<u8, DcucError> {
    let model = load_checkpoint(&args.ckpt)?;
    let noisy = read_wav(&args.input)?;
    let video = read_dvid(&args.video)?;
    let out = enhance(&noisy, &video, &model)?;
    write_wav(&args.out, &out)?;
    eprintln!(
        "enhanced {} samples ({:.2}s) -> {}",
        out.len(),
        out.duration_s(),
        args.out.display()
    );
    if let Some(ref_path) = &args.reference {
        let clean = read_wav(ref_path)?;
        let before = si_snr(&noisy, &clean, SiSnrVariant::ScaleInvariant)?;
        let after = si_snr(&out, &clean, SiSnrVariant::ScaleInvariant)?;
        eprintln!(
            "si_snr: {before:.2} dB -> {after:.2} dB (improvement {:+.2} dB)",
            after - before
        );
    }
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<u8, DcucError> {
    let split = Split::parse(&args.split)?;
    let model = load_checkpoint(&args.ckpt)?;
    let corpus = Corpus::open(&args.corpus)?;
    let result = evaluate(
        &model,
        &corpus,
        split,
        EvalOptions {
            zero_visual: args.zero_visual,
        },
    )?;
    println!("si_snr_db_mean={}", result.si_snr_db_mean);
    println!("si_snr_db_std={}", result.si_snr_db_std);
    println!("si_snr_improvement_db={}", result.si_snr_improvement_db);
    println!("num_utterances={}", result.num_utterances);
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8, DcucError> {
    let mut reports = match args.scope.as_str() {
        "kernel" => run_kernel_checks()?,
        "model" => {
            let mut r = run_model_checks()?;
            r.extend(run_full_model_check()?);
            r
        }
        other => {
            return Err(DcucError::InvalidInput(format!(
                "unknown gradcheck scope {other:?} (expected kernel or model)"
            )))
        }
    };
    if args.self_test_fail {
        // deliberately wrong-sign gradient through the real harness
        let theta = [1.0, 2.0];
        let wrong = [-2.0, -4.0];
        reports.push(check_gradients(
            "self_test",
            "wrong_sign",
            &theta,
            &wrong,
            &CheckSettings::default(),
            |x| x.iter().map(|v| v * v).sum(),
        )?);
    }
    let mut all_pass = true;
    for r in &reports {
        println!("{r}");
        all_pass &= r.pass;
    }
    eprintln!(
        "{} checks, {} failed",
        reports.len(),
        reports.iter().filter(|r| !r.pass).count()
    );
    Ok(if all_pass { 0 } else { EXIT_GRADCHECK })
}
