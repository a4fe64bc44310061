use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gaitcaps::diagnostics::{gradcheck_suite, THRESHOLD};
use gaitcaps::evaluation::{build_protocol, evaluate, export_embeddings, ProtocolKind};
use gaitcaps::gait_data::{load_dataset, parse_conditions, synth_dataset, DatasetIndex, Layout, DEFAULT_CONDITIONS};
use gaitcaps::training::{ablate, load_checkpoint, pretrain_pfe, train_full, Checkpoint, Scale, TrainConfig};

#[derive(Parser)]
#[command(name = "gaitcaps", version, about = "Gait recognition with partial features, GRUs and capsules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic silhouette dataset in the CASIA-B layout.
    Synth(SynthArgs),
    /// Pretrain the extractor, then train the whole network.
    Train(TrainArgs),
    /// Rank-1 cross-view evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every block.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every architecture variant.
    Ablate(AblateArgs),
    /// Export embeddings of a protocol's sequences as CSV.
    Embed(EmbedArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Directory layout: casia-b or ou-mvlp.
    #[arg(long, default_value = "casia-b")]
    layout: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    identities: usize,
    /// Comma-separated view angles in degrees.
    #[arg(long, default_value = "0,30,60,90")]
    views: String,
    /// Condition counts, e.g. nm:6,bg:2,cl:2.
    #[arg(long, default_value = DEFAULT_CONDITIONS)]
    conditions: String,
    /// Frames per sequence.
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Training config (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Loss log path; defaults to the checkpoint path with `.loss` appended.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    freeze_pfe: bool,
    /// Overrides the config seed (42 when neither is given).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// casia-b, ou-mvlp or synthetic.
    #[arg(long, default_value = "synthetic")]
    protocol: String,
    #[arg(long)]
    report_out: PathBuf,
    /// Config the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// desk or full.
    #[arg(long, default_value = "desk")]
    scale: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    protocol: String,
    #[arg(long)]
    report_out: PathBuf,
    /// Where variant checkpoints go; defaults to `<report-out>.checkpoints`.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "synthetic")]
    protocol: String,
    #[arg(long)]
    out_csv: PathBuf,
}

/// Exit 2 for bad invocations, 1 for failures while running.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<gaitcaps::Error> for Failure {
    fn from(e: gaitcaps::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Embed(a) => embed(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nRun `gaitcaps --help` for usage.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn load(data: &DataArgs) -> Result<DatasetIndex, Failure> {
    let layout: Layout = usage(data.layout.parse())?;
    let index = load_dataset(&data.data, layout)?;
    for w in &index.warnings {
        eprintln!("warning: {w}");
    }
    Ok(index)
}

fn config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// The identities a checkpoint was not trained on, or all of them.
fn held_out(index: &DatasetIndex, ckpt: &Checkpoint) -> Result<DatasetIndex, Failure> {
    match ckpt.config.train_identities {
        0 => Ok(index.clone()),
        n => Ok(index.split_identities(n)?.1),
    }
}

fn synth(a: SynthArgs) -> Outcome {
    let views = a
        .views
        .split(',')
        .map(|v| v.trim().parse::<u32>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::Usage(format!("--views must be a comma-separated list of angles, got `{}`", a.views)))?;
    let conditions = usage(parse_conditions(&a.conditions))?;
    if a.frames == 0 || a.identities < 2 {
        return Err(Failure::Usage("--frames must be positive and --identities at least 2".into()));
    }
    let s = synth_dataset(&a.out, a.identities, &views, &conditions, a.frames, a.seed)?;
    println!(
        "wrote {} identities, {} views, {} sequences, {} frames to {}",
        s.identities,
        s.views,
        s.sequences,
        s.frames,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = config(a.config.as_deref(), a.seed)?;
    cfg.freeze_pfe |= a.freeze_pfe;
    let index = load(&a.data)?;
    let train = match cfg.train_identities {
        0 => index,
        n => index.split_identities(n)?.0,
    };
    let pre = pretrain_pfe(&train, &cfg)?;
    let out = train_full(&train, &cfg, Some(&pre.params), None)?;
    out.checkpoint.save(&a.out_checkpoint)?;
    let log_path = a.loss_log.unwrap_or_else(|| {
        let mut p = a.out_checkpoint.clone().into_os_string();
        p.push(".loss");
        p.into()
    });
    let mut log = String::new();
    for (i, l) in pre.log.iter().enumerate() {
        let _ = writeln!(log, "pretrain {i} {l:.8e}");
    }
    for (i, l) in out.log.iter().enumerate() {
        let _ = writeln!(log, "train {i} {l:.8e}");
    }
    std::fs::write(&log_path, log).map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?;
    println!(
        "trained on {} identities ({} + {} steps); checkpoint {}, loss log {}",
        train.identities().len(),
        pre.log.len(),
        out.log.len(),
        a.out_checkpoint.display(),
        log_path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let protocol: ProtocolKind = usage(a.protocol.parse())?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    if let Some(path) = &a.config {
        let mut expected = TrainConfig::load(path)?.arch;
        expected.n_classes = ckpt.config.arch.n_classes;
        ckpt.check_architecture(&expected)?;
    }
    let index = held_out(&load(&a.data)?, &ckpt)?;
    let split = build_protocol(&index, protocol)?;
    let report = evaluate(&index, &split, &ckpt)?;
    std::fs::write(&a.report_out, report.to_csv()).map_err(|e| Failure::Runtime(format!("{}: {e}", a.report_out.display())))?;
    print!("{}", report.summary());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let scale: Scale = usage(a.scale.parse())?;
    let checks = gradcheck_suite(scale, a.seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.max_rel_error < a.threshold;
        println!("{:<22} max_rel_error {:.3e}  ({} coordinates)  {}", c.block, c.max_rel_error, c.checked, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(c.block);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn run_ablate(a: AblateArgs) -> Outcome {
    let protocol: ProtocolKind = usage(a.protocol.parse())?;
    let cfg = config(a.config.as_deref(), a.seed)?;
    let index = load(&a.data)?;
    let dir = a.checkpoint_dir.unwrap_or_else(|| {
        let mut p = a.report_out.clone().into_os_string();
        p.push(".checkpoints");
        p.into()
    });
    let report = ablate(&index, &cfg, protocol, Some(&dir))?;
    let text = report.to_text();
    std::fs::write(&a.report_out, &text).map_err(|e| Failure::Runtime(format!("{}: {e}", a.report_out.display())))?;
    print!("{text}");
    match &report.failure {
        None => Ok(()),
        Some((v, e)) => Err(Failure::Runtime(format!("variant {} failed, report incomplete: {e}", v.name()))),
    }
}

fn embed(a: EmbedArgs) -> Outcome {
    let protocol: ProtocolKind = usage(a.protocol.parse())?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let index = held_out(&load(&a.data)?, &ckpt)?;
    let split = build_protocol(&index, protocol)?;
    let rows = export_embeddings(&index, &split, &ckpt, &a.out_csv)?;
    println!("wrote {rows} embeddings to {}", a.out_csv.display());
    Ok(())
}
