use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vlmir_core::stage1::TextMode;
use vlmir_core::stage2::Sampler;
use vlmir_core::unet::AttentionVariant;

mod commands;
mod config;
mod rundir;

use config::ProviderKind;

/// Bad flags, config or incompatible inputs. Exits with code 2; every
/// other error exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<vlmir_core::CoreError>(),
                Some(vlmir_core::CoreError::Incompatible(_) | vlmir_core::CoreError::InvalidConfig(_))
            )
    })
}

#[derive(Parser, Debug)]
#[command(
    name = "vlmir",
    version,
    about = "Vision-language guided image restoration with a conditional diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, serde::Serialize)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Parent directory for the run directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a paired LQ/GT corpus and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Comma-separated degradations: noise, haze, raindrop.
        #[arg(long, default_value = "noise,haze,raindrop")]
        tasks: String,
        /// GT image directory; toy scenes are rendered when omitted.
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        /// Number of toy scenes (overrides `synth.toy_count`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Fill in GT and LQ captions for every manifest record.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        provider: Option<ProviderKind>,
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Train the vision-language alignment stage.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Epoch checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the conditional restorer on top of a stage-1 checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-1 model directory.
        #[arg(long)]
        stage1: PathBuf,
        /// Cross-attention variant: sca, ica or both.
        #[arg(long)]
        variant: Option<AttentionVariant>,
        /// Step checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore a PNG or a directory of PNGs.
    Restore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Manifest or JSON object mapping image stems to LQ captions.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// caption, fixed or null.
        #[arg(long)]
        text_mode: Option<TextMode>,
        /// ancestral or mean.
        #[arg(long)]
        sampler: Option<Sampler>,
        /// Dump every sampler state of each image in checkpoint format.
        #[arg(long)]
        trace: bool,
    },
    /// Score restored images against a manifest's GT images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory with one `{id}.png` per manifest record.
        #[arg(long)]
        restored: PathBuf,
        /// Report path; defaults to `report.json` in the run directory.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Row label in the emitted table.
        #[arg(long, default_value = "restored")]
        label: String,
    },
    /// Train and evaluate the attention and text-input variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Held-out manifest for evaluation; defaults to `--manifest`.
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long)]
        stage1: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            common,
            tasks,
            gt_dir,
            split,
            count,
        } => commands::synth(&common, &tasks, gt_dir.as_deref(), &split, count),
        Command::Caption {
            common,
            manifest,
            provider,
            endpoint,
        } => commands::caption(&common, &manifest, provider, endpoint),
        Command::TrainStage1 {
            common,
            manifest,
            resume,
        } => commands::train_stage1(&common, &manifest, resume.as_deref()),
        Command::TrainStage2 {
            common,
            manifest,
            stage1,
            variant,
            resume,
        } => commands::train_stage2(&common, &manifest, &stage1, variant, resume.as_deref()),
        Command::Restore {
            common,
            stage1,
            stage2,
            input,
            captions,
            text_mode,
            sampler,
            trace,
        } => commands::restore(
            &common,
            &commands::RestoreArgs {
                stage1,
                stage2,
                input,
                captions,
                text_mode,
                sampler,
                trace,
            },
        ),
        Command::Eval {
            common,
            manifest,
            restored,
            report,
            label,
        } => commands::eval(&common, &manifest, &restored, report.as_deref(), &label),
        Command::Ablate {
            common,
            manifest,
            test_manifest,
            stage1,
        } => commands::ablate(&common, &manifest, test_manifest.as_deref(), &stage1),
    }
}

/// The error chain joined with `: `, skipping causes already spelled out
/// by the message before them.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
