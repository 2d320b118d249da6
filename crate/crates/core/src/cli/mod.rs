//! `mitkit` command-line interface.
//!
//! Exit codes: 0 on success, 1 when the data fails validation or a data
//! error stops the run, 2 on usage errors (bad flags, missing seed, bad
//! config).

mod build;
pub mod config;
mod data;
mod eval_cmd;
pub mod manifest;
mod stream;
mod synth_cmd;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::builders::Placement;
use crate::eval::InputStrategy;
use config::PipelineConfig;
use manifest::ManifestBuilder;

#[derive(Debug, Parser)]
#[command(name = "mitkit", version, about = "Interleaved multi-image dataset toolkit")]
struct Cli {
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every random choice derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build training subsets.
    #[command(subcommand)]
    Build(BuildCmd),
    /// LLM-assisted synthesis.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Per-subset statistics table.
    Stats(StatsArgs),
    /// Render instances into interleaved prompt text.
    Serialize(IoArgs),
    /// Benchmark evaluation helpers.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Check a JSONL file against the data model.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct IoArgs {
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum BuildCmd {
    /// Merge single-image conversations into multi-image ones.
    Merge {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, value_enum)]
        placement: Option<Placement>,
    },
    /// Contrast-caption items from a captioned image pool.
    Contrast {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        n_items: Option<usize>,
        #[arg(long, value_enum)]
        placement: Option<Placement>,
    },
    /// Rewrite label answers as lettered multiple choice.
    Mcq {
        #[command(flatten)]
        io: IoArgs,
        /// Comma-separated answer labels.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
    },
    /// Keep evenly spaced frames of long image sequences.
    Frames {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
}

#[derive(Debug, Subcommand)]
enum SynthCmd {
    /// Multi-image QA pairs from image captions.
    Multivqa {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        n_items: Option<usize>,
        /// Write the requests instead of calling the API.
        #[arg(long)]
        dry_run: bool,
    },
    /// Replace each first question with one written for its reference answer.
    B2wQuestion {
        #[command(flatten)]
        io: IoArgs,
    },
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// One JSONL file per subset; the file stem names the row.
    #[arg(short, long, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Directory receiving stats.json.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    tokens_per_image: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Write model requests (prompt + image files) for a benchmark.
    Prepare {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, value_enum, default_value_t = InputStrategy::Sequence)]
        strategy: InputStrategy,
        /// Base directory for relative image locators (default: the
        /// benchmark file's directory).
        #[arg(long)]
        image_root: Option<PathBuf>,
    },
    /// Score predictions against a benchmark.
    Score {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Expected accuracy of uniform guessing.
    Baseline {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
    },
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(short, long)]
    input: Option<PathBuf>,
}

/// Why a command stopped.
#[derive(Debug)]
pub(crate) enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

pub(crate) type CmdResult = Result<u8, Failure>;

/// Effective configuration shared by all subcommands.
pub(crate) struct Ctx {
    pub cfg: PipelineConfig,
}

impl Ctx {
    pub fn seed(&self, command: &str) -> Result<u64, Failure> {
        self.cfg.global_seed.ok_or_else(|| {
            Failure::Usage(format!(
                "{command} needs a seed: pass --seed or set global_seed in the config"
            ))
        })
    }

    pub fn input(&self, flag: &Option<PathBuf>) -> Result<PathBuf, Failure> {
        pick_path(flag, &self.cfg.paths.input, "input")
    }

    pub fn output(&self, flag: &Option<PathBuf>) -> Result<PathBuf, Failure> {
        pick_path(flag, &self.cfg.paths.output, "output")
    }

    pub fn manifest(&self, command: &str) -> ManifestBuilder {
        ManifestBuilder::new(command, self.cfg.hash(), self.cfg.global_seed)
    }
}

fn pick_path(
    flag: &Option<PathBuf>,
    fallback: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, Failure> {
    match flag.as_ref().or(fallback.as_ref()) {
        Some(p) if !p.as_os_str().is_empty() => Ok(p.clone()),
        Some(_) => Err(Failure::Usage(format!("{what} path is empty"))),
        None => Err(Failure::Usage(format!(
            "missing {what}: pass --{what} or set paths.{what} in the config"
        ))),
    }
}

/// Writes the manifest and reports where it went.
pub(crate) fn finish_manifest(builder: &ManifestBuilder) -> Result<(), Failure> {
    let (path, hash) = builder.write()?;
    println!("manifest {} sha256={hash}", path.display());
    Ok(())
}

pub(crate) fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code as i32,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `mitkit --help` for the command grammar");
            2
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let mut cfg =
        PipelineConfig::load(cli.config.as_deref()).map_err(|e| Failure::Usage(format!("{e:#}")))?;
    if cli.seed.is_some() {
        cfg.global_seed = cli.seed;
    }
    apply_overrides(&mut cfg, &cli.command);
    cfg.validate().map_err(|e| Failure::Usage(format!("{e:#}")))?;
    let ctx = Ctx { cfg };

    match &cli.command {
        Command::Build(cmd) => match cmd {
            BuildCmd::Merge { io, .. } => build::merge(&ctx, io),
            BuildCmd::Contrast { io, .. } => build::contrast(&ctx, io),
            BuildCmd::Mcq { io, .. } => build::mcq(&ctx, io),
            BuildCmd::Frames { io, frames } => build::frames(&ctx, io, *frames),
        },
        Command::Synth(cmd) => match cmd {
            SynthCmd::Multivqa { io, dry_run, .. } => synth_cmd::multivqa(&ctx, io, *dry_run),
            SynthCmd::B2wQuestion { io } => synth_cmd::b2w_question(&ctx, io),
        },
        Command::Stats(args) => data::stats(&ctx, args),
        Command::Serialize(io) => data::serialize(&ctx, io),
        Command::Eval(cmd) => match cmd {
            EvalCmd::Prepare {
                io,
                strategy,
                image_root,
            } => eval_cmd::prepare(&ctx, io, *strategy, image_root.as_deref()),
            EvalCmd::Score { io, predictions } => eval_cmd::score(&ctx, io, predictions),
            EvalCmd::Baseline { io, trials } => eval_cmd::baseline(&ctx, io, *trials),
        },
        Command::Validate(args) => data::validate(&ctx, args),
    }
}

/// Flags win over config values; they are folded in before hashing so the
/// manifest reflects what actually ran.
fn apply_overrides(cfg: &mut PipelineConfig, command: &Command) {
    match command {
        Command::Build(BuildCmd::Merge {
            k_min,
            k_max,
            placement,
            ..
        }) => {
            if let Some(v) = k_min {
                cfg.merge.k_min = *v;
            }
            if let Some(v) = k_max {
                cfg.merge.k_max = *v;
            }
            if let Some(v) = placement {
                cfg.merge.placeholder_position = *v;
            }
        }
        Command::Build(BuildCmd::Contrast {
            n_items, placement, ..
        }) => {
            if let Some(v) = n_items {
                cfg.contrast.n_items = *v;
            }
            if let Some(v) = placement {
                cfg.contrast.placeholder_position = *v;
            }
        }
        Command::Build(BuildCmd::Mcq {
            labels: Some(labels),
            ..
        }) => cfg.mcq.labels = labels.clone(),
        Command::Synth(SynthCmd::Multivqa {
            n_items: Some(n), ..
        }) => cfg.multivqa.n_items = *n,
        Command::Stats(StatsArgs {
            tokens_per_image: Some(t),
            ..
        }) => cfg.budget.tokens_per_image = *t,
        _ => {}
    }
    let seed = cfg.global_seed.unwrap_or(0);
    cfg.merge.seed = seed;
    cfg.contrast.seed = seed;
}
