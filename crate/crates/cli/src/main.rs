use std::path::PathBuf;
use std::process::ExitCode;

use bmr_cli::commands::{
    ablate_cmd, eval_cmd, export_cmd, load_synth_spec, synth_cmd, thread_count, train_cmd, AblationGrid, ExportKind,
};
use bmr_cli::error::Result;
use bmr_cli::run_config::RunConfig;
use bmr_core::config::parse_views;
use bmr_core::SynthSpec;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bmr", version, about = "Multi-view fake-news classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of a run config.
#[derive(Args)]
struct RunArgs {
    /// Flat TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the configured seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed decision threshold instead of one derived from the training labels.
    #[arg(long)]
    threshold_override: Option<f64>,
    /// Comma-separated views, e.g. `IP,T`.
    #[arg(long)]
    views: Option<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.run.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.run.out = o.clone();
        }
        if let Some(t) = self.threshold_override {
            cfg.model.threshold = Some(t);
        }
        if let Some(v) = &self.views {
            cfg.model.views = parse_views(v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Curves,
    Histogram,
    Heatmap,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the config's data and write a run directory.
    Train(RunArgs),
    /// Score a labelled JSONL file with a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold_override: Option<f64>,
        /// Output file; defaults to metrics.json beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a grid of configuration variants over every seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// `preset` or a TOML file of `[[row]]` overrides.
        #[arg(long, default_value = "preset")]
        ablation: String,
    },
    /// Write a synthetic corpus with planted signals.
    Synth {
        /// TOML corpus spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the data behind one figure.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Labelled JSONL, needed by `histogram` and `heatmap`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(args) => train_cmd(&args.load()?),
        Command::Eval {
            checkpoint,
            data,
            threshold_override,
            out,
        } => eval_cmd(&checkpoint, &data, threshold_override, out.as_deref()),
        Command::Ablate { run, ablation } => ablate_cmd(&run.load()?, &AblationGrid::parse(&ablation), thread_count()?),
        Command::Synth { spec, seed, out } => {
            let spec = match spec {
                Some(p) => load_synth_spec(&p)?,
                None => SynthSpec::default(),
            };
            synth_cmd(&spec, seed, &out)
        }
        Command::Export {
            checkpoint,
            kind,
            data,
            out,
        } => {
            let kind = match kind {
                Kind::Curves => ExportKind::Curves,
                Kind::Histogram => ExportKind::Histogram,
                Kind::Heatmap => ExportKind::Heatmap,
            };
            export_cmd(&checkpoint, kind, data.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
