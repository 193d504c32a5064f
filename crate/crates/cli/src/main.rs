//! `gcnn`: dataset synthesis, preprocessing, training, cross-validation,
//! layer-reuse experiments, statistics and self checks.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcnn_core::surfdata::Axis;
use gcnn_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gcnn", version, about = "Convolutional networks on icosahedral sphere meshes")]
pub struct Cli {
    /// Worker threads; 1 gives bit-for-bit reproducible runs.
    #[arg(long, global = true, env = "GCNN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print node, face and edge counts and the degree histogram of a level.
    MeshInfo {
        #[arg(long)]
        level: usize,
        /// Write the level as a Wavefront OBJ file.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Write a synthetic labelled dataset (data.gsrf).
    Synth {
        #[arg(long)]
        level: usize,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON generator settings (bumps, noise, mask).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on one fold and write model.ckpt.
    Train(RunArgs),
    /// Cross-validate with one freshly initialized model per fold.
    Crossval(RunArgs),
    /// Rotate every map of a dataset.
    Rotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "z")]
        axis: Axis,
        #[arg(long, allow_negative_numbers = true)]
        degrees: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project every map to a padded longitude/latitude image (images.gimg).
    Project {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 224)]
        width: usize,
        #[arg(long, default_value_t = 224)]
        height: usize,
        #[arg(long, default_value_t = 5)]
        pad: usize,
        /// Project the stored values without removing each map's mean.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the upper rows of a checkpoint on new data, per fold.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Rows kept fixed; defaults to all rows below the first dense row.
        #[arg(long)]
        freeze: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// One-way ANOVA and Bonferroni pairwise tests on fold accuracies.
    Stats {
        #[arg(long, num_args = 2.., required = true)]
        records: Vec<PathBuf>,
        /// Write stats.json and stats.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run built-in checks and print one line per check.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
    },
    /// Re-run the command recorded in a manifest into a new directory.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Geometry,
    Gradients,
    Params,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Gcnn,
    Pcnn,
}

/// Settings shared by every training command. Unset flags fall back to the
/// config file, then to built-in defaults.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// JSON file with `train`, `folds`, `test_fraction`, `seed`, `demean`,
    /// `gcnn` and `pcnn` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub extended_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_fine: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ArchArg::Gcnn)]
    pub arch: ArchArg,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Mesh network convolution/pooling blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = commands::Context {
        argv,
        threads: cli.threads,
    };
    match cli.command {
        Command::MeshInfo { level, export } => commands::mesh_info(level, export.as_deref()),
        Command::Synth {
            level,
            samples,
            seed,
            config,
            out,
        } => commands::synth(&ctx, level, samples, seed, config.as_deref(), &out),
        Command::Train(args) => commands::train_or_crossval(&ctx, &args, false),
        Command::Crossval(args) => commands::train_or_crossval(&ctx, &args, true),
        Command::Rotate {
            data,
            axis,
            degrees,
            out,
        } => commands::rotate(&ctx, &data, axis, degrees, &out),
        Command::Project {
            data,
            width,
            height,
            pad,
            raw,
            out,
        } => commands::project(&ctx, &data, width, height, pad, raw, &out),
        Command::Transfer {
            checkpoint,
            data,
            freeze,
            common,
        } => commands::transfer(&ctx, &checkpoint, &data, freeze, &common),
        Command::Stats { records, out } => commands::stats(&ctx, &records, out.as_deref()),
        Command::Verify { suite } => commands::verify(suite),
        Command::Replay { manifest, out } => {
            let argv = commands::replay_argv(&manifest, &out)?;
            let mut full = vec!["gcnn".to_string()];
            full.extend(argv.iter().cloned());
            let replayed = Cli::try_parse_from(full).map_err(|e| Error::Config(format!("manifest arguments: {e}")))?;
            if matches!(replayed.command, Command::Replay { .. }) {
                return Err(Error::Config("a replay manifest cannot itself be replayed".into()));
            }
            run(replayed, argv)
        }
    }
}
