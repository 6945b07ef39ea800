use std::path::PathBuf;
use std::process::ExitCode;

use adasfm_cli::commands::{self, CliResult, CommonOptions};
use clap::{Args, Parser, Subcommand};

/// Coarse-to-fine structure from motion on synthetic or exported scenes.
#[derive(Parser, Debug)]
#[command(name = "adasfm", version)]
struct Cli {
    /// TOML configuration; a scene spec for `synth`, pipeline settings otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; also holds intermediate stage files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for every randomized stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for local reconstruction.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Write detailed per-stage reports.
    #[arg(long, global = true)]
    stage_dump: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct SceneArg {
    /// Directory written by `synth`.
    #[arg(long)]
    scene: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene.
    Synth,
    /// Run every stage and write the merged reconstruction.
    Pipeline(SceneArg),
    /// Global SfM on the scene's view graph.
    Global(SceneArg),
    /// Epipolar match refinement with the global poses.
    Refine(SceneArg),
    /// Partition the refined view graph.
    Partition(SceneArg),
    /// Local SfM of every partition.
    Local(SceneArg),
    /// Align the local reconstructions and merge them.
    Align(SceneArg),
    /// Metrics of a reconstruction against the scene's ground truth.
    Eval {
        #[command(flatten)]
        scene: SceneArg,
        /// Reconstruction file to evaluate.
        #[arg(long)]
        reconstruction: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let opts = CommonOptions {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        workers: cli.workers,
        stage_dump: cli.stage_dump,
    };
    if let Command::Synth = cli.command {
        return commands::synth(&opts);
    }
    let config = commands::resolve_config(&opts)?;
    match &cli.command {
        Command::Synth => unreachable!(),
        Command::Pipeline(s) => commands::pipeline(&commands::load_scene(&s.scene)?, &config, &opts).map(drop),
        Command::Global(s) => commands::global(&commands::load_scene(&s.scene)?, &config, &opts),
        Command::Refine(s) => commands::refine(&commands::load_scene(&s.scene)?, &config, &opts),
        Command::Partition(_) => commands::partition(&config, &opts),
        Command::Local(s) => commands::local(&commands::load_scene(&s.scene)?, &config, &opts),
        Command::Align(s) => commands::align(&commands::load_scene(&s.scene)?, &config, &opts).map(drop),
        Command::Eval { scene, reconstruction } => {
            commands::eval(&commands::load_scene(&scene.scene)?, reconstruction, &opts).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADASFM_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
