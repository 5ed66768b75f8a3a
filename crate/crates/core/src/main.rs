use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use serde::Serialize;

use splatfuse::commands::{self, exit};
use splatfuse::config::PipelineConfig;
use splatfuse::scene_io::SyntheticScene;
use splatfuse::{Error, Result};

/// Feed-forward Gaussian splat reconstruction for indoor multi-view captures.
#[derive(Parser, Debug)]
#[command(name = "splatfuse", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda2=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<PipelineConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        overrides.extend_from_slice(extra);
        commands::load_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DepthFormat {
    Pfm,
    Png,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict depth, lift, fuse and clean the views; write scene.ply.
    Reconstruct {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lift from the manifest depth maps instead of predicting depth.
        #[arg(long)]
        use_gt_depth: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render a PLY at the manifest cameras.
    Render {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated view ids (default: all).
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long, default_value_t = 16)]
        tile_size: usize,
        #[arg(long, value_enum, default_value_t = DepthFormat::Pfm)]
        depth_format: DepthFormat,
    },
    /// Depth-regularised refinement of a reconstructed scene.
    Finetune {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Iterations (default: `finetune_iters` from the config).
        #[arg(long)]
        iters: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Image and depth metrics of a render directory against the manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Fusion and floater-removal statistics, without writing a scene.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        use_gt_depth: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic room capture.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON scene description (default: the standard room).
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 384)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_json(value: &impl Serialize) {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    // a closed pipe (e.g. `| head`) is not an error for a report
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn gt_flag(on: bool) -> Vec<String> {
    if on { vec!["use_gt_depth=true".into()] } else { Vec::new() }
}

fn read_scene_desc(path: &Path) -> Result<SyntheticScene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Reconstruct { manifest, out, use_gt_depth, config } => {
            let cfg = config.load(&gt_flag(use_gt_depth))?;
            let rec = commands::cmd_reconstruct(&manifest, &cfg, &out)?;
            print_json(&rec.stats);
        }
        Command::Render { ply, manifest, out, views, tile_size, depth_format } => {
            let ext = match depth_format {
                DepthFormat::Pfm => "pfm",
                DepthFormat::Png => "png",
            };
            print_json(&commands::cmd_render(&ply, &manifest, &out, views.as_deref(), tile_size, ext)?);
        }
        Command::Finetune { ply, manifest, out, iters, config } => {
            let cfg = config.load(&[])?;
            let iters = iters.unwrap_or(cfg.finetune_iters);
            let (_, summary) = commands::cmd_finetune(&ply, &manifest, iters, &cfg, &out)?;
            print_json(&summary);
        }
        Command::Eval { pred, manifest } => print_json(&commands::cmd_eval(&pred, &manifest)?),
        Command::Stats { manifest, use_gt_depth, config } => {
            let cfg = config.load(&gt_flag(use_gt_depth))?;
            print_json(&commands::cmd_stats(&manifest, &cfg)?);
        }
        Command::Synth { out, scene, views, width, height, seed } => {
            let desc = match scene {
                Some(p) => read_scene_desc(&p)?,
                None => SyntheticScene::standard_room(views, width, height, seed),
            };
            let manifest = commands::cmd_synth(&desc, &out)?;
            let _ = writeln!(std::io::stdout(), "{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG as u8 } else { exit::OK as u8 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("cannot set thread count: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
