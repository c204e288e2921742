use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use drawdet::detector::Checkpoint;
use drawdet::selfsup::read_curve_log;
use drawdet_cli::config::{ExperimentGrid, RunConfig, StageKind};
use drawdet_cli::plot::{plot_curves, Series};
use drawdet_cli::render::{render_detections, RENDER_CONF, RENDER_NMS};
use drawdet_cli::{exit_code, rooted};

#[derive(Parser)]
#[command(name = "drawdet", version, about = "Face and body detection in drawings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Skip seeds (and grid points) that already finished.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural corpus as annotation files plus PNGs.
    GenSynthetic(RunArgs),
    /// Style-mixed supervised pre-training.
    Stage1(RunArgs),
    /// Teacher-student self-training on unlabeled drawings.
    Stage2(RunArgs),
    /// Fine-tuning on a labeled drawing subset.
    Stage3(RunArgs),
    /// Test AP of the `init` checkpoint.
    Eval(RunArgs),
    /// Run every point of an experiment grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Draw detections onto copies of PNG images.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = RENDER_CONF)]
        conf: f64,
        #[arg(long, default_value_t = RENDER_NMS)]
        nms: f64,
        /// Image files or directories of PNGs.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Teacher and student AP curves from stage-2 curve logs.
    Plot {
        /// Curve log; repeat to overlay runs.
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        /// Legend label per log, defaulting to the file path.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

fn run_stage(stage: StageKind, args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cfg.stage {
        Some(s) if s != stage => {
            return Err(drawdet::Error::Config(format!("config is for `{}`, not `{}`", s.name(), stage.name())).into())
        }
        _ => cfg.stage = Some(stage),
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = Some(dir);
    }
    let root = cfg.resolved_output_dir();
    let summary = drawdet_cli::run::run_config(&cfg, &root, args.resume)?;
    for (seed, report) in &summary.per_seed {
        match report {
            Some(r) => println!("seed {seed}: mean AP {:.4} ({:?})", r.mean_ap, r.per_class_ap),
            None => println!("seed {seed}: done"),
        }
    }
    if let Some(agg) = summary.aggregate {
        println!("mean AP {:.4} +- {:.4} over {} runs", agg.mean, agg.stddev, agg.n_runs);
    }
    println!("output: {}", root.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => run_stage(StageKind::GenSynthetic, a),
        Command::Stage1(a) => run_stage(StageKind::Stage1, a),
        Command::Stage2(a) => run_stage(StageKind::Stage2, a),
        Command::Stage3(a) => run_stage(StageKind::Stage3, a),
        Command::Eval(a) => run_stage(StageKind::Eval, a),
        Command::Grid { config, output_dir, resume } => {
            let grid = ExperimentGrid::load(&config)?;
            let root = match output_dir {
                Some(d) => rooted(&d),
                None => grid.base.resolved_output_dir(),
            };
            let rows = drawdet_cli::grid::run_grid(&grid, &root, resume)?;
            print!("{}", drawdet_cli::grid::grid_table(&grid, &rows));
            Ok(())
        }
        Command::Render { checkpoint, output_dir, conf, nms, images } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let n = render_detections(&ckpt, &images, &rooted(&output_dir), conf, nms)?;
            println!("rendered {n} images");
            Ok(())
        }
        Command::Plot { logs, labels, output_dir } => {
            if !labels.is_empty() && labels.len() != logs.len() {
                bail!(drawdet::Error::Config(format!("{} labels for {} logs", labels.len(), logs.len())));
            }
            let series = logs
                .iter()
                .enumerate()
                .map(|(i, path)| {
                    let records = read_curve_log(path).with_context(|| format!("reading {}", path.display()))?;
                    let label = labels.get(i).cloned().unwrap_or_else(|| path.display().to_string());
                    Ok(Series { label, records })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            for p in plot_curves(&series, &rooted(&output_dir))? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { drawdet_cli::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
