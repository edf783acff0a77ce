use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use bevdistill::detector::Modality;
use bevdistill::losses::DistillPath;
use bevdistill_cli::{
    cmd_ablate, cmd_distill, cmd_eval, cmd_gen_scenes, cmd_grad_check, cmd_dump_resp, cmd_train,
    resolve_distill_config, AppError, RunConfig,
};

/// Train, distill, and evaluate toy BEV detectors on synthetic scenes.
#[derive(Parser)]
#[command(name = "bevdistill", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic scene file.
    GenScenes {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one detector on the detection loss alone.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// lidar, camera, or fusion.
        #[arg(long)]
        modality: String,
        #[arg(long)]
        scenes: PathBuf,
        /// Output directory (checkpoint.ckpt + metrics.csv).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a student against a frozen teacher on the combined objective.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        /// l2c, c2l, f2l, or f2c.
        #[arg(long)]
        path: String,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        lambda3: Option<f64>,
    },
    /// Evaluate a checkpoint on a scene file.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every loss gradient.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Run one ablation study grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// fea-mode, fea-level, rel-mode, rel-level, resp-mode, resp-max,
        /// adapt, or loss-combos.
        #[arg(long)]
        study: String,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Distillation path the study runs on.
        #[arg(long, default_value = "f2c")]
        path: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the channel-mean response map of one scene as PGM + CSV.
    DumpResp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        scene_id: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn apply_overrides(
    cfg: &mut RunConfig,
    steps: Option<usize>,
    batch: Option<usize>,
    seed: Option<u64>,
) {
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(b) = batch {
        cfg.batch = b;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
}

fn parse<T: FromStr<Err = String>>(what: &str, s: &str) -> Result<T, AppError> {
    s.parse().map_err(|e: String| AppError::Usage(format!("bad {what}: {e}")))
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::GenScenes {
            config,
            count,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.scene.seed = s;
            }
            cmd_gen_scenes(&cfg, count, &out)
        }
        Cmd::Train {
            config,
            modality,
            scenes,
            out,
            steps,
            batch,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            apply_overrides(&mut cfg, steps, batch, seed);
            let modality: Modality = parse("modality", &modality)?;
            cmd_train(&cfg, modality, &scenes, &out)
        }
        Cmd::Distill {
            config,
            path,
            teacher,
            scenes,
            out,
            steps,
            batch,
            seed,
            lambda1,
            lambda2,
            lambda3,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            apply_overrides(&mut cfg, steps, batch, seed);
            let path: DistillPath = parse("path", &path)?;
            let dcfg = resolve_distill_config(&cfg, path, (lambda1, lambda2, lambda3));
            cmd_distill(&cfg, &dcfg, &teacher, &scenes, &out)
        }
        Cmd::Eval {
            config,
            checkpoint,
            scenes,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            cmd_eval(&cfg, &checkpoint, &scenes, &out)
        }
        Cmd::GradCheck { tol } => cmd_grad_check(tol),
        Cmd::Ablate {
            config,
            study,
            scenes,
            out,
            seeds,
            path,
            steps,
            batch,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            apply_overrides(&mut cfg, steps, batch, seed);
            let path: DistillPath = parse("path", &path)?;
            cmd_ablate(&cfg, &study, &scenes, &out, seeds.max(1), path)
        }
        Cmd::DumpResp {
            checkpoint,
            scenes,
            scene_id,
            out,
        } => cmd_dump_resp(&checkpoint, &scenes, scene_id, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are success, anything else is a usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
