use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lanerisk::commands::{self, parse_resolution, Profile, RunConfig, SEED_ENV};
use lanerisk::datapipe::{Palette, MASK_ALPHA};
use lanerisk::eval::{render_report, report_csv};
use lanerisk::synthgen::SceneParams;
use lanerisk::Error;

#[derive(Parser)]
#[command(name = "lanerisk", version, about = "Lane-change risk classification from video clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Composite segmentation masks onto one clip's frames.
    Overlay(OverlayArgs),
    /// Train one model and write its checkpoint and loss history.
    Train(RunArgs),
    /// Cross-validate architectures over the T sweep.
    Crossval(RunArgs),
    /// Merge report.csv files from earlier runs into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_clips: usize,
    /// Frame size, HxW.
    #[arg(long, default_value = "32x32")]
    resolution: String,
    /// Frames per clip.
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    risk_fraction: f64,
    #[arg(long, default_value_t = 10)]
    annotators: usize,
    #[arg(long, default_value_t = 0.05)]
    annotator_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    overlap: f64,
    /// Also write stand-in feature files of this width.
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    clip: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = MASK_ALPHA)]
    alpha: f64,
    /// Class colours, e.g. `car=0,255,255;truck=255,0,255`.
    #[arg(long)]
    palette: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// key=value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale defaults (the default profile).
    #[arg(long, conflicts_with = "paper")]
    desk: bool,
    /// Published training settings.
    #[arg(long)]
    paper: bool,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated: fbf-cnn, cnn-lstm, ft-softmax, ft-lstm.
    #[arg(long)]
    arch: Option<String>,
    /// raw, masked or features.
    #[arg(long)]
    input: Option<String>,
    /// Comma-separated frame counts.
    #[arg(long)]
    t_sweep: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    decay: Option<String>,
    /// Weight the loss by inverse class frequency (true/false).
    #[arg(long)]
    balance: Option<String>,
    /// Model input size, HxW.
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding report.csv files (directly or one level down).
    dir: PathBuf,
    /// Also write the merged table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> lanerisk::Result<RunConfig> {
        let profile = match (self.desk, self.paper) {
            (true, _) => Some(Profile::Desk),
            (_, true) => Some(Profile::Paper),
            _ => None,
        };
        let mut overrides = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        put("dataset", self.dataset.as_ref().map(|p| p.display().to_string()));
        put("arch", self.arch.clone());
        put("input", self.input.clone());
        put("t-sweep", self.t_sweep.clone());
        put("k", self.k.clone());
        put("seed", self.seed.clone());
        put("epochs", self.epochs.clone());
        put("batch", self.batch.clone());
        put("lr", self.lr.clone());
        put("decay", self.decay.clone());
        put("balance", self.balance.clone());
        put("resolution", self.resolution.clone());
        put("alpha", self.alpha.clone());
        put("jobs", self.jobs.clone());
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        let env_seed = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(profile, self.config.as_deref(), &overrides, env_seed.as_deref())
    }
}

fn env_seed() -> lanerisk::Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}: invalid seed {s:?}"))),
        Err(_) => Ok(0),
    }
}

fn synth(a: &SynthArgs) -> lanerisk::Result<()> {
    let (height, width) = parse_resolution(&a.resolution)?;
    let params = SceneParams {
        n_clips: a.n_clips,
        height,
        width,
        frames: a.frames,
        seed: match a.seed {
            Some(s) => s,
            None => env_seed()?,
        },
        risk_fraction: a.risk_fraction,
        annotators: a.annotators,
        annotator_noise: a.annotator_noise,
        overlap: a.overlap,
        feature_dim: a.features,
        ..SceneParams::default()
    };
    params.validate()?;
    let truth = commands::with_jobs(a.jobs, || commands::cmd_synth(&params, &a.out))??;
    let risky = truth.iter().filter(|t| t.is_risky).count();
    println!("wrote {} clips ({risky} risky) to {}", truth.len(), a.out.display());
    Ok(())
}

fn overlay(a: &OverlayArgs) -> lanerisk::Result<()> {
    let palette = match &a.palette {
        Some(p) => p.parse()?,
        None => Palette::default(),
    };
    let n = commands::cmd_overlay(&a.dataset, &a.clip, &a.out, &palette, a.alpha)?;
    println!("wrote {n} frames to {}", a.out.display());
    Ok(())
}

fn train(a: &RunArgs) -> lanerisk::Result<()> {
    let cfg = a.resolve()?;
    let outcome = commands::cmd_train(&cfg)?;
    if let Some(last) = outcome.history.epochs.last() {
        println!(
            "{} ({} params): epoch {} train loss {:.4}, val loss {}",
            outcome.spec.label(),
            outcome.params,
            last.epoch,
            last.train_loss,
            last.val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn crossval(a: &RunArgs) -> lanerisk::Result<()> {
    let cfg = a.resolve()?;
    let rows = commands::cmd_crossval(&cfg)?;
    print!("{}", render_report(&rows));
    Ok(())
}

fn report(a: &ReportArgs) -> lanerisk::Result<()> {
    let rows = commands::cmd_report(&a.dir)?;
    if let Some(path) = &a.csv {
        std::fs::write(path, report_csv(&rows)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    print!("{}", render_report(&rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Overlay(a) => overlay(a),
        Command::Train(a) => train(a),
        Command::Crossval(a) => crossval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lanerisk: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
