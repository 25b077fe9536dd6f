use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use taskquant::checkpoint;
use taskquant::config::{CsiChoice, ExperimentConfig, ExperimentTask, Variant};
use taskquant::harness::{
    channel_est_scenario, detection_channel, detection_eval_set, emit_csv, evaluate_mse, network_ber,
    run_baselines, run_sweep, train_channel_estimator, train_detector, write_csv, Estimate, SweepResult,
};
use taskquant::mimo::{gen_channel_est, gen_detection_blocks, DetectionScenario, SnrMode};
use taskquant::rng::stream_rng;
use taskquant::Error;

#[derive(Parser)]
#[command(name = "taskquant", version, about = "Learned-quantizer MIMO experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path (CSV, dataset or checkpoint depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Learned system to train: soft, passing or uniform-soft.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Channel knowledge for training data: exact or perturbed.
    #[arg(long, global = true)]
    csi: Option<String>,

    /// Train channel estimators with the SNR drawn per sample.
    #[arg(long, global = true)]
    snr_uncertainty: bool,

    /// Checkpoint to evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the training set of the first grid point as CSV.
    Gen,
    /// Train a single model at the first grid point and write a checkpoint.
    Train,
    /// Evaluate a checkpoint at the first grid point.
    Eval,
    /// Run the full sweep and write CSV.
    Sweep,
    /// Bounds and MAP curves only.
    Baseline,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    })?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(mode) = &cli.mode {
        cfg.variants = vec![Variant::parse(mode)?];
    }
    if let Some(csi) = &cli.csi {
        cfg.csi = vec![CsiChoice::parse(csi)?];
    }
    if cli.snr_uncertainty {
        cfg.snr_uncertainty = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_out(cfg: &ExperimentConfig) -> Result<&Path, Error> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::Config("an output path is required (--out or `out =`)".into()))
}

fn write_result(result: &SweepResult, cfg: &ExperimentConfig) -> Result<(), Error> {
    match &cfg.out {
        Some(path) => emit_csv(result, path),
        None => write_csv(result, std::io::stdout().lock()),
    }
}

fn first_detection_point(cfg: &ExperimentConfig) -> Result<(DetectionScenario, f64, String), Error> {
    let (rate, snr_db) = (cfg.rates[0], cfg.snr_db[0]);
    let scenario = DetectionScenario::from_snr_db(detection_channel(cfg)?, snr_db)?;
    Ok((scenario, rate, format!("rate={rate};snr_db={snr_db}")))
}

fn snr_mode(cfg: &ExperimentConfig) -> SnrMode {
    if cfg.snr_uncertainty {
        SnrMode::UNCERTAIN
    } else {
        SnrMode::Fixed
    }
}

fn gen(cfg: &ExperimentConfig) -> Result<(), Error> {
    let out = required_out(cfg)?;
    let set = match cfg.task {
        ExperimentTask::ChannelEst => {
            let mut rng = stream_rng(cfg.seed, "gen/channel-est");
            gen_channel_est(&channel_est_scenario(cfg)?, cfg.train_size, &mut rng, snr_mode(cfg))?
        }
        ExperimentTask::Detection => {
            let (scenario, _, _) = first_detection_point(cfg)?;
            let mut rng = stream_rng(cfg.seed, "gen/detection");
            gen_detection_blocks(&scenario, cfg.train_size, cfg.csi_block, &mut rng, cfg.csi_mode(cfg.csi[0]))?
        }
    };
    set.write_csv(out)
}

fn train_one(cfg: &ExperimentConfig) -> Result<(), Error> {
    let out = required_out(cfg)?;
    let variant = cfg.variants[0];
    let (net, history) = match cfg.task {
        ExperimentTask::ChannelEst => {
            let scenario = channel_est_scenario(cfg)?;
            train_channel_estimator(cfg, &scenario, cfg.resolutions[0], variant, snr_mode(cfg), "train")?
        }
        ExperimentTask::Detection => {
            let (scenario, rate, _) = first_detection_point(cfg)?;
            train_detector(cfg, &scenario, rate, variant, cfg.csi[0], "train")?
        }
    };
    if let Some(loss) = history.last() {
        log::info!("final training loss {loss}");
    }
    checkpoint::save(&net, out)
}

fn eval(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<(), Error> {
    let path = path.ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let net = checkpoint::load(path)?;
    let mut result = SweepResult::new(cfg.seed, cfg.digest());
    let name = "checkpoint";
    match cfg.task {
        ExperimentTask::ChannelEst => {
            let scenario = channel_est_scenario(cfg)?;
            let mut rng = stream_rng(cfg.seed, "channel-est/eval");
            let set = gen_channel_est(&scenario, cfg.eval_size, &mut rng, SnrMode::Fixed)?;
            let var = format!("resolution={}", net.bank().stage().resolution());
            result.push(0, &var, name, "mse", evaluate_mse(&net, &set)?);
        }
        ExperimentTask::Detection => {
            let (scenario, _, var) = first_detection_point(cfg)?;
            let set = detection_eval_set(cfg, &scenario)?;
            result.push(0, &var, name, "ber", network_ber(&net, &set)?);
        }
    }
    result.push(0, "-", name, "total_bits", Estimate::exact(net.bank().total_bits()));
    write_result(&result, cfg)
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Gen => gen(&cfg)?,
        Command::Train => train_one(&cfg)?,
        Command::Eval => eval(&cfg, cli.checkpoint.as_deref())?,
        Command::Sweep => {
            let result = run_sweep(&cfg)?;
            write_result(&result, &cfg)?;
            if result.rows.iter().any(|r| r.metric == "failed") {
                error!("training diverged at one or more grid points");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Baseline => write_result(&run_baselines(&cfg)?, &cfg)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Diverged { .. } => 3,
                _ => 1,
            })
        }
    }
}
