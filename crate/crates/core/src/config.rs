//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments, lists are comma-separated. The
//! `task` key picks the defaults every other key overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mimo::{CsiMode, PerturbationRule};
use crate::quantizer::{AnnealSchedule, DEFAULT_SLOPE_FACTOR};

/// Detection channel realization used by default. Among seeds 1 to 16 its
/// unquantized MAP bit error rate at 10 dB is the closest to 1e-3.
pub const DEFAULT_CHANNEL_SEED: u64 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentTask {
    ChannelEst,
    Detection,
}

impl ExperimentTask {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentTask::ChannelEst => "channel-est",
            ExperimentTask::Detection => "detection",
        }
    }
}

/// Learned system variants a sweep can train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Trainable tanh-sum quantizer, hardened after training.
    Soft,
    /// Fixed uniform quantizer modeled as additive noise.
    Passing,
    /// Tanh-sum quantizer frozen at the uniform partition.
    UniformSoft,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Soft => "soft",
            Variant::Passing => "passing",
            Variant::UniformSoft => "uniform-soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Variant::Soft),
            "passing" => Ok(Variant::Passing),
            "uniform-soft" => Ok(Variant::UniformSoft),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Channel knowledge used to generate training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CsiChoice {
    Exact,
    Perturbed,
}

impl CsiChoice {
    pub fn name(self) -> &'static str {
        match self {
            CsiChoice::Exact => "exact",
            CsiChoice::Perturbed => "perturbed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(CsiChoice::Exact),
            "perturbed" => Ok(CsiChoice::Perturbed),
            other => Err(Error::Config(format!("unknown CSI mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: ExperimentTask,
    pub seed: u64,
    pub out: Option<PathBuf>,

    pub users: usize,
    pub antennas: usize,

    // channel estimation
    pub pilot_len: usize,
    pub snr: f64,
    pub resolutions: Vec<usize>,
    pub snr_uncertainty: bool,

    // detection
    pub rates: Vec<f64>,
    pub snr_db: Vec<f64>,
    pub hidden_width: usize,
    pub normalize_channel: bool,
    /// Seed of the fixed detection channel, independent of the master seed.
    pub channel_seed: u64,
    pub csi: Vec<CsiChoice>,
    pub csi_fraction: f64,
    pub csi_rule: PerturbationRule,
    /// Training samples sharing one channel perturbation.
    pub csi_block: usize,
    pub baselines: bool,

    // learned systems
    pub variants: Vec<Variant>,
    pub support: f64,
    pub slope_factor: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub quantizer_lr_scale: f64,
    pub anneal_factor: f64,
    pub anneal_shifts: bool,
}

impl ExperimentConfig {
    pub fn channel_est() -> Self {
        Self {
            task: ExperimentTask::ChannelEst,
            seed: 1,
            out: None,
            users: 4,
            antennas: 10,
            pilot_len: 12,
            snr: 4.0,
            resolutions: vec![2, 4, 8, 16],
            snr_uncertainty: false,
            rates: vec![1.0, 2.0],
            snr_db: vec![6.0, 8.0, 10.0, 12.0, 14.0],
            hidden_width: 32,
            normalize_channel: true,
            channel_seed: DEFAULT_CHANNEL_SEED,
            csi: vec![CsiChoice::Exact],
            csi_fraction: 0.2,
            csi_rule: PerturbationRule::Linear,
            csi_block: 1,
            baselines: true,
            variants: vec![Variant::Soft],
            support: 2.0,
            slope_factor: DEFAULT_SLOPE_FACTOR,
            train_size: 1 << 15,
            eval_size: 1 << 10,
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.01,
            quantizer_lr_scale: 1.0,
            anneal_factor: 1.0,
            anneal_shifts: true,
        }
    }

    pub fn detection() -> Self {
        Self {
            task: ExperimentTask::Detection,
            antennas: 12,
            variants: vec![Variant::Soft, Variant::Passing, Variant::UniformSoft],
            train_size: 5000,
            eval_size: 20000,
            epochs: 200,
            ..Self::channel_est()
        }
    }

    pub fn for_task(task: ExperimentTask) -> Self {
        match task {
            ExperimentTask::ChannelEst => Self::channel_est(),
            ExperimentTask::Detection => Self::detection(),
        }
    }

    pub fn anneal(&self) -> AnnealSchedule {
        AnnealSchedule {
            factor: self.anneal_factor,
            co_scale_shifts: self.anneal_shifts,
        }
    }

    pub fn csi_mode(&self, choice: CsiChoice) -> CsiMode {
        match choice {
            CsiChoice::Exact => CsiMode::Exact,
            CsiChoice::Perturbed => CsiMode::Perturbed {
                fraction: self.csi_fraction,
                rule: self.csi_rule,
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", k + 1)))?;
            let key = key.trim();
            if pairs.iter().any(|(seen, _, _): &(&str, &str, usize)| *seen == key) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", k + 1)));
            }
            pairs.push((key, value.trim(), k + 1));
        }
        let task = match pairs.iter().find(|(k, _, _)| *k == "task") {
            Some((_, "channel-est", _)) => ExperimentTask::ChannelEst,
            Some((_, "detection", _)) => ExperimentTask::Detection,
            Some((_, other, line)) => return Err(Error::Config(format!("line {line}: unknown task '{other}'"))),
            None => return Err(Error::Config("missing 'task' key".into())),
        };
        let mut cfg = Self::for_task(task);
        for (key, value, line) in pairs {
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {line}: {}", strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => {}
            "seed" => self.seed = scalar(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "users" => self.users = scalar(key, value)?,
            "antennas" => self.antennas = scalar(key, value)?,
            "pilot_len" => self.pilot_len = scalar(key, value)?,
            "snr" => self.snr = scalar(key, value)?,
            "resolutions" => self.resolutions = list(key, value, |v| scalar(key, v))?,
            "snr_uncertainty" => self.snr_uncertainty = scalar(key, value)?,
            "rates" => self.rates = list(key, value, |v| scalar(key, v))?,
            "snr_db" => self.snr_db = list(key, value, |v| scalar(key, v))?,
            "hidden_width" => self.hidden_width = scalar(key, value)?,
            "normalize_channel" => self.normalize_channel = scalar(key, value)?,
            "channel_seed" => self.channel_seed = scalar(key, value)?,
            "csi" => self.csi = list(key, value, CsiChoice::parse)?,
            "csi_fraction" => self.csi_fraction = scalar(key, value)?,
            "csi_rule" => {
                self.csi_rule = match value {
                    "linear" => PerturbationRule::Linear,
                    "squared" => PerturbationRule::Squared,
                    other => return Err(Error::Config(format!("unknown csi_rule '{other}'"))),
                }
            }
            "csi_block" => self.csi_block = scalar(key, value)?,
            "baselines" => self.baselines = scalar(key, value)?,
            "variants" => self.variants = list(key, value, Variant::parse)?,
            "support" => self.support = scalar(key, value)?,
            "slope_factor" => self.slope_factor = scalar(key, value)?,
            "train_size" => self.train_size = scalar(key, value)?,
            "eval_size" => self.eval_size = scalar(key, value)?,
            "epochs" => self.epochs = scalar(key, value)?,
            "batch_size" => self.batch_size = scalar(key, value)?,
            "learning_rate" => self.learning_rate = scalar(key, value)?,
            "quantizer_lr_scale" => self.quantizer_lr_scale = scalar(key, value)?,
            "anneal_factor" => self.anneal_factor = scalar(key, value)?,
            "anneal_shifts" => self.anneal_shifts = scalar(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.users == 0 || self.antennas == 0 {
            return fail("users and antennas must be positive");
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return fail("train_size and eval_size must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.csi_block == 0 || self.hidden_width == 0 {
            return fail("epochs, batch_size, csi_block and hidden_width must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.quantizer_lr_scale >= 0.0) || !(self.anneal_factor >= 1.0) {
            return fail("learning_rate and quantizer_lr_scale must be >= 0, anneal_factor >= 1");
        }
        if !(self.support > 0.0) || !(self.slope_factor > 0.0) || !(self.csi_fraction >= 0.0) {
            return fail("support and slope_factor must be positive, csi_fraction >= 0");
        }
        if self.variants.is_empty() || self.csi.is_empty() {
            return fail("variants and csi lists must be nonempty");
        }
        match self.task {
            ExperimentTask::ChannelEst => {
                if self.resolutions.is_empty() || self.resolutions.iter().any(|&m| m < 2) {
                    return fail("resolutions must be a nonempty list of integers >= 2");
                }
                if self.pilot_len < self.users || !(self.snr > 0.0) {
                    return fail("need pilot_len >= users and snr > 0");
                }
            }
            ExperimentTask::Detection => {
                if self.rates.is_empty() || self.rates.iter().any(|&r| !(r > 0.0)) {
                    return fail("rates must be a nonempty list of positive values");
                }
                if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
                    return fail("snr_db must be a nonempty list of finite values");
                }
                if self.users > 16 {
                    return fail("detection supports at most 16 users");
                }
            }
        }
        Ok(())
    }

    /// Canonical `key = value` rendering of every field, used for the digest.
    pub fn render(&self) -> String {
        let join = |items: Vec<String>| items.join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("task", self.task.name().into());
        kv("seed", self.seed.to_string());
        kv("users", self.users.to_string());
        kv("antennas", self.antennas.to_string());
        kv("pilot_len", self.pilot_len.to_string());
        kv("snr", format!("{:?}", self.snr));
        kv("resolutions", join(self.resolutions.iter().map(|m| m.to_string()).collect()));
        kv("snr_uncertainty", self.snr_uncertainty.to_string());
        kv("rates", join(self.rates.iter().map(|r| format!("{r:?}")).collect()));
        kv("snr_db", join(self.snr_db.iter().map(|s| format!("{s:?}")).collect()));
        kv("hidden_width", self.hidden_width.to_string());
        kv("normalize_channel", self.normalize_channel.to_string());
        kv("channel_seed", self.channel_seed.to_string());
        kv("csi", join(self.csi.iter().map(|c| c.name().to_string()).collect()));
        kv("csi_fraction", format!("{:?}", self.csi_fraction));
        kv(
            "csi_rule",
            match self.csi_rule {
                PerturbationRule::Linear => "linear",
                PerturbationRule::Squared => "squared",
            }
            .into(),
        );
        kv("csi_block", self.csi_block.to_string());
        kv("baselines", self.baselines.to_string());
        kv("variants", join(self.variants.iter().map(|v| v.name().to_string()).collect()));
        kv("support", format!("{:?}", self.support));
        kv("slope_factor", format!("{:?}", self.slope_factor));
        kv("train_size", self.train_size.to_string());
        kv("eval_size", self.eval_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("quantizer_lr_scale", format!("{:?}", self.quantizer_lr_scale));
        kv("anneal_factor", format!("{:?}", self.anneal_factor));
        kv("anneal_shifts", self.anneal_shifts.to_string());
        out
    }

    /// First 16 hex digits of the SHA-256 of [`render`](Self::render). The
    /// output path is not part of the digest.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.render().as_bytes());
        hash.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

fn scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

fn list<T>(key: &str, value: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if value.is_empty() {
        return Err(Error::Config(format!("'{key}' needs at least one value")));
    }
    value.split(',').map(|v| parse(v.trim())).collect()
}
