//! Line-based `key=value` configuration.
//!
//! Blank lines and `#` comments are ignored; every key is optional and
//! falls back to the defaults below.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rerank::RerankParams;
use crate::tlift::TLiftParams;
use crate::train::{TrainConfig, UpdateMode};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "QACONV_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub kernel_size: usize,
    pub workers: usize,
    pub tlift: TLiftParams,
    pub rerank: RerankParams,
    pub train: TrainConfig,
    pub r_max: usize,
    pub threshold: f32,
    pub max_frac: f64,
    pub flip_p: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            kernel_size: 1,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            tlift: TLiftParams::default(),
            rerank: RerankParams::default(),
            train: TrainConfig::default(),
            r_max: 20,
            threshold: 0.5,
            max_frac: crate::augment::DEFAULT_MAX_FRAC,
            flip_p: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Format(format!("config: invalid value {value:?} for {key}")))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut ema_decay = 0.5f32;
        let mut ema = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "kernel_size" | "s" => cfg.kernel_size = parse(key, value)?,
                "workers" => cfg.workers = parse(key, value)?,
                "tau" => cfg.tlift.tau = parse(key, value)?,
                "sigma" => cfg.tlift.sigma = parse(key, value)?,
                "k" | "K" => cfg.tlift.k = parse(key, value)?,
                "alpha" => cfg.tlift.alpha = parse(key, value)?,
                "include_query_camera" => cfg.tlift.include_query_camera = parse(key, value)?,
                "k1" => cfg.rerank.k1 = parse(key, value)?,
                "k2" => cfg.rerank.k2 = parse(key, value)?,
                "lambda" => cfg.rerank.lambda = parse(key, value)?,
                "gamma" => cfg.train.gamma = parse(key, value)?,
                "batch_size" | "batch" => cfg.train.batch_size = parse(key, value)?,
                "lr" => cfg.train.lr = parse(key, value)?,
                "lr_decay" | "decay" => cfg.train.lr_decay = parse(key, value)?,
                "decay_epoch" => cfg.train.decay_epoch = parse(key, value)?,
                "epochs" => cfg.train.epochs = parse(key, value)?,
                "momentum" => cfg.train.momentum = parse(key, value)?,
                "update_mode" => {
                    ema = match value {
                        "direct" => false,
                        "ema" => true,
                        _ => return Err(Error::Format(format!("config: update_mode must be direct or ema, got {value:?}"))),
                    }
                }
                "ema_decay" => ema_decay = parse(key, value)?,
                "r_max" => cfg.r_max = parse(key, value)?,
                "threshold" => cfg.threshold = parse(key, value)?,
                "max_frac" => cfg.max_frac = parse(key, value)?,
                "flip_p" => cfg.flip_p = parse(key, value)?,
                _ => return Err(Error::Format(format!("config line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        cfg.train.update_mode = if ema { UpdateMode::Ema { decay: ema_decay } } else { UpdateMode::Direct };
        cfg.train.kernel_size = cfg.kernel_size;
        Ok(cfg)
    }

    /// Applies the worker-count environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            self.workers = parse(WORKERS_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.tlift.validate()?;
        self.rerank.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Precondition(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if self.r_max == 0 {
            return Err(Error::Precondition("r_max must be at least 1".into()));
        }
        Ok(())
    }
}
