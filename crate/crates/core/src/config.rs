//! Run settings and the flat `key = value` config file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, SsimConstants, SsimMode};
use crate::networks::{DiscriminatorConfig, GeneratorConfig};
use crate::pipeline::PreprocessConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lr_decay_start: u64,
    pub replay_buffer_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Stops early after this many steps when set.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 1,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lr_decay_start: 100,
            replay_buffer_size: 50,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            log_every: 100,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size < 1 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub ssim_mode: SsimMode,
    pub ssim_constants: SsimConstants,
}

/// Every key accepted in a config file.
pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "lr_decay_start",
    "replay_buffer_size",
    "lambda_cyc",
    "lambda_id",
    "lambda_ssim",
    "seed",
    "checkpoint_every",
    "log_every",
    "max_steps",
    "ssim_mode",
    "ssim_window",
    "ssim_sigma",
    "ssim_c1",
    "ssim_c2",
    "n_resblocks",
    "base_channels",
    "disc_layers",
    "disc_base_channels",
    "target_slices",
    "resize_dim",
    "crop_dim",
    "flip_prob",
    "max_rotation_deg",
    "augment",
];

fn bad(key: &str, want: &str, v: &toml::Value) -> Error {
    Error::Validation(format!("config key {key}: expected {want}, got {v}"))
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| bad(key, "a non-negative integer", v))
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    as_u64(key, v).map(|i| i as usize)
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| bad(key, "a number", v))
}

impl Settings {
    /// Sets the seed of every random stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.preprocess.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.preprocess.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.ssim_constants.validate()?;
        if let SsimMode::Windowed { size, sigma } = self.ssim_mode {
            if size < 1 || size > self.preprocess.crop_dim || !(sigma.is_finite() && sigma > 0.0) {
                return Err(Error::Validation(format!(
                    "SSIM window {size} (sigma {sigma}) does not fit crop_dim {}",
                    self.preprocess.crop_dim
                )));
            }
        }
        Ok(())
    }

    /// Applies the keys of a flat TOML document on top of `self`.
    pub fn apply_toml(mut self, text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Validation(format!("config is not valid key = value text: {e}")))?;
        let mut window = None;
        let mut sigma = None;
        for (key, v) in &table {
            let k = key.as_str();
            match k {
                "epochs" => self.train.epochs = as_u64(k, v)?,
                "batch_size" => self.train.batch_size = as_usize(k, v)?,
                "lr" => self.train.lr = as_f64(k, v)?,
                "adam_beta1" => self.train.adam_beta1 = as_f64(k, v)?,
                "adam_beta2" => self.train.adam_beta2 = as_f64(k, v)?,
                "lr_decay_start" => self.train.lr_decay_start = as_u64(k, v)?,
                "replay_buffer_size" => self.train.replay_buffer_size = as_usize(k, v)?,
                "lambda_cyc" => self.train.weights.lambda_cyc = as_f64(k, v)?,
                "lambda_id" => self.train.weights.lambda_id = as_f64(k, v)?,
                "lambda_ssim" => self.train.weights.lambda_ssim = as_f64(k, v)?,
                "seed" => {
                    let s = as_u64(k, v)?;
                    self = self.with_seed(s);
                }
                "checkpoint_every" => self.train.checkpoint_every = as_u64(k, v)?,
                "log_every" => self.train.log_every = as_u64(k, v)?,
                "max_steps" => {
                    let n = as_u64(k, v)?;
                    self.train.max_steps = (n > 0).then_some(n);
                }
                "ssim_mode" => {
                    let s = v.as_str().ok_or_else(|| bad(k, "a string", v))?;
                    self.ssim_mode = SsimMode::parse(s)?;
                }
                "ssim_window" => window = Some(as_usize(k, v)?),
                "ssim_sigma" => sigma = Some(as_f64(k, v)?),
                "ssim_c1" => self.ssim_constants.c1 = as_f64(k, v)?,
                "ssim_c2" => self.ssim_constants.c2 = as_f64(k, v)?,
                "n_resblocks" => self.generator.n_resblocks = as_usize(k, v)?,
                "base_channels" => self.generator.base_channels = as_usize(k, v)?,
                "disc_layers" => self.discriminator.n_layers = as_usize(k, v)?,
                "disc_base_channels" => self.discriminator.base_channels = as_usize(k, v)?,
                "target_slices" => self.preprocess.target_slices = as_usize(k, v)?,
                "resize_dim" => self.preprocess.resize_dim = as_usize(k, v)?,
                "crop_dim" => self.preprocess.crop_dim = as_usize(k, v)?,
                "flip_prob" => self.preprocess.flip_prob = as_f64(k, v)?,
                "max_rotation_deg" => self.preprocess.max_rotation_deg = as_f64(k, v)?,
                "augment" => self.preprocess.augment = v.as_bool().ok_or_else(|| bad(k, "true or false", v))?,
                _ => {
                    return Err(Error::Validation(format!(
                        "unknown config key {key:?}; accepted keys: {}",
                        CONFIG_KEYS.join(", ")
                    )))
                }
            }
        }
        if let SsimMode::Windowed { size, sigma: s } = &mut self.ssim_mode {
            *size = window.unwrap_or(*size);
            *s = sigma.unwrap_or(*s);
        } else if window.is_some() || sigma.is_some() {
            return Err(Error::Validation("ssim_window and ssim_sigma need ssim_mode = \"windowed\"".into()));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Settings::default().apply_toml(&text)
    }

    /// The flat config text that reproduces these settings.
    pub fn to_toml(&self) -> String {
        let t = &self.train;
        let p = &self.preprocess;
        let mut lines = vec![
            format!("epochs = {}", t.epochs),
            format!("batch_size = {}", t.batch_size),
            format!("lr = {:?}", t.lr),
            format!("adam_beta1 = {:?}", t.adam_beta1),
            format!("adam_beta2 = {:?}", t.adam_beta2),
            format!("lr_decay_start = {}", t.lr_decay_start),
            format!("replay_buffer_size = {}", t.replay_buffer_size),
            format!("lambda_cyc = {:?}", t.weights.lambda_cyc),
            format!("lambda_id = {:?}", t.weights.lambda_id),
            format!("lambda_ssim = {:?}", t.weights.lambda_ssim),
            format!("seed = {}", t.seed),
            format!("checkpoint_every = {}", t.checkpoint_every),
            format!("log_every = {}", t.log_every),
            format!("max_steps = {}", t.max_steps.unwrap_or(0)),
            format!("ssim_mode = \"{}\"", self.ssim_mode.name()),
        ];
        if let SsimMode::Windowed { size, sigma } = self.ssim_mode {
            lines.push(format!("ssim_window = {size}"));
            lines.push(format!("ssim_sigma = {sigma:?}"));
        }
        lines.extend([
            format!("ssim_c1 = {:?}", self.ssim_constants.c1),
            format!("ssim_c2 = {:?}", self.ssim_constants.c2),
            format!("n_resblocks = {}", self.generator.n_resblocks),
            format!("base_channels = {}", self.generator.base_channels),
            format!("disc_layers = {}", self.discriminator.n_layers),
            format!("disc_base_channels = {}", self.discriminator.base_channels),
            format!("target_slices = {}", p.target_slices),
            format!("resize_dim = {}", p.resize_dim),
            format!("crop_dim = {}", p.crop_dim),
            format!("flip_prob = {:?}", p.flip_prob),
            format!("max_rotation_deg = {:?}", p.max_rotation_deg),
            format!("augment = {}", p.augment),
        ]);
        lines.join("\n") + "\n"
    }
}
