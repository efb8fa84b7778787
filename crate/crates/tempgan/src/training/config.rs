//! Training configuration and its `key = value` file format.
//!
//! Unknown keys are a hard error so config typos fail loudly. The SA-GAN
//! two-timescale defaults apply: generator 1e-4, discriminators 4e-4,
//! Adam moment decays (0.0, 0.9).

use std::path::{Path, PathBuf};

use super::TrainError;
use crate::volume_io::Dims;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub latent_size: usize,
    pub base_channels: usize,
    pub num_levels: usize,
    pub use_self_attention: bool,
    pub attention_level: Option<usize>,
    pub spectral_norm: bool,
    pub lr_generator: f64,
    pub lr_discriminators: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub g_temp_weight: f64,
    pub g_image_weight: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl TrainConfig {
    pub fn defaults(dataset: PathBuf, out_dir: PathBuf) -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 8,
            latent_size: 64,
            base_channels: 8,
            num_levels: 3,
            use_self_attention: true,
            attention_level: None,
            spectral_norm: true,
            lr_generator: 1e-4,
            lr_discriminators: 4e-4,
            beta1: 0.0,
            beta2: 0.9,
            d_steps_per_g_step: 1,
            seed: 0,
            dataset,
            out_dir,
            checkpoint_interval: 1000,
            log_interval: 10,
            g_temp_weight: 1.0,
            g_image_weight: 1.0,
            test_fraction: 0.1,
            split_seed: 9,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations < 1 {
            return Err(TrainError::Config("iterations must be >= 1".into()));
        }
        if self.lr_generator <= 0.0 || self.lr_discriminators <= 0.0 {
            return Err(TrainError::Config("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 || self.d_steps_per_g_step == 0 {
            return Err(TrainError::Config(
                "batch_size and d_steps_per_g_step must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(TrainError::Config("test_fraction must lie in [0, 1)".into()));
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            return Err(TrainError::Config("intervals must be >= 1".into()));
        }
        Ok(())
    }

    /// Network architecture for a given data extent.
    pub fn net_config(&self, dims: Dims) -> crate::networks::NetConfig {
        crate::networks::NetConfig {
            latent_size: self.latent_size,
            base_channels: self.base_channels,
            num_levels: self.num_levels,
            volume_dims: dims,
            use_self_attention: self.use_self_attention,
            attention_level: self.attention_level,
            spectral_norm: self.spectral_norm,
        }
    }

    /// Canonical single-line-per-key rendering; also the hashing input.
    pub fn canonical_string(&self) -> String {
        let attention_level = match self.attention_level {
            Some(l) => l.to_string(),
            None => "auto".into(),
        };
        format!(
            "attention_level = {attention_level}\n\
             base_channels = {}\n\
             batch_size = {}\n\
             beta1 = {}\n\
             beta2 = {}\n\
             checkpoint_interval = {}\n\
             d_steps_per_g_step = {}\n\
             dataset = {}\n\
             g_image_weight = {}\n\
             g_temp_weight = {}\n\
             iterations = {}\n\
             latent_size = {}\n\
             log_interval = {}\n\
             lr_discriminators = {}\n\
             lr_generator = {}\n\
             num_levels = {}\n\
             out_dir = {}\n\
             seed = {}\n\
             spectral_norm = {}\n\
             split_seed = {}\n\
             test_fraction = {}\n\
             use_self_attention = {}\n",
            self.base_channels,
            self.batch_size,
            self.beta1,
            self.beta2,
            self.checkpoint_interval,
            self.d_steps_per_g_step,
            self.dataset.display(),
            self.g_image_weight,
            self.g_temp_weight,
            self.iterations,
            self.latent_size,
            self.log_interval,
            self.lr_discriminators,
            self.lr_generator,
            self.num_levels,
            self.out_dir.display(),
            self.seed,
            self.spectral_norm,
            self.split_seed,
            self.test_fraction,
            self.use_self_attention,
        )
    }

    /// FNV-1a hash of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Parse the config file format: `key = value` lines, `#` comments,
/// unknown keys rejected. `dataset` and `out_dir` are required.
pub fn parse_config(text: &str) -> Result<TrainConfig, TrainError> {
    let mut cfg = TrainConfig::defaults(PathBuf::new(), PathBuf::new());
    let (mut saw_dataset, mut saw_out) = (false, false);
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| {
            TrainError::Config(format!("line {line_num}: expected `key = value`"))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            TrainError::Config(format!("line {line_num}: bad {what} value {value:?}"))
        };
        match key {
            "iterations" => cfg.iterations = value.parse().map_err(|_| bad(key))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad(key))?,
            "latent_size" => cfg.latent_size = value.parse().map_err(|_| bad(key))?,
            "base_channels" => cfg.base_channels = value.parse().map_err(|_| bad(key))?,
            "num_levels" => cfg.num_levels = value.parse().map_err(|_| bad(key))?,
            "use_self_attention" => {
                cfg.use_self_attention = value.parse().map_err(|_| bad(key))?
            }
            "attention_level" => {
                cfg.attention_level = if value == "auto" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad(key))?)
                }
            }
            "spectral_norm" => cfg.spectral_norm = value.parse().map_err(|_| bad(key))?,
            "lr_generator" => cfg.lr_generator = value.parse().map_err(|_| bad(key))?,
            "lr_discriminators" => {
                cfg.lr_discriminators = value.parse().map_err(|_| bad(key))?
            }
            "beta1" => cfg.beta1 = value.parse().map_err(|_| bad(key))?,
            "beta2" => cfg.beta2 = value.parse().map_err(|_| bad(key))?,
            "d_steps_per_g_step" => {
                cfg.d_steps_per_g_step = value.parse().map_err(|_| bad(key))?
            }
            "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
            "dataset" => {
                cfg.dataset = PathBuf::from(value);
                saw_dataset = true;
            }
            "out_dir" => {
                cfg.out_dir = PathBuf::from(value);
                saw_out = true;
            }
            "checkpoint_interval" => {
                cfg.checkpoint_interval = value.parse().map_err(|_| bad(key))?
            }
            "log_interval" => cfg.log_interval = value.parse().map_err(|_| bad(key))?,
            "g_temp_weight" => cfg.g_temp_weight = value.parse().map_err(|_| bad(key))?,
            "g_image_weight" => cfg.g_image_weight = value.parse().map_err(|_| bad(key))?,
            "test_fraction" => cfg.test_fraction = value.parse().map_err(|_| bad(key))?,
            "split_seed" => cfg.split_seed = value.parse().map_err(|_| bad(key))?,
            other => {
                return Err(TrainError::Config(format!(
                    "line {line_num}: unknown key {other:?}"
                )))
            }
        }
    }
    if !saw_dataset {
        return Err(TrainError::Config("missing required key `dataset`".into()));
    }
    if !saw_out {
        return Err(TrainError::Config("missing required key `out_dir`".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset = data/shift\nout_dir = runs/a\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.iterations, 5000);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.lr_generator, 1e-4);
        assert_eq!(cfg.lr_discriminators, 4e-4);
        assert_eq!(cfg.beta1, 0.0);
        assert_eq!(cfg.beta2, 0.9);
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let text = format!("{MINIMAL}iterationz = 10\n");
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("iterationz"), "{err}");
    }

    #[test]
    fn comments_and_overrides() {
        let text = format!("# comment\n{MINIMAL}iterations = 42\nattention_level = 1\n");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.iterations, 42);
        assert_eq!(cfg.attention_level, Some(1));
    }

    #[test]
    fn missing_dataset_is_rejected() {
        assert!(parse_config("out_dir = x\n").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = parse_config(MINIMAL).unwrap();
        let b = parse_config(MINIMAL).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = parse_config(&format!("{MINIMAL}seed = 5\n")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn canonical_round_trip_parses() {
        let cfg = parse_config(MINIMAL).unwrap();
        let again = parse_config(&cfg.canonical_string()).unwrap();
        assert_eq!(cfg, again);
    }
}
