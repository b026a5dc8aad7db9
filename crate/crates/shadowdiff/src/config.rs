//! Run configuration: flat `key = value` text with documented defaults.
//! Unknown keys are errors; the resolved config serializes to JSON and its
//! hash is embedded in checkpoints and reports for provenance.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    /// Dataset directory (written by gen-data, read by the other stages).
    pub data_dir: String,
    /// Output directory for checkpoints, samples, and reports.
    pub out_dir: String,
    /// Image side length; must be divisible by 4.
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub data_seed: u64,
    /// Diffusion steps in the full schedule.
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Strided sampling steps at inference.
    pub sample_steps: usize,
    /// Probability of the self-enhancement branch per training step.
    pub se_prob: f64,
    /// Maximum extra diffusion depth for the self-enhancement input.
    pub u_max: usize,
    /// Per-update weight of the online weights in the EMA blend.
    pub ema_mix: f64,
    /// Alternative blend convention: weight the online weights by 0.999
    /// instead, making the "average" track them almost immediately.
    pub ema_heavy_mix: bool,
    /// Diffuse in autoencoder latent space (true) or directly on pixels.
    pub latent_mode: bool,
    /// Feed the soft shadow mask as an extra conditioning channel.
    pub mask_cond: bool,
    /// Base/control network width.
    pub ch: usize,
    pub emb_dim: usize,
    /// Autoencoder widths and latent channels.
    pub ae_c1: usize,
    pub ae_c2: usize,
    pub latent_ch: usize,
    pub batch: usize,
    pub ae_steps: usize,
    pub ae_lr: f64,
    pub base_steps: usize,
    pub base_lr: f64,
    pub ctrl_steps: usize,
    pub ctrl_lr: f64,
    pub detail_steps: usize,
    pub detail_lr: f64,
    /// Std of Gaussian noise added to the shadow-free latent during
    /// detail-decoder training, in normalized latent units (0 disables).
    /// Makes the decoder robust to imperfect sampled latents.
    pub detail_noise: f64,
    /// Maximum uniform-random interpolation of the training latent back
    /// toward the shadow latent (models under-removed residual; 0 disables).
    pub detail_resid_mix: f64,
    /// Elementwise bound on the intermediate residual estimate during
    /// sampling, in normalized latent units. The clean-signal division is
    /// ill-conditioned at large timesteps, so unbounded estimates inject
    /// amplified prediction error into the re-anchored state. Use `inf` to
    /// disable.
    pub resid_clamp: f64,
    pub seed: u64,
    pub se_seed: u64,
    pub sample_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "out".into(),
            size: 64,
            n_train: 500,
            n_val: 8,
            n_test: 50,
            data_seed: 1,
            t_max: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            sample_steps: 10,
            se_prob: 0.2,
            u_max: 50,
            ema_mix: 0.02,
            ema_heavy_mix: false,
            latent_mode: true,
            mask_cond: false,
            ch: 16,
            emb_dim: 32,
            ae_c1: 16,
            ae_c2: 32,
            latent_ch: 4,
            batch: 4,
            ae_steps: 800,
            ae_lr: 2e-3,
            base_steps: 800,
            base_lr: 1e-3,
            ctrl_steps: 2000,
            ctrl_lr: 7e-4,
            detail_steps: 800,
            detail_lr: 1e-3,
            detail_noise: 0.4,
            detail_resid_mix: 0.0,
            resid_clamp: 0.55,
            seed: 42,
            se_seed: 43,
            sample_seed: 7,
        }
    }
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected bool, got {v}"))),
    }
}

macro_rules! parse_num {
    ($v:expr, $key:expr) => {
        $v.parse()
            .map_err(|_| Error::Config(format!("{}: bad value {}", $key, $v)))?
    };
}

impl RunConfig {
    /// Parse `key = value` lines ('#' comments allowed) over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let (key, v) = (key.trim(), value.trim());
            match key {
                "data_dir" => cfg.data_dir = v.to_string(),
                "out_dir" => cfg.out_dir = v.to_string(),
                "size" => cfg.size = parse_num!(v, key),
                "n_train" => cfg.n_train = parse_num!(v, key),
                "n_val" => cfg.n_val = parse_num!(v, key),
                "n_test" => cfg.n_test = parse_num!(v, key),
                "data_seed" => cfg.data_seed = parse_num!(v, key),
                "t_max" => cfg.t_max = parse_num!(v, key),
                "beta_min" => cfg.beta_min = parse_num!(v, key),
                "beta_max" => cfg.beta_max = parse_num!(v, key),
                "sample_steps" => cfg.sample_steps = parse_num!(v, key),
                "se_prob" => cfg.se_prob = parse_num!(v, key),
                "u_max" => cfg.u_max = parse_num!(v, key),
                "ema_mix" => cfg.ema_mix = parse_num!(v, key),
                "ema_heavy_mix" => cfg.ema_heavy_mix = parse_bool(v, key)?,
                "latent_mode" => cfg.latent_mode = parse_bool(v, key)?,
                "mask_cond" => cfg.mask_cond = parse_bool(v, key)?,
                "ch" => cfg.ch = parse_num!(v, key),
                "emb_dim" => cfg.emb_dim = parse_num!(v, key),
                "ae_c1" => cfg.ae_c1 = parse_num!(v, key),
                "ae_c2" => cfg.ae_c2 = parse_num!(v, key),
                "latent_ch" => cfg.latent_ch = parse_num!(v, key),
                "batch" => cfg.batch = parse_num!(v, key),
                "ae_steps" => cfg.ae_steps = parse_num!(v, key),
                "ae_lr" => cfg.ae_lr = parse_num!(v, key),
                "base_steps" => cfg.base_steps = parse_num!(v, key),
                "base_lr" => cfg.base_lr = parse_num!(v, key),
                "ctrl_steps" => cfg.ctrl_steps = parse_num!(v, key),
                "ctrl_lr" => cfg.ctrl_lr = parse_num!(v, key),
                "detail_steps" => cfg.detail_steps = parse_num!(v, key),
                "detail_lr" => cfg.detail_lr = parse_num!(v, key),
                "detail_noise" => cfg.detail_noise = parse_num!(v, key),
                "detail_resid_mix" => cfg.detail_resid_mix = parse_num!(v, key),
                "resid_clamp" => cfg.resid_clamp = parse_num!(v, key),
                "seed" => cfg.seed = parse_num!(v, key),
                "se_seed" => cfg.se_seed = parse_num!(v, key),
                "sample_seed" => cfg.sample_seed = parse_num!(v, key),
                other => {
                    return Err(Error::Config(format!("unknown key {other:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size % 4 != 0 || self.size == 0 {
            return Err(Error::Config(format!(
                "size {} must be a positive multiple of 4",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.se_prob) {
            return Err(Error::Config(format!("se_prob {} not in [0,1]", self.se_prob)));
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_max {
            return Err(Error::Config(format!(
                "sample_steps {} must be in 1..=t_max ({})",
                self.sample_steps, self.t_max
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_mix) {
            return Err(Error::Config(format!("ema_mix {} not in [0,1]", self.ema_mix)));
        }
        if !(self.resid_clamp > 0.0) {
            return Err(Error::Config(format!(
                "resid_clamp {} must be positive (use inf to disable)",
                self.resid_clamp
            )));
        }
        Ok(())
    }

    /// Effective EMA blend weight after the convention flag.
    pub fn effective_ema_mix(&self) -> f64 {
        if self.ema_heavy_mix {
            crate::training::EMA_MIX_HEAVY
        } else {
            self.ema_mix
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
