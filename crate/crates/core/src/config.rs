//! Flat key=value run configuration.
//!
//! A config file holds one `key = value` pair per line with `#` comments.
//! Unknown keys and out-of-range values are rejected with the offending
//! key named. The environment variable `NAFS_SEED` overrides the seed
//! after every other source has been applied.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attention::{NormAxis, Temperatures};
use crate::error::{Error, Result};
use crate::objective::{LossConfig, LossWeights};
use crate::retrieval::RvnMode;
use crate::synth::{BranchMask, SyntheticConfig};

pub const SEED_ENV_VAR: &str = "NAFS_SEED";

/// Which feature scales enter training and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureScales {
    #[default]
    Full,
    Global,
}

impl FeatureScales {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FeatureScales::Full),
            "global" => Ok(FeatureScales::Global),
            _ => Err(Error::Config(format!("feature_scales must be 'full' or 'global', got {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureScales::Full => "full",
            FeatureScales::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dim: usize,
    pub n1: usize,
    pub n2: usize,
    pub text_regions: usize,
    pub text_patches: usize,
    pub identity_count: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    pub noise_sigma: f64,
    pub signal_scales: BranchMask,
    pub tau_i2t: f64,
    pub tau_t2i: f64,
    pub tau_loss: f64,
    pub w_cmpm: f64,
    pub w_cmpc: f64,
    pub w_csal: f64,
    pub eps: f64,
    pub lr_heads: f64,
    pub lr_backbone: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub train_embeddings: bool,
    pub norm_axis: NormAxis,
    pub csal_raw: bool,
    pub rvn_l: usize,
    pub rerank: bool,
    pub rvn_mode: RvnMode,
    pub feature_scales: FeatureScales,
    pub dump_attn: bool,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dim: 32,
            n1: 2,
            n2: 3,
            text_regions: 2,
            text_patches: 4,
            identity_count: 32,
            images_per_identity: 4,
            captions_per_image: 2,
            noise_sigma: 0.1,
            signal_scales: BranchMask::all(),
            tau_i2t: 20.0,
            tau_t2i: 20.0,
            tau_loss: 10.0,
            w_cmpm: 1.0,
            w_cmpc: 1.0,
            w_csal: 0.1,
            eps: 1e-8,
            lr_heads: 0.0011,
            lr_backbone: 0.00011,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            batch_size: 16,
            steps: 500,
            train_embeddings: false,
            norm_axis: NormAxis::Queries,
            csal_raw: false,
            rvn_l: 8,
            rerank: false,
            rvn_mode: RvnMode::Fused,
            feature_scales: FeatureScales::Full,
            dump_attn: false,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("key {key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    /// Applies one key=value setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "n1" => self.n1 = parse_num(key, value)?,
            "n2" => self.n2 = parse_num(key, value)?,
            "text_regions" => self.text_regions = parse_num(key, value)?,
            "text_patches" => self.text_patches = parse_num(key, value)?,
            "identity_count" => self.identity_count = parse_num(key, value)?,
            "images_per_identity" => self.images_per_identity = parse_num(key, value)?,
            "captions_per_image" => self.captions_per_image = parse_num(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "signal_scales" => self.signal_scales = BranchMask::parse(value)?,
            "tau_i2t" => self.tau_i2t = parse_num(key, value)?,
            "tau_t2i" => self.tau_t2i = parse_num(key, value)?,
            "tau_loss" => self.tau_loss = parse_num(key, value)?,
            "w_cmpm" => self.w_cmpm = parse_num(key, value)?,
            "w_cmpc" => self.w_cmpc = parse_num(key, value)?,
            "w_csal" => self.w_csal = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "lr_heads" => self.lr_heads = parse_num(key, value)?,
            "lr_backbone" => self.lr_backbone = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps_opt" => self.eps_opt = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "train_embeddings" => self.train_embeddings = parse_bool(key, value)?,
            "norm_axis" => self.norm_axis = NormAxis::parse(value)?,
            "csal_raw" => self.csal_raw = parse_bool(key, value)?,
            "rvn_l" => self.rvn_l = parse_num(key, value)?,
            "rerank" => self.rerank = parse_bool(key, value)?,
            "rvn_mode" => self.rvn_mode = RvnMode::parse(value)?,
            "feature_scales" => self.feature_scales = FeatureScales::parse(value)?,
            "dump_attn" => self.dump_attn = parse_bool(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config file body.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then explicit overrides, then the
    /// `NAFS_SEED` environment variable.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            cfg.apply_text(&text)?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
            cfg.seed = parse_num(SEED_ENV_VAR, &seed)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("n1", self.n1),
            ("n2", self.n2),
            ("text_regions", self.text_regions),
            ("text_patches", self.text_patches),
            ("identity_count", self.identity_count),
            ("images_per_identity", self.images_per_identity),
            ("captions_per_image", self.captions_per_image),
            ("batch_size", self.batch_size),
            ("rvn_l", self.rvn_l),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("key {name}: must be at least 1, got {v}")));
            }
        }
        for (name, v) in [
            ("tau_i2t", self.tau_i2t),
            ("tau_t2i", self.tau_t2i),
            ("tau_loss", self.tau_loss),
            ("eps", self.eps),
            ("lr_heads", self.lr_heads),
            ("lr_backbone", self.lr_backbone),
            ("eps_opt", self.eps_opt),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("key {name}: must be positive, got {v}")));
            }
        }
        for (name, v) in [("w_cmpm", self.w_cmpm), ("w_cmpc", self.w_cmpc), ("w_csal", self.w_csal)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("key {name}: must be non-negative, got {v}")));
            }
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "key noise_sigma: must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("keys beta1/beta2: must lie in [0, 1)".into()));
        }
        self.signal_scales.validate()?;
        Ok(())
    }

    /// Checks that referenced input paths resolve. Called by subcommands
    /// that consume a dataset.
    pub fn validate_data_dir(&self) -> Result<()> {
        let manifest = crate::synth::manifest_path(&self.data_dir);
        if !manifest.is_file() {
            return Err(Error::Config(format!(
                "key data_dir: no manifest at {}",
                manifest.display()
            )));
        }
        Ok(())
    }

    pub fn temperatures(&self) -> Result<Temperatures> {
        Temperatures::new(self.tau_i2t, self.tau_t2i)
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.w_cmpm, self.w_cmpc, self.w_csal)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { tau_loss: self.tau_loss, eps: self.eps, raw_csal: self.csal_raw }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            identity_count: self.identity_count,
            images_per_identity: self.images_per_identity,
            captions_per_image: self.captions_per_image,
            dim: self.dim,
            n1: self.n1,
            n2: self.n2,
            text_regions: self.text_regions,
            text_patches: self.text_patches,
            noise_sigma: self.noise_sigma,
            signal_scales: self.signal_scales,
            seed: self.seed,
        }
    }

    /// Every key in sorted order, one per line. Paths are excluded so the
    /// digest identifies the run semantics, not the filesystem layout.
    pub fn canonical_string(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("seed", self.seed.to_string());
        map.insert("dim", self.dim.to_string());
        map.insert("n1", self.n1.to_string());
        map.insert("n2", self.n2.to_string());
        map.insert("text_regions", self.text_regions.to_string());
        map.insert("text_patches", self.text_patches.to_string());
        map.insert("identity_count", self.identity_count.to_string());
        map.insert("images_per_identity", self.images_per_identity.to_string());
        map.insert("captions_per_image", self.captions_per_image.to_string());
        map.insert("noise_sigma", format!("{:e}", self.noise_sigma));
        map.insert("signal_scales", self.signal_scales.name());
        map.insert("tau_i2t", format!("{:e}", self.tau_i2t));
        map.insert("tau_t2i", format!("{:e}", self.tau_t2i));
        map.insert("tau_loss", format!("{:e}", self.tau_loss));
        map.insert("w_cmpm", format!("{:e}", self.w_cmpm));
        map.insert("w_cmpc", format!("{:e}", self.w_cmpc));
        map.insert("w_csal", format!("{:e}", self.w_csal));
        map.insert("eps", format!("{:e}", self.eps));
        map.insert("lr_heads", format!("{:e}", self.lr_heads));
        map.insert("lr_backbone", format!("{:e}", self.lr_backbone));
        map.insert("beta1", format!("{:e}", self.beta1));
        map.insert("beta2", format!("{:e}", self.beta2));
        map.insert("eps_opt", format!("{:e}", self.eps_opt));
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("steps", self.steps.to_string());
        map.insert("train_embeddings", self.train_embeddings.to_string());
        map.insert("norm_axis", self.norm_axis.name().to_string());
        map.insert("csal_raw", self.csal_raw.to_string());
        map.insert("rvn_l", self.rvn_l.to_string());
        map.insert("rerank", self.rerank.to_string());
        map.insert("rvn_mode", self.rvn_mode.name().to_string());
        map.insert("feature_scales", self.feature_scales.name().to_string());
        map.insert("dump_attn", self.dump_attn.to_string());
        map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn digest(&self) -> Vec<u8> {
        Sha256::digest(self.canonical_string().as_bytes()).to_vec()
    }
}
