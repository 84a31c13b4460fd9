//! Flat `key = value` configuration with defaults for every hyperparameter.

use crate::error::{Error, Result};
use crate::tensor::ElemTag;
use crate::triplet::MiningMode;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub height: usize,
    pub width: usize,
    /// Patches selected per image.
    pub k: usize,
    pub patch_size: usize,
    /// Triplet margin.
    pub margin: f64,
    pub lr: f64,
    pub lr_decay: f64,
    /// Identities per triplet batch.
    pub p: usize,
    /// Images per identity per triplet batch.
    pub k_images: usize,
    pub epochs: usize,
    pub mining: MiningMode,
    pub dtype: ElemTag,
    /// Local-net block output channels.
    pub local_filters: Vec<usize>,
    seed: Option<u64>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            height: 112,
            width: 56,
            k: 8,
            patch_size: 14,
            margin: 0.02,
            lr: 0.01,
            lr_decay: 0.998,
            p: 8,
            k_images: 4,
            epochs: 40,
            mining: MiningMode::SemiHard,
            dtype: ElemTag::F32,
            local_filters: crate::local::DEFAULT_BLOCK_FILTERS.to_vec(),
            seed: None,
        }
    }
}

impl Config {
    /// Effective seed: explicit value, else the GATN_SEED environment
    /// variable, else 42.
    pub fn seed(&self) -> u64 {
        self.seed
            .or_else(|| std::env::var("GATN_SEED").ok().and_then(|s| s.parse().ok()))
            .unwrap_or(42)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// Apply one `key = value` assignment; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid {what} value {value:?}"));
        match key {
            "height" => self.height = value.parse().map_err(|_| bad("height"))?,
            "width" => self.width = value.parse().map_err(|_| bad("width"))?,
            "k" => self.k = value.parse().map_err(|_| bad("k"))?,
            "patch_size" => self.patch_size = value.parse().map_err(|_| bad("patch_size"))?,
            "margin" => self.margin = value.parse().map_err(|_| bad("margin"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "lr_decay" => self.lr_decay = value.parse().map_err(|_| bad("lr_decay"))?,
            "p" => self.p = value.parse().map_err(|_| bad("p"))?,
            "k_images" => self.k_images = value.parse().map_err(|_| bad("k_images"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "mining" => self.mining = value.parse()?,
            "dtype" => {
                self.dtype = match value {
                    "f32" => ElemTag::F32,
                    "f64" => ElemTag::F64,
                    _ => return Err(bad("dtype")),
                }
            }
            "local_filters" => {
                self.local_filters = value
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| bad("local_filters")))
                    .collect::<Result<_>>()?;
            }
            "seed" => self.seed = Some(value.parse().map_err(|_| bad("seed"))?),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.height == 0 || self.height % 14 != 0 || self.width == 0 || self.width % 14 != 0 {
            return fail("image dims must be positive multiples of 14");
        }
        let cells = (self.height / 14) * (self.width / 14);
        if self.k < 1 || self.k > cells {
            return fail("k must lie in 1..=candidate cells");
        }
        if self.patch_size != 14 {
            return fail("patch_size must be 14 (fixed by the feature-grid stride)");
        }
        if self.margin <= 0.0 {
            return fail("margin must be positive");
        }
        if self.lr <= 0.0 || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return fail("lr must be positive and lr_decay in (0, 1]");
        }
        if self.p < 2 || self.k_images < 2 {
            return fail("triplet batches need p >= 2 and k_images >= 2");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.local_filters.is_empty() || self.local_filters.iter().any(|&f| f == 0) {
            return fail("local_filters must be a non-empty list of positive counts");
        }
        Ok(())
    }

    /// Round-trippable `key = value` text, one assignment per line.
    pub fn to_text(&self) -> String {
        let mining = match self.mining {
            MiningMode::Hard => "hard",
            MiningMode::SemiHard => "semi-hard",
            MiningMode::All => "all",
        };
        let dtype = match self.dtype {
            ElemTag::F32 => "f32",
            ElemTag::F64 => "f64",
        };
        let filters: Vec<String> = self.local_filters.iter().map(|f| f.to_string()).collect();
        let mut out = format!(
            "height = {}\nwidth = {}\nk = {}\npatch_size = {}\nmargin = {}\nlr = {}\n\
             lr_decay = {}\np = {}\nk_images = {}\nepochs = {}\nmining = {}\ndtype = {}\n\
             local_filters = {}\n",
            self.height,
            self.width,
            self.k,
            self.patch_size,
            self.margin,
            self.lr,
            self.lr_decay,
            self.p,
            self.k_images,
            self.epochs,
            mining,
            dtype,
            filters.join(","),
        );
        if let Some(seed) = self.seed {
            out.push_str(&format!("seed = {seed}\n"));
        }
        out
    }
}

/// Parse config text; later assignments win, `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut config = Config::default();
    apply_config(&mut config, text)?;
    config.validate()?;
    Ok(config)
}

pub fn apply_config(config: &mut Config, text: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
        })?;
        config.apply(key.trim(), value.trim())?;
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
