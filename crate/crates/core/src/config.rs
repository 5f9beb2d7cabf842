//! Experiment configuration.
//!
//! Configs are TOML documents. Every key has a default, so an empty file is
//! a valid config; unknown keys are rejected with their full dotted path.
//!
//! ```toml
//! mode = "da"                 # "dg" | "da" | "pretrain"
//!
//! [backbone]
//! image_size = 32
//! patch = 4
//! depth = 8
//! dim = 64
//! heads = 4
//! mlp_ratio = 2
//! num_classes = 4
//! decoder_dim = 64
//!
//! [adapter]
//! dim = 16
//! cutoff = 0.3
//! freq_layers = [5, 6, 7]
//! alpha_init = 0.01
//! experts = { spatial = true, low = true, high = true }
//!
//! [train]
//! steps = 2000
//! batch = 2
//! lr_decoder = 1e-4
//! lr_peft = 1e-4
//! lr_pretrain = 1e-3
//! weight_decay = 0.01
//! lambda_uda = 0.5
//! ema_alpha = 0.99
//! seed = 0
//! eval_interval = 100
//!
//! [data]
//! benchmark = "data/da-analog"      # directory holding manifest.csv
//! pretrained = "runs/pretrain/final.eadk"
//!
//! [out]
//! dir = "runs/default"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dg,
    Da,
    Pretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub decoder_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch: 4,
            depth: 8,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 4,
            decoder_dim: 64,
        }
    }
}

impl BackboneConfig {
    /// Side length of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertToggles {
    pub spatial: bool,
    pub low: bool,
    pub high: bool,
}

impl Default for ExpertToggles {
    fn default() -> Self {
        ExpertToggles {
            spatial: true,
            low: true,
            high: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub dim: usize,
    pub cutoff: f64,
    pub freq_layers: Vec<usize>,
    pub alpha_init: f64,
    pub experts: ExpertToggles,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            dim: 16,
            cutoff: 0.3,
            freq_layers: vec![5, 6, 7],
            alpha_init: 0.01,
            experts: ExpertToggles::default(),
        }
    }
}

impl AdapterConfig {
    /// Pure spatial-adapter arm: no frequency experts anywhere.
    pub fn spatial_only(&self) -> AdapterConfig {
        AdapterConfig {
            freq_layers: Vec::new(),
            experts: ExpertToggles {
                spatial: true,
                low: false,
                high: false,
            },
            ..self.clone()
        }
    }

    /// No adapters at all; only the decoder trains.
    pub fn disabled(&self) -> AdapterConfig {
        AdapterConfig {
            freq_layers: Vec::new(),
            experts: ExpertToggles {
                spatial: false,
                low: false,
                high: false,
            },
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub steps: usize,
    pub batch: usize,
    pub lr_decoder: f64,
    pub lr_peft: f64,
    pub lr_pretrain: f64,
    pub weight_decay: f64,
    pub lambda_uda: f64,
    pub ema_alpha: f64,
    pub seed: u64,
    pub eval_interval: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            steps: 2000,
            batch: 2,
            lr_decoder: 1e-4,
            lr_peft: 1e-4,
            lr_pretrain: 1e-3,
            weight_decay: 0.01,
            lambda_uda: 0.5,
            ema_alpha: 0.99,
            seed: 0,
            eval_interval: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub benchmark: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutConfig {
    pub dir: PathBuf,
}

impl Default for OutConfig {
    fn default() -> Self {
        OutConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub train: TrainParams,
    pub data: DataConfig,
    pub out: OutConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Da,
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            train: TrainParams::default(),
            data: DataConfig::default(),
            out: OutConfig::default(),
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| bad("<document>", e.message().to_string()))?;
        let config: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            bad(&path, e.into_inner().message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The default-filled config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        for (key, v) in [
            ("backbone.image_size", b.image_size),
            ("backbone.patch", b.patch),
            ("backbone.depth", b.depth),
            ("backbone.dim", b.dim),
            ("backbone.heads", b.heads),
            ("backbone.mlp_ratio", b.mlp_ratio),
            ("backbone.decoder_dim", b.decoder_dim),
            ("adapter.dim", self.adapter.dim),
            ("train.batch", self.train.batch),
            ("train.eval_interval", self.train.eval_interval),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        if b.image_size % b.patch != 0 {
            return Err(bad("backbone.patch", format!("{} does not divide image_size {}", b.patch, b.image_size)));
        }
        if b.dim % b.heads != 0 {
            return Err(bad("backbone.heads", format!("{} does not divide dim {}", b.heads, b.dim)));
        }
        if b.num_classes < 2 {
            return Err(bad("backbone.num_classes", "need at least 2 classes"));
        }
        let a = &self.adapter;
        if !(0.0..=1.0).contains(&a.cutoff) {
            return Err(bad("adapter.cutoff", format!("{} is outside [0, 1]", a.cutoff)));
        }
        if let Some(l) = a.freq_layers.iter().find(|&&l| l >= b.depth) {
            return Err(bad("adapter.freq_layers", format!("layer {l} is out of range for depth {}", b.depth)));
        }
        if !a.alpha_init.is_finite() {
            return Err(bad("adapter.alpha_init", "must be finite"));
        }
        let t = &self.train;
        for (key, v) in [
            ("train.lr_decoder", t.lr_decoder),
            ("train.lr_peft", t.lr_peft),
            ("train.lr_pretrain", t.lr_pretrain),
            ("train.weight_decay", t.weight_decay),
            ("train.lambda_uda", t.lambda_uda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(key, format!("{v} must be a finite non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&t.ema_alpha) {
            return Err(bad("train.ema_alpha", format!("{} is outside [0, 1)", t.ema_alpha)));
        }
        Ok(())
    }
}
