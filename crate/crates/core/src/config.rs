//! Experiment configuration: an INI file with `[data]`, `[model]`,
//! `[train]`, `[ablate]`, `[attack]` and `[run]` sections. Every key is
//! optional; unknown sections or keys are rejected.
//!
//! ```ini
//! [data]
//! kind = lung          ; lung | lesion, or `path = <dataset dir>`
//! count = 250
//! side = 64
//! noise = 0.1
//! test_fraction = 0.2
//!
//! [model]
//! variant = full       ; full | no-nlce | no-nl | no-ce
//! stage_channels = 8,16,32,64
//! blocks_per_stage = 1
//! pyramid_width = 32
//! codewords = 32
//!
//! [train]
//! epochs = 30
//! batch_size = 8
//! lr = 0.001
//! lr_decay = 0.9
//! lr_floor = 0.0001
//! patience = 3
//! weight_decay = 0.0001
//! beta1 = 0.9
//! beta2 = 0.999
//! augment = auto       ; auto augments lesion data only
//!
//! [ablate]
//! finetune_epochs = 10
//!
//! [attack]
//! intensities = paper  ; or a comma list such as 0.5,16,32
//! alpha = 1
//!
//! [run]
//! seed = 0
//! out = runs/default
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::attack::PAPER_INTENSITIES;
use crate::data::{SyntheticConfig, SyntheticKind};
use crate::error::{Error, Result};
use crate::segnet::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// `in_channels` and `input_hw` are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `None` means "augment lesion-like data only".
    pub augment: Option<bool>,
    pub finetune_epochs: usize,
    pub intensities: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticConfig::default()),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: None,
            finetune_epochs: 10,
            intensities: PAPER_INTENSITIES.to_vec(),
            alpha: 1.0,
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    ("data", &["kind", "count", "side", "noise", "test_fraction", "seed", "path"]),
    ("model", &["variant", "stage_channels", "blocks_per_stage", "pyramid_width", "codewords"]),
    (
        "train",
        &[
            "epochs", "batch_size", "lr", "lr_decay", "lr_floor", "patience", "weight_decay", "beta1", "beta2", "augment",
        ],
    ),
    ("ablate", &["finetune_epochs"]),
    ("attack", &["intensities", "alpha"]),
    ("run", &["seed", "out"]),
];

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key} = `{value}` is not valid")))
}

/// Parses a comma-separated intensity list; `paper` expands to the
/// 18 default intensities and an empty string to no intensities.
pub fn parse_intensities(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    if s == "paper" {
        return Ok(PAPER_INTENSITIES.to_vec());
    }
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| {
            let e: f64 = parse("attack", "intensities", v)?;
            if e > 0.0 && e.is_finite() {
                Ok(e)
            } else {
                Err(Error::Config(format!("intensity `{}` must be positive", v.trim())))
            }
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_ini_str(&text)
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key `{k}` outside of a section")));
                }
                continue;
            };
            let Some((_, keys)) = KEYS.iter().find(|(s, _)| *s == section) else {
                return Err(Error::Config(format!("unknown section [{section}]")));
            };
            for (k, _) in props.iter() {
                if !keys.contains(&k) {
                    return Err(Error::Config(format!("unknown key `{k}` in [{section}]")));
                }
            }
        }
        let get = |s: &str, k: &str| ini.section(Some(s)).and_then(|p| p.get(k));

        let mut cfg = ExperimentConfig::default();
        if let Some(v) = get("run", "seed") {
            cfg.seed = parse("run", "seed", v)?;
        }
        if let Some(v) = get("run", "out") {
            cfg.out = PathBuf::from(v);
        }

        let mut synth = SyntheticConfig {
            seed: cfg.seed,
            ..SyntheticConfig::default()
        };
        if let Some(v) = get("data", "kind") {
            synth.kind = v.parse()?;
        }
        if let Some(v) = get("data", "count") {
            synth.count = parse("data", "count", v)?;
        }
        if let Some(v) = get("data", "side") {
            synth.side = parse("data", "side", v)?;
        }
        if let Some(v) = get("data", "noise") {
            synth.noise = parse("data", "noise", v)?;
        }
        if let Some(v) = get("data", "test_fraction") {
            synth.test_fraction = parse("data", "test_fraction", v)?;
        }
        if let Some(v) = get("data", "seed") {
            synth.seed = parse("data", "seed", v)?;
        }
        cfg.data = match get("data", "path") {
            Some(p) => DataSource::Directory(PathBuf::from(p)),
            None => DataSource::Synthetic(synth),
        };

        let m = &mut cfg.model;
        if let Some(v) = get("model", "variant") {
            m.variant = v.parse().map_err(|e: Error| Error::Config(format!("[model] {e}")))?;
        }
        if let Some(v) = get("model", "stage_channels") {
            let ch = v
                .split(',')
                .map(|c| parse("model", "stage_channels", c))
                .collect::<Result<Vec<usize>>>()?;
            m.stage_channels = ch
                .try_into()
                .map_err(|_| Error::Config("[model] stage_channels needs exactly 4 values".into()))?;
        }
        if let Some(v) = get("model", "blocks_per_stage") {
            m.blocks_per_stage = parse("model", "blocks_per_stage", v)?;
        }
        if let Some(v) = get("model", "pyramid_width") {
            m.pyramid_width = parse("model", "pyramid_width", v)?;
        }
        if let Some(v) = get("model", "codewords") {
            m.codewords = parse("model", "codewords", v)?;
        }

        let t = &mut cfg.train;
        macro_rules! train_key {
            ($($field:ident),*) => {$(
                if let Some(v) = get("train", stringify!($field)) {
                    t.$field = parse("train", stringify!($field), v)?;
                }
            )*};
        }
        train_key!(epochs, batch_size, lr, lr_decay, lr_floor, patience, weight_decay, beta1, beta2);
        cfg.augment = match get("train", "augment").map(str::trim) {
            None | Some("auto") => None,
            Some(v) => Some(parse("train", "augment", v)?),
        };

        if let Some(v) = get("ablate", "finetune_epochs") {
            cfg.finetune_epochs = parse("ablate", "finetune_epochs", v)?;
        }
        if let Some(v) = get("attack", "intensities") {
            cfg.intensities = parse_intensities(v)?;
        }
        if let Some(v) = get("attack", "alpha") {
            cfg.alpha = parse("attack", "alpha", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the run seed, and the synthetic-data seed with it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| Error::Config(format!("[data] {e}")))?;
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("[attack] alpha must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("[train] batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Training settings with the run seed and the augmentation decision
    /// for data of the given kind applied.
    pub fn train_config(&self, kind: Option<SyntheticKind>) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            augment: self.augment.unwrap_or(kind == Some(SyntheticKind::Lesion)),
            ..self.train.clone()
        }
    }
}
