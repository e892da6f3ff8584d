//! Run configuration: flat `key = value` text, presets, and conversion to the
//! model and training configs.

use std::fmt::Write as _;
use std::path::Path;

use crate::decoder::ScalingConfig;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_K;
use crate::model::DjeConfig;
use crate::params::{AdamConfig, Checkpoint};
use crate::tensor::Tensor;
use crate::trainer::{Combine, LabeledLoss, RankingConfig, TrainConfig};

const META_CONFIG: &str = "meta.config";
const META_EDGE_TYPES: &str = "meta.edge_type_count";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub n_dist: usize,
    pub heads: usize,
    pub passes: usize,
    pub layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub lambda: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub delta: f64,
    pub epochs: usize,
    pub seed: u64,
    pub k: usize,
    /// 0 disables early stopping.
    pub patience: usize,
    pub scaling_enabled: bool,
    pub log1p_labels: bool,
    pub ranking_enabled: bool,
    pub ranking_n: usize,
    pub ranking_weight: f64,
    pub labeled_loss: LabeledLoss,
    pub dsa_per_stream: bool,
    pub combine: Combine,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 256,
            n_dist: 10,
            heads: 4,
            passes: 5,
            layers: 2,
            dropout: 0.3,
            lr: 0.005,
            lambda: 1.0,
            mu1: 0.9,
            mu2: 0.1,
            delta: 1e-4,
            epochs: 200,
            seed: 0,
            k: DEFAULT_K,
            patience: 20,
            scaling_enabled: true,
            log1p_labels: false,
            ranking_enabled: false,
            ranking_n: 10,
            ranking_weight: 1.0,
            labeled_loss: LabeledLoss::Heteroscedastic,
            dsa_per_stream: false,
            combine: Combine::Average,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    /// Small shapes for quick runs: `d = 32, N = 5, H = 2, L = 1`.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.apply_preset("desk").expect("known preset");
        c
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "desk" => {
                self.d = 32;
                self.n_dist = 5;
                self.heads = 2;
                self.layers = 1;
                Ok(())
            }
            "full" => {
                let seed = self.seed;
                *self = RunConfig {
                    seed,
                    ..RunConfig::default()
                };
                Ok(())
            }
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected desk or full)"))),
        }
    }

    /// Sets one key; accepts the single-letter aliases `N`, `H`, `T`, `L`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        let flag = |v: &str| {
            parse_bool(v).ok_or_else(|| Error::Config(format!("invalid boolean `{v}` for `{key}`")))
        };
        match key {
            "preset" => self.apply_preset(value)?,
            "d" => self.d = num(key, value)?,
            "n_dist" | "N" => self.n_dist = num(key, value)?,
            "heads" | "H" => self.heads = num(key, value)?,
            "passes" | "T" => self.passes = num(key, value)?,
            "layers" | "L" => self.layers = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "mu1" => self.mu1 = num(key, value)?,
            "mu2" => self.mu2 = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "scaling" | "scaling_enabled" => self.scaling_enabled = flag(value)?,
            "log1p_labels" => self.log1p_labels = flag(value)?,
            "ranking" | "ranking_enabled" => self.ranking_enabled = flag(value)?,
            "ranking_n" => self.ranking_n = num(key, value)?,
            "ranking_weight" => self.ranking_weight = num(key, value)?,
            "dsa_per_stream" => self.dsa_per_stream = flag(value)?,
            "labeled_loss" => {
                self.labeled_loss = match value {
                    "heteroscedastic" => LabeledLoss::Heteroscedastic,
                    "homoscedastic" => LabeledLoss::Homoscedastic,
                    _ => return Err(Error::Config(format!("invalid labeled_loss `{value}`"))),
                }
            }
            "combine" => {
                self.combine = match value {
                    "average" => Combine::Average,
                    "model1" => Combine::Model1,
                    _ => return Err(Error::Config(format!("invalid combine `{value}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Every key, in a form [`RunConfig::apply_text`] reads back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d", self.d.to_string());
        kv("n_dist", self.n_dist.to_string());
        kv("heads", self.heads.to_string());
        kv("passes", self.passes.to_string());
        kv("layers", self.layers.to_string());
        kv("dropout", self.dropout.to_string());
        kv("lr", self.lr.to_string());
        kv("lambda", self.lambda.to_string());
        kv("mu1", self.mu1.to_string());
        kv("mu2", self.mu2.to_string());
        kv("delta", self.delta.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("k", self.k.to_string());
        kv("patience", self.patience.to_string());
        kv("scaling", self.scaling_enabled.to_string());
        kv("log1p_labels", self.log1p_labels.to_string());
        kv("ranking", self.ranking_enabled.to_string());
        kv("ranking_n", self.ranking_n.to_string());
        kv("ranking_weight", self.ranking_weight.to_string());
        let ll = match self.labeled_loss {
            LabeledLoss::Heteroscedastic => "heteroscedastic",
            LabeledLoss::Homoscedastic => "homoscedastic",
        };
        kv("labeled_loss", ll.into());
        kv("dsa_per_stream", self.dsa_per_stream.to_string());
        let cb = match self.combine {
            Combine::Average => "average",
            Combine::Model1 => "model1",
        };
        kv("combine", cb.into());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.dje_config(1).validate()?;
        self.train_config().validate()
    }

    pub fn scaling(&self) -> ScalingConfig {
        ScalingConfig {
            enabled: self.scaling_enabled,
            mu1: self.mu1,
            mu2: self.mu2,
            delta: self.delta,
        }
    }

    pub fn dje_config(&self, edge_type_count: usize) -> DjeConfig {
        DjeConfig {
            d: self.d,
            n_dist: self.n_dist,
            heads: self.heads,
            layers: self.layers,
            dropout: self.dropout,
            edge_type_count,
            dsa_per_stream: self.dsa_per_stream,
            scaling: self.scaling(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            lambda: self.lambda,
            passes: self.passes,
            patience: (self.patience > 0).then_some(self.patience),
            labeled_loss: self.labeled_loss,
            ranking: RankingConfig {
                enabled: self.ranking_enabled,
                n: self.ranking_n,
                weight: self.ranking_weight,
            },
            combine: self.combine,
            seed: self.seed,
        }
    }

    /// Stores the config text (one byte per element) and the edge-type count.
    pub fn push_to(&self, ck: &mut Checkpoint, edge_type_count: usize) {
        let bytes: Vec<f64> = self.to_text().bytes().map(f64::from).collect();
        ck.records.push((META_CONFIG.into(), Tensor::vector(bytes)));
        ck.records
            .push((META_EDGE_TYPES.into(), Tensor::scalar(edge_type_count as f64)));
    }

    /// Reads what [`RunConfig::push_to`] stored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, usize)> {
        let missing = |k: &str| Error::Checkpoint(format!("missing record {k}"));
        let text = ck.get(META_CONFIG).ok_or_else(|| missing(META_CONFIG))?;
        let bytes: Option<Vec<u8>> = text
            .data()
            .iter()
            .map(|&b| (b.fract() == 0.0 && (0.0..256.0).contains(&b)).then_some(b as u8))
            .collect();
        let text = bytes
            .and_then(|b| String::from_utf8(b).ok())
            .ok_or_else(|| Error::Checkpoint("config record is not text".into()))?;
        let mut c = RunConfig::default();
        c.apply_text(&text, Path::new(META_CONFIG))?;
        let types = ck.get(META_EDGE_TYPES).ok_or_else(|| missing(META_EDGE_TYPES))?;
        let types = types.data().first().copied().unwrap_or(0.0);
        if !(types >= 1.0 && types.fract() == 0.0) {
            return Err(Error::Checkpoint(format!("invalid edge-type count {types}")));
        }
        Ok((c, types as usize))
    }
}
