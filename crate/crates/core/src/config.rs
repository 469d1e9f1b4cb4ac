//! Hyperparameters, ablation switches and the flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AmcenError, Result};
use crate::optim::OptimizerKind;

/// Entity/relation combination used by message passing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Subtract,
    Multiply,
    CircularCorrelation,
}

impl FromStr for Composition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "subtract" | "sub" => Ok(Self::Subtract),
            "multiply" | "mult" => Ok(Self::Multiply),
            "circular_correlation" | "ccorr" => Ok(Self::CircularCorrelation),
            other => Err(format!("unknown composition {other:?}")),
        }
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Subtract => "subtract",
            Self::Multiply => "multiply",
            Self::CircularCorrelation => "circular_correlation",
        })
    }
}

/// Switches reproducing the ablation variants plus two literal-formula modes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Both attention masks become all-ones (AMCEN-w/o-AM).
    pub no_attention_mask: bool,
    /// Historical decoder branch only (AMCEN-His).
    pub his_only: bool,
    /// Non-historical decoder branch only (AMCEN-Nonhis).
    pub nonhis_only: bool,
    /// Skip the classifier's predictive mask at inference (AMCEN-w/o-PM).
    pub no_predictive_mask: bool,
    /// Use the ground-truth event type instead of the classifier (AMCEN-GT-PM).
    pub gt_predictive_mask: bool,
    /// `softmax(relu(x))` as the message-passing activation instead of ReLU.
    pub literal_eq1: bool,
    /// Multiply post-softmax scores by the mask instead of masking logits.
    pub literal_eq13: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub dim: usize,
    pub batch_size: usize,
    pub layers: usize,
    pub dropout: f64,
    pub window: usize,
    pub heads: usize,
    pub beta: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub composition: Composition,
    /// Number of shared bases for the direction matrices; 0 disables the decomposition.
    pub num_bases: usize,
    pub normalize_contrastive: bool,
    pub select_by_validation: bool,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            optimizer: OptimizerKind::AdamW,
            stage1_epochs: 30,
            stage2_epochs: 20,
            dim: 200,
            batch_size: 1024,
            layers: 2,
            dropout: 0.3,
            window: 4,
            heads: 10,
            beta: 0.2,
            lambda: 0.6,
            temperature: 0.1,
            composition: Composition::Multiply,
            num_bases: 0,
            normalize_contrastive: false,
            select_by_validation: true,
            seed: 0,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmcenError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return bad("learning rate must be positive and weight decay nonnegative".into());
        }
        for (name, v) in [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        let a = &self.ablation;
        if a.his_only && a.nonhis_only {
            return bad("his_only and nonhis_only are mutually exclusive".into());
        }
        if a.no_predictive_mask && a.gt_predictive_mask {
            return bad("no_predictive_mask and gt_predictive_mask are mutually exclusive".into());
        }
        Ok(())
    }

    /// Hash of every field that changes the parameter layout or forward semantics.
    pub fn architecture_fingerprint(
        &self,
        entity_count: usize,
        base_relation_count: usize,
        time_count: usize,
    ) -> String {
        let key = format!(
            "e={entity_count};r={base_relation_count};t={time_count};d={};l={};h={};w={};c={};b={};eq1={}",
            self.dim, self.layers, self.heads, self.window, self.composition, self.num_bases, self.ablation.literal_eq1
        );
        let digest = Sha256::digest(key.as_bytes());
        format!("{digest:x}")[..16].to_string()
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.ablation;
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("stage1_epochs", self.stage1_epochs.to_string()),
            ("stage2_epochs", self.stage2_epochs.to_string()),
            ("dim", self.dim.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("layers", self.layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("window", self.window.to_string()),
            ("heads", self.heads.to_string()),
            ("beta", self.beta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("temperature", self.temperature.to_string()),
            ("composition", self.composition.to_string()),
            ("num_bases", self.num_bases.to_string()),
            (
                "normalize_contrastive",
                self.normalize_contrastive.to_string(),
            ),
            (
                "select_by_validation",
                self.select_by_validation.to_string(),
            ),
            ("seed", self.seed.to_string()),
            ("no_attention_mask", a.no_attention_mask.to_string()),
            ("his_only", a.his_only.to_string()),
            ("nonhis_only", a.nonhis_only.to_string()),
            ("no_predictive_mask", a.no_predictive_mask.to_string()),
            ("gt_predictive_mask", a.gt_predictive_mask.to_string()),
            ("literal_eq1", a.literal_eq1.to_string()),
            ("literal_eq13", a.literal_eq13.to_string()),
        ]
    }

    /// Applies one `key = value` override. Returns `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e| AmcenError::Config(format!("{key} = {value:?}: {e}")))
        }
        let a = &mut self.ablation;
        match key {
            "learning_rate" => self.learning_rate = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "optimizer" => self.optimizer = p(key, value)?,
            "stage1_epochs" => self.stage1_epochs = p(key, value)?,
            "stage2_epochs" => self.stage2_epochs = p(key, value)?,
            "dim" | "d" => self.dim = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "layers" => self.layers = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "window" | "tau" => self.window = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "beta" => self.beta = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "temperature" | "mu" => self.temperature = p(key, value)?,
            "composition" => self.composition = p(key, value)?,
            "num_bases" => self.num_bases = p(key, value)?,
            "normalize_contrastive" => self.normalize_contrastive = p(key, value)?,
            "select_by_validation" => self.select_by_validation = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "no_attention_mask" => a.no_attention_mask = p(key, value)?,
            "his_only" => a.his_only = p(key, value)?,
            "nonhis_only" => a.nonhis_only = p(key, value)?,
            "no_predictive_mask" => a.no_predictive_mask = p(key, value)?,
            "gt_predictive_mask" => a.gt_predictive_mask = p(key, value)?,
            "literal_eq1" => a.literal_eq1 = p(key, value)?,
            "literal_eq13" => a.literal_eq13 = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Everything a CLI run needs; serialises to flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub granularity: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            granularity: 1,
            out: PathBuf::from("out"),
            workers: 0,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value.trim()),
            "out" => self.out = PathBuf::from(value.trim()),
            "granularity" => {
                self.granularity = value
                    .trim()
                    .parse()
                    .map_err(|e| AmcenError::Config(format!("granularity = {value:?}: {e}")))?
            }
            "workers" => {
                self.workers = value
                    .trim()
                    .parse()
                    .map_err(|e| AmcenError::Config(format!("workers = {value:?}: {e}")))?
            }
            _ => {
                if !self.train.set(key, value)? {
                    return Err(AmcenError::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| AmcenError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| AmcenError::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            if let Some(s) = section {
                return Err(AmcenError::Config(format!(
                    "sections are not supported ([{s}])"
                )));
            }
            for (k, v) in props.iter() {
                cfg.set(k, v)?;
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_ini_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_ini_string(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.display().to_string()),
            ("granularity", self.granularity.to_string()),
            ("out", self.out.display().to_string()),
            ("workers", self.workers.to_string()),
        ];
        pairs.extend(self.train.to_pairs());
        let mut ini = Ini::new();
        for (k, v) in pairs {
            ini.with_general_section().set(k, v);
        }
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf8")
    }

    pub fn as_map(&self) -> BTreeMap<String, String> {
        Ini::load_from_str(&self.to_ini_string())
            .expect("own output parses")
            .general_section()
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}
