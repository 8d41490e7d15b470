//! `key=value` run configuration: one flat text file covering the
//! controller, both optimizers, the scene model and the training schedule.
//! Command-line flags override file values; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::numeric::OptimizerConfig;
use crate::search::{GsnnConfig, ModelError, Result, TrainSettings};
use crate::synthdata::SceneModel;

/// Everything a run can be configured with, at defaults unless overridden.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gsnn: GsnnConfig,
    pub scene: SceneModel,
    pub train: TrainSettings,
    pub seed: Option<u64>,
    /// Minimum co-occurrence count when building graphs.
    pub prune_threshold: u64,
    pub bench_sizes: Vec<usize>,
    pub bench_trials: usize,
    pub lowdata_sizes: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gsnn: GsnnConfig::default(),
            scene: SceneModel::default(),
            train: TrainSettings::default(),
            seed: None,
            prune_threshold: 200,
            bench_sizes: vec![100, 250, 500, 1000, 2000, 5000],
            bench_trials: 20,
            lowdata_sizes: None,
        }
    }
}

fn parse_size_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|tok| parse_as(key, tok.trim()))
        .collect()
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ModelError::Data(format!("config line {}: expected key=value", i + 1))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(ModelError::Data(format!("config line {}: empty key", i + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(ModelError::Data(format!(
                "config line {}: duplicate key {key}",
                i + 1
            )));
        }
    }
    Ok(map)
}

pub fn load_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    parse_key_values(&text)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ModelError::Data(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(ModelError::Data(format!(
            "config key {key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn apply_optimizer(opt: &mut OptimizerConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "learning_rate" => opt.learning_rate = parse_as(key, value)?,
        "momentum" => opt.momentum = parse_as(key, value)?,
        "l2_penalty" => opt.l2_penalty = parse_as(key, value)?,
        "lr_decay_factor" => opt.lr_decay_factor = parse_as(key, value)?,
        "lr_decay_every" => opt.lr_decay_every = parse_as(key, value)?,
        "beta1" => opt.beta1 = parse_as(key, value)?,
        "beta2" => opt.beta2 = parse_as(key, value)?,
        "epsilon" => opt.epsilon = parse_as(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Defaults overridden by a parsed key=value map. Every key must be
    /// recognized.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut rc = RunConfig::default();
        for (key, value) in map {
            let known = match key.split_once('.') {
                Some(("gsnn", field)) => match field {
                    "detection_threshold" => {
                        rc.gsnn.detection_threshold = parse_as(key, value)?;
                        true
                    }
                    "expand_per_step" => {
                        rc.gsnn.expand_per_step = parse_as(key, value)?;
                        true
                    }
                    "steps" => {
                        rc.gsnn.steps = parse_as(key, value)?;
                        true
                    }
                    "hidden_dim" => {
                        rc.gsnn.hidden_dim = parse_as(key, value)?;
                        true
                    }
                    "annot_dim" => {
                        rc.gsnn.annot_dim = parse_as(key, value)?;
                        true
                    }
                    "out_dim" => {
                        rc.gsnn.out_dim = parse_as(key, value)?;
                        true
                    }
                    "importance_discount" => {
                        rc.gsnn.importance_discount = parse_as(key, value)?;
                        true
                    }
                    "importance_weight" => {
                        rc.gsnn.importance_weight = parse_as(key, value)?;
                        true
                    }
                    "importance_max_hops" => {
                        rc.gsnn.importance_max_hops = parse_as(key, value)?;
                        true
                    }
                    "dropout_rate" => {
                        rc.gsnn.dropout_rate = parse_as(key, value)?;
                        true
                    }
                    "binarize_annotations" => {
                        rc.gsnn.binarize_annotations = parse_bool(key, value)?;
                        true
                    }
                    "expansion_rounds" => {
                        rc.gsnn.expansion_rounds = Some(parse_as(key, value)?);
                        true
                    }
                    _ => false,
                },
                Some(("adam", field)) => apply_optimizer(&mut rc.train.adam, field, key, value)?,
                Some(("sgd", field)) => apply_optimizer(&mut rc.train.sgd, field, key, value)?,
                Some(("train", field)) => match field {
                    "epochs" => {
                        rc.train.epochs = parse_as(key, value)?;
                        true
                    }
                    "batch_size" => {
                        rc.train.batch_size = parse_as(key, value)?;
                        true
                    }
                    _ => false,
                },
                Some(("build", "prune_threshold")) => {
                    rc.prune_threshold = parse_as(key, value)?;
                    true
                }
                Some(("bench", "sizes")) => {
                    rc.bench_sizes = parse_size_list(key, value)?;
                    true
                }
                Some(("bench", "trials")) => {
                    rc.bench_trials = parse_as(key, value)?;
                    true
                }
                Some(("lowdata", "sizes")) => {
                    rc.lowdata_sizes = Some(parse_size_list(key, value)?);
                    true
                }
                Some(("scene", field)) => match field {
                    "seed_concept_prob" => {
                        rc.scene.seed_concept_prob = parse_as(key, value)?;
                        true
                    }
                    "neighbor_inclusion_prob" => {
                        rc.scene.neighbor_inclusion_prob = parse_as(key, value)?;
                        true
                    }
                    "detection_noise" => {
                        rc.scene.detection_noise = parse_as(key, value)?;
                        true
                    }
                    "detector_miss_rate" => {
                        rc.scene.detector_miss_rate = parse_as(key, value)?;
                        true
                    }
                    "feature_dim" => {
                        rc.scene.feature_dim = parse_as(key, value)?;
                        true
                    }
                    "feature_noise" => {
                        rc.scene.feature_noise = parse_as(key, value)?;
                        true
                    }
                    _ => false,
                },
                None if key == "seed" => {
                    rc.seed = Some(parse_as(key, value)?);
                    true
                }
                _ => false,
            };
            if !known {
                return Err(ModelError::Data(format!("unknown config key {key:?}")));
            }
        }
        Ok(rc)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_map(&load_key_values(path)?)
    }
}
