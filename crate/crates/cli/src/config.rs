//! `key=value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Unknown keys, repeated keys and malformed values are rejected with the
//! offending line number.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sdaa_core::data::DataConfig;
use sdaa_core::model::ModelConfig;
use sdaa_core::train::TrainConfig;

use crate::CliError;

pub const SEED_ENV: &str = "SDAA_SEED";

const REQUIRED: &[&str] = &["out_dir", "max_iter"];

const KNOWN: &[&str] = &[
    // run
    "out_dir",
    "seed",
    "seeds",
    "folds",
    // training
    "base_lr",
    "momentum",
    "weight_decay",
    "power",
    "max_iter",
    "batch_size",
    "alpha",
    "beta",
    "k",
    "strategy",
    "test_fold",
    "eval_every",
    "eval_episodes",
    "multi_scale",
    "grad_clip",
    // model
    "widths",
    "feature_dim",
    "sse_reduction",
    "bins",
    "use_sdpm",
    "use_saam",
    // data
    "image_size",
    "min_fg",
    "distractor_prob",
    "max_attempts",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Seeds of the ablation runs; defaults to the single training seed.
    pub seeds: Vec<u64>,
    /// Test folds of the ablation table; defaults to the training fold.
    pub folds: Vec<usize>,
}

struct Entry {
    line: usize,
    value: String,
}

fn parse_value<T: FromStr>(key: &str, e: &Entry) -> Result<T, CliError> {
    e.value
        .parse()
        .map_err(|_| CliError::Config(format!("line {}: invalid value `{}` for `{key}`", e.line, e.value)))
}

fn parse_list<T: FromStr>(key: &str, e: &Entry) -> Result<Vec<T>, CliError> {
    e.value
        .split(',')
        .map(|item| {
            item.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("line {}: invalid list item `{}` for `{key}`", e.line, item.trim())))
        })
        .collect()
}

fn parse_bool(key: &str, e: &Entry) -> Result<bool, CliError> {
    match e.value.as_str() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(CliError::Config(format!("line {}: expected a boolean for `{key}`, got `{other}`", e.line))),
    }
}

impl RunConfig {
    /// Parse config text. `seed_override` replaces the `seed` key.
    pub fn parse(text: &str, seed_override: Option<&str>) -> Result<Self, CliError> {
        let mut entries: BTreeMap<&str, Entry> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or_default().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {line}: expected `key=value`, got `{content}`")))?;
            let key = key.trim();
            let Some(&known) = KNOWN.iter().find(|k| **k == key) else {
                return Err(CliError::Config(format!("line {line}: unknown key `{key}`")));
            };
            if let Some(prev) = entries.get(known) {
                return Err(CliError::Config(format!("line {line}: `{key}` already set on line {}", prev.line)));
            }
            entries.insert(
                known,
                Entry {
                    line,
                    value: value.trim().to_owned(),
                },
            );
        }
        if let Some(missing) = REQUIRED.iter().find(|k| !entries.contains_key(*k)) {
            return Err(CliError::Config(format!("missing required key `{missing}`")));
        }

        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        let mut data = DataConfig::default();
        let mut out_dir = PathBuf::new();
        let mut seeds = None;
        let mut folds = None;
        for (&key, e) in &entries {
            match key {
                "out_dir" => out_dir = PathBuf::from(&e.value),
                "seed" => train.seed = parse_value(key, e)?,
                "seeds" => seeds = Some(parse_list(key, e)?),
                "folds" => folds = Some(parse_list(key, e)?),
                "base_lr" => train.base_lr = parse_value(key, e)?,
                "momentum" => train.momentum = parse_value(key, e)?,
                "weight_decay" => train.weight_decay = parse_value(key, e)?,
                "power" => train.power = parse_value(key, e)?,
                "max_iter" => train.max_iter = parse_value(key, e)?,
                "batch_size" => train.batch_size = parse_value(key, e)?,
                "alpha" => train.alpha = parse_value(key, e)?,
                "beta" => train.beta = parse_value(key, e)?,
                "k" => train.k = parse_value(key, e)?,
                "strategy" => train.strategy = parse_value(key, e)?,
                "test_fold" => train.test_fold = parse_value(key, e)?,
                "eval_every" => train.eval_every = parse_value(key, e)?,
                "eval_episodes" => train.eval_episodes = parse_value(key, e)?,
                "multi_scale" => train.multi_scale = parse_bool(key, e)?,
                "grad_clip" => train.grad_clip = Some(parse_value(key, e)?),
                "widths" => {
                    let w: Vec<usize> = parse_list(key, e)?;
                    model.widths = w
                        .try_into()
                        .map_err(|_| CliError::Config(format!("line {}: `widths` needs exactly four values", e.line)))?;
                }
                "feature_dim" => model.feature_dim = parse_value(key, e)?,
                "sse_reduction" => model.sse_reduction = parse_value(key, e)?,
                "bins" => model.bins = parse_list(key, e)?,
                "use_sdpm" => model.use_sdpm = parse_bool(key, e)?,
                "use_saam" => model.use_saam = parse_bool(key, e)?,
                "image_size" => data.image_size = parse_value(key, e)?,
                "min_fg" => data.min_fg = parse_value(key, e)?,
                "distractor_prob" => data.distractor_prob = parse_value(key, e)?,
                "max_attempts" => data.max_attempts = parse_value(key, e)?,
                _ => unreachable!("key list and match arms diverged"),
            }
        }
        if let Some(s) = seed_override {
            train.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}: invalid seed `{s}`")))?;
        }
        if out_dir.as_os_str().is_empty() {
            return Err(CliError::Config("`out_dir` must not be empty".into()));
        }
        let cfg = Self {
            out_dir,
            seeds: seeds.unwrap_or_else(|| vec![train.seed]),
            folds: folds.unwrap_or_else(|| vec![train.test_fold]),
            model,
            train,
            data,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a config file, honouring the seed environment variable.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let env = std::env::var(SEED_ENV).ok();
        Self::parse(&text, env.as_deref())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: sdaa_core::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.data.validate().map_err(wrap)?;
        if self.seeds.is_empty() || self.folds.is_empty() {
            return Err(CliError::Config("`seeds` and `folds` must not be empty".into()));
        }
        for &f in &self.folds {
            let probe = TrainConfig {
                test_fold: f,
                ..self.train.clone()
            };
            probe.validate().map_err(wrap)?;
        }
        if self.out_dir.is_file() {
            return Err(CliError::Config(format!("out_dir {} is a file", self.out_dir.display())));
        }
        Ok(())
    }
}
