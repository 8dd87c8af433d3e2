//! Flat key-value run configuration shared by every pipeline command.
//!
//! A config file holds `key = value` lines (blank lines and `#` comments
//! allowed); command-line `--set KEY=VALUE` overrides are applied on top.
//! Unknown keys and unparsable values are rejected with the offending
//! location, and every command writes the fully resolved configuration
//! next to its outputs.

use std::path::Path;

use crate::baselines::{KnnConfig, Metric};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::node2vec::WalkConfig;
use crate::synthetic::GeneratorConfig;
use crate::trainer::{TrainConfig, Variant};
use crate::util;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub walk: WalkConfig,
    pub eval: EvalConfig,
    pub synth: GeneratorConfig,
    pub synth_seed: u64,
    pub knn: KnnConfig,
    pub split_ratio: (f64, f64, f64),
    pub split_seed: u64,
    pub ablation_seeds: Vec<u64>,
    pub ablation_parallel: bool,
    pub export_top_codes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            walk: WalkConfig::default(),
            eval: EvalConfig::default(),
            synth: GeneratorConfig::default(),
            synth_seed: 0,
            knn: KnnConfig::default(),
            split_ratio: (0.7, 0.15, 0.15),
            split_seed: 0,
            ablation_seeds: vec![0, 1, 2, 3, 4],
            ablation_parallel: false,
            export_top_codes: 5,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(|piece| parse_as(key, piece))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty list for key {key:?}")));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Set one key; unknown keys and malformed values are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train.learning_rate" => self.train.learning_rate = parse_as(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_as(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_as(key, value)?,
            "train.epochs" => self.train.epochs = parse_as(key, value)?,
            "train.k" => self.train.k = parse_as(key, value)?,
            "train.l" => self.train.l = parse_as(key, value)?,
            "train.hidden" => self.train.hidden = parse_as(key, value)?,
            "train.trunk_depth" => self.train.trunk_depth = parse_as(key, value)?,
            "train.n_layers" => self.train.n_layers = parse_as(key, value)?,
            "train.n_heads" => self.train.n_heads = parse_as(key, value)?,
            "train.shared_alpha" => self.train.shared_alpha = parse_as(key, value)?,
            "train.beta_per_epoch" => self.train.beta_per_epoch = parse_as(key, value)?,
            "train.zero_noise" => self.train.zero_noise = parse_as(key, value)?,
            "train.adam_beta1" => self.train.adam_beta1 = parse_as(key, value)?,
            "train.adam_beta2" => self.train.adam_beta2 = parse_as(key, value)?,
            "train.adam_eps" => self.train.adam_eps = parse_as(key, value)?,
            "train.seed" => self.train.seed = parse_as(key, value)?,
            "train.variant" => self.train.variant = Variant::parse(value.trim())?,
            "walk.p" => self.walk.p = parse_as(key, value)?,
            "walk.q" => self.walk.q = parse_as(key, value)?,
            "walk.walk_length" => self.walk.walk_length = parse_as(key, value)?,
            "walk.walks_per_node" => self.walk.walks_per_node = parse_as(key, value)?,
            "walk.window" => self.walk.window = parse_as(key, value)?,
            "walk.negatives" => self.walk.negatives = parse_as(key, value)?,
            "walk.dim" => self.walk.dim = parse_as(key, value)?,
            "walk.epochs" => self.walk.epochs = parse_as(key, value)?,
            "walk.learning_rate" => self.walk.learning_rate = parse_as(key, value)?,
            "walk.seed" => self.walk.seed = parse_as(key, value)?,
            "eval.s" => self.eval.s = parse_as(key, value)?,
            "eval.r" => self.eval.r = parse_as(key, value)?,
            "eval.patient_k" => self.eval.patient_k = parse_as(key, value)?,
            "eval.drug_k" => self.eval.drug_k = parse_as(key, value)?,
            "eval.top_m" => self.eval.top_m = parse_as(key, value)?,
            "eval.n_bins" => self.eval.n_bins = parse_as(key, value)?,
            "eval.profile_patients" => self.eval.profile_patients = parse_as(key, value)?,
            "eval.seed" => self.eval.seed = parse_as(key, value)?,
            "synth.n_patients" => self.synth.n_patients = parse_as(key, value)?,
            "synth.n_topics" => self.synth.n_topics = parse_as(key, value)?,
            "synth.icd_groups" => self.synth.icd_groups = parse_as(key, value)?,
            "synth.icd_categories_per_group" => {
                self.synth.icd_categories_per_group = parse_as(key, value)?
            }
            "synth.icd_leaves_per_category" => {
                self.synth.icd_leaves_per_category = parse_as(key, value)?
            }
            "synth.atc_groups" => self.synth.atc_groups = parse_as(key, value)?,
            "synth.atc_categories_per_group" => {
                self.synth.atc_categories_per_group = parse_as(key, value)?
            }
            "synth.atc_leaves_per_category" => {
                self.synth.atc_leaves_per_category = parse_as(key, value)?
            }
            "synth.icd_tokens_min" => self.synth.icd_tokens.0 = parse_as(key, value)?,
            "synth.icd_tokens_max" => self.synth.icd_tokens.1 = parse_as(key, value)?,
            "synth.atc_tokens_min" => self.synth.atc_tokens.0 = parse_as(key, value)?,
            "synth.atc_tokens_max" => self.synth.atc_tokens.1 = parse_as(key, value)?,
            "synth.concentration" => self.synth.concentration = parse_as(key, value)?,
            "synth.background" => self.synth.background = parse_as(key, value)?,
            "synth.theta_scale" => self.synth.theta_scale = parse_as(key, value)?,
            "synth.seed" => self.synth_seed = parse_as(key, value)?,
            "knn.k_grid" => self.knn.k_grid = parse_list(key, value)?,
            "knn.metrics" => {
                self.knn.metric_grid = value
                    .split(',')
                    .map(|piece| Metric::parse(piece.trim()))
                    .collect::<Result<_>>()?
            }
            "split.train" => self.split_ratio.0 = parse_as(key, value)?,
            "split.valid" => self.split_ratio.1 = parse_as(key, value)?,
            "split.test" => self.split_ratio.2 = parse_as(key, value)?,
            "split.seed" => self.split_seed = parse_as(key, value)?,
            "ablation.seeds" => self.ablation_seeds = parse_list(key, value)?,
            "ablation.parallel" => self.ablation_parallel = parse_as(key, value)?,
            "export.top_codes" => self.export_top_codes = parse_as(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply every `key = value` line of a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = util::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(origin, lineno, format!("expected key = value, got {raw:?}"))
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| Error::format(origin, lineno, e.to_string()))?;
        }
        Ok(())
    }

    /// Apply one `KEY=VALUE` command-line override.
    pub fn apply_override(&mut self, setting: &str) -> Result<()> {
        let (key, value) = setting.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {setting:?} is not KEY=VALUE"))
        })?;
        self.apply(key.trim(), value.trim()).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("override {setting:?}: {msg}")),
            other => other,
        })
    }

    /// Point every seed the pipeline consumes at one value.
    pub fn override_seeds(&mut self, seed: u64) {
        self.train.seed = seed;
        self.walk.seed = seed;
        self.eval.seed = seed;
        self.synth_seed = seed;
        self.split_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.walk.validate()?;
        self.knn.validate()?;
        if self.export_top_codes == 0 {
            return Err(Error::Config("export.top_codes must be at least 1".into()));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Every key in fixed order; parsing this back reproduces the config.
    pub fn resolved_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("train.learning_rate", util::fmt_f64(self.train.learning_rate));
        kv("train.weight_decay", util::fmt_f64(self.train.weight_decay));
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.k", self.train.k.to_string());
        kv("train.l", self.train.l.to_string());
        kv("train.hidden", self.train.hidden.to_string());
        kv("train.trunk_depth", self.train.trunk_depth.to_string());
        kv("train.n_layers", self.train.n_layers.to_string());
        kv("train.n_heads", self.train.n_heads.to_string());
        kv("train.shared_alpha", self.train.shared_alpha.to_string());
        kv("train.beta_per_epoch", self.train.beta_per_epoch.to_string());
        kv("train.zero_noise", self.train.zero_noise.to_string());
        kv("train.adam_beta1", util::fmt_f64(self.train.adam_beta1));
        kv("train.adam_beta2", util::fmt_f64(self.train.adam_beta2));
        kv("train.adam_eps", util::fmt_f64(self.train.adam_eps));
        kv("train.seed", self.train.seed.to_string());
        kv("train.variant", self.train.variant.as_str().to_string());
        kv("walk.p", util::fmt_f64(self.walk.p));
        kv("walk.q", util::fmt_f64(self.walk.q));
        kv("walk.walk_length", self.walk.walk_length.to_string());
        kv("walk.walks_per_node", self.walk.walks_per_node.to_string());
        kv("walk.window", self.walk.window.to_string());
        kv("walk.negatives", self.walk.negatives.to_string());
        kv("walk.dim", self.walk.dim.to_string());
        kv("walk.epochs", self.walk.epochs.to_string());
        kv("walk.learning_rate", util::fmt_f64(self.walk.learning_rate));
        kv("walk.seed", self.walk.seed.to_string());
        kv("eval.s", self.eval.s.to_string());
        kv("eval.r", self.eval.r.to_string());
        kv("eval.patient_k", self.eval.patient_k.to_string());
        kv("eval.drug_k", self.eval.drug_k.to_string());
        kv("eval.top_m", self.eval.top_m.to_string());
        kv("eval.n_bins", self.eval.n_bins.to_string());
        kv("eval.profile_patients", self.eval.profile_patients.to_string());
        kv("eval.seed", self.eval.seed.to_string());
        kv("synth.n_patients", self.synth.n_patients.to_string());
        kv("synth.n_topics", self.synth.n_topics.to_string());
        kv("synth.icd_groups", self.synth.icd_groups.to_string());
        kv(
            "synth.icd_categories_per_group",
            self.synth.icd_categories_per_group.to_string(),
        );
        kv(
            "synth.icd_leaves_per_category",
            self.synth.icd_leaves_per_category.to_string(),
        );
        kv("synth.atc_groups", self.synth.atc_groups.to_string());
        kv(
            "synth.atc_categories_per_group",
            self.synth.atc_categories_per_group.to_string(),
        );
        kv(
            "synth.atc_leaves_per_category",
            self.synth.atc_leaves_per_category.to_string(),
        );
        kv("synth.icd_tokens_min", self.synth.icd_tokens.0.to_string());
        kv("synth.icd_tokens_max", self.synth.icd_tokens.1.to_string());
        kv("synth.atc_tokens_min", self.synth.atc_tokens.0.to_string());
        kv("synth.atc_tokens_max", self.synth.atc_tokens.1.to_string());
        kv("synth.concentration", util::fmt_f64(self.synth.concentration));
        kv("synth.background", util::fmt_f64(self.synth.background));
        kv("synth.theta_scale", util::fmt_f64(self.synth.theta_scale));
        kv("synth.seed", self.synth_seed.to_string());
        kv("knn.k_grid", join(&self.knn.k_grid));
        kv(
            "knn.metrics",
            self.knn
                .metric_grid
                .iter()
                .map(|m| m.as_str().to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("split.train", util::fmt_f64(self.split_ratio.0));
        kv("split.valid", util::fmt_f64(self.split_ratio.1));
        kv("split.test", util::fmt_f64(self.split_ratio.2));
        kv("split.seed", self.split_seed.to_string());
        kv("ablation.seeds", join(&self.ablation_seeds));
        kv("ablation.parallel", self.ablation_parallel.to_string());
        kv("export.top_codes", self.export_top_codes.to_string());
        s
    }
}
