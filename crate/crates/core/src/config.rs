//! Flat `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::distill::DistillVariant;
use crate::diversify::{DiversifyStrategy, GroupMode};
use crate::error::{Error, Result};
use crate::pipeline::{LrSchedule, ModelDims, TrainConfig, WorldConfig};

/// Everything one experiment depends on besides its input files.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// Number of learned queries `M`.
    pub queries: usize,
    pub query_dim: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            seed: 0,
            queries: 20,
            query_dim: world.teacher.dim,
            world,
            train: TrainConfig::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "categories",
    "synonyms",
    "unseen",
    "dim",
    "cone_angle",
    "alignment",
    "instance_noise",
    "pixel_noise",
    "height",
    "width",
    "train_images",
    "val_images",
    "max_instances",
    "queries",
    "query_dim",
    "steps",
    "learning_rate",
    "schedule",
    "weight_mask",
    "weight_ce",
    "weight_grounding",
    "weight_kd",
    "diversify",
    "distill",
    "mode",
    "logit_scale",
    "grounding_scale",
    "temperature",
    "kd_normalize",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn named<T>(key: &str, value: &str, parse: fn(&str) -> Option<T>) -> Result<T> {
    parse(value).ok_or_else(|| Error::Config(format!("{key}: unknown value {value:?}")))
}

fn id_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

impl ExperimentConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            queries: self.queries,
            query_dim: self.query_dim,
            text_dim: self.world.teacher.dim,
            feature_dim: self.world.feature_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.queries == 0 || self.query_dim == 0 {
            return Err(Error::Config(
                "queries and query_dim must be positive".into(),
            ));
        }
        if self.queries < self.world.max_instances {
            return Err(Error::Config(format!(
                "{} queries cannot cover {} instances",
                self.queries, self.world.max_instances
            )));
        }
        if self.train.distill != DistillVariant::None && self.query_dim != self.world.teacher.dim {
            return Err(Error::Config(format!(
                "distillation needs query_dim = dim, got {} and {}",
                self.query_dim, self.world.teacher.dim
            )));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.world;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, value)?,
            "categories" => w.categories = num(key, value)?,
            "synonyms" => w.synonyms = num(key, value)?,
            "unseen" => w.unseen = id_list(key, value)?,
            "dim" => w.teacher.dim = num(key, value)?,
            "cone_angle" => w.teacher.cone_angle = num(key, value)?,
            "alignment" => w.teacher.alignment = num(key, value)?,
            "instance_noise" => w.teacher.instance_noise = num(key, value)?,
            "pixel_noise" => w.teacher.pixel_noise = num(key, value)?,
            "height" => w.height = num(key, value)?,
            "width" => w.width = num(key, value)?,
            "train_images" => w.train_images = num(key, value)?,
            "val_images" => w.val_images = num(key, value)?,
            "max_instances" => w.max_instances = num(key, value)?,
            "queries" => self.queries = num(key, value)?,
            "query_dim" => self.query_dim = num(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "schedule" => t.schedule = named(key, value, LrSchedule::parse)?,
            "weight_mask" => t.weights.mask = num(key, value)?,
            "weight_ce" => t.weights.ce = num(key, value)?,
            "weight_grounding" => t.weights.grounding = num(key, value)?,
            "weight_kd" => t.weights.kd = num(key, value)?,
            "diversify" => t.diversify = named(key, value, DiversifyStrategy::parse)?,
            "distill" => t.distill = named(key, value, DistillVariant::parse)?,
            "mode" => t.mode = named(key, value, GroupMode::parse)?,
            "logit_scale" => t.logit_scale = num(key, value)?,
            "grounding_scale" => t.grounding_scale = num(key, value)?,
            "temperature" => t.temperature = num(key, value)?,
            "kd_normalize" => t.normalize_student = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Canonical text form listing every key; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let t = &self.train;
        let unseen: Vec<String> = w.unseen.iter().map(|c| c.to_string()).collect();
        let values: Vec<String> = vec![
            self.seed.to_string(),
            w.categories.to_string(),
            w.synonyms.to_string(),
            unseen.join(","),
            w.teacher.dim.to_string(),
            w.teacher.cone_angle.to_string(),
            w.teacher.alignment.to_string(),
            w.teacher.instance_noise.to_string(),
            w.teacher.pixel_noise.to_string(),
            w.height.to_string(),
            w.width.to_string(),
            w.train_images.to_string(),
            w.val_images.to_string(),
            w.max_instances.to_string(),
            self.queries.to_string(),
            self.query_dim.to_string(),
            t.steps.to_string(),
            t.learning_rate.to_string(),
            t.schedule.name().to_string(),
            t.weights.mask.to_string(),
            t.weights.ce.to_string(),
            t.weights.grounding.to_string(),
            t.weights.kd.to_string(),
            t.diversify.name().to_string(),
            t.distill.name().to_string(),
            t.mode.name().to_string(),
            t.logit_scale.to_string(),
            t.grounding_scale.to_string(),
            t.temperature.to_string(),
            t.normalize_student.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn comments_blanks_and_overrides() {
        let cfg = ExperimentConfig::parse(
            "# header\n\nseed = 9   # trailing\nunseen = 1, 2\ndistill = vanilla\nmode = group-max\nweight_kd=0\nkd_normalize = true\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.world.unseen, vec![1, 2]);
        assert_eq!(cfg.train.distill, DistillVariant::Vanilla);
        assert_eq!(cfg.train.mode, GroupMode::GroupMax);
        assert_eq!(cfg.train.weights.kd, 0.0);
        assert!(cfg.train.normalize_student);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "seed = -1",
            "seed",
            "seed = 1\nseed = 2",
            "distill = teacher",
            "unseen = 0,0",
            "unseen = 12",
            "query_dim = 8",
            "weight_ce = -1",
            "queries = 2",
            "kd_normalize = 1",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
        assert!(ExperimentConfig::parse("query_dim = 8\ndistill = none").is_ok());
    }

    proptest::proptest! {
        #[test]
        fn float_fields_round_trip(lr in 1e-6f64..10.0, cone in 0.0f64..1.5, seed in proptest::num::u64::ANY) {
            let mut cfg = ExperimentConfig { seed, ..Default::default() };
            cfg.train.learning_rate = lr;
            cfg.world.teacher.cone_angle = cone;
            proptest::prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
