//! Run configuration as a flat JSON object with dotted keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use ngfkt_core::calibrate::CalibrationConfig;
use ngfkt_core::embed::GcnConfig;
use ngfkt_core::eval::{LENGTH_BUCKETS, STUDENT_FRACTIONS};
use ngfkt_core::model::ModelConfig;
use ngfkt_core::pipeline::PipelineConfig;
use ngfkt_core::relation::RelationConfig;
use ngfkt_core::train::TrainConfig;
use ngfkt_core::SyntheticConfig;

pub const SEED_ENV: &str = "NGFKT_SEED";

/// Nested seed fields filled from the top-level `seed`.
const DERIVED_KEYS: [&str; 3] = ["gcn.seed", "train.seed", "synth.seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub interactions: String,
    /// Empty: derive the Q-matrix from the skill tags of the log.
    pub qmatrix: String,
    /// Empty: no hierarchy.
    pub levels: String,
    /// `strict` or `lenient`.
    pub parse_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub threshold: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColdStartOptions {
    pub fractions: Vec<f64>,
    pub buckets: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOptions {
    pub joint_gcn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: String,
    pub data: DataConfig,
    pub calibration: CalibrationConfig,
    pub gcn: GcnConfig,
    pub relation: RelationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineOptions,
    pub eval: EvalOptions,
    pub coldstart: ColdStartOptions,
    pub synth: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let mut cfg = RunConfig {
            seed: 7,
            output: "out".into(),
            data: DataConfig {
                interactions: "interactions.csv".into(),
                qmatrix: "qmatrix.csv".into(),
                levels: "knowledge_levels.csv".into(),
                parse_mode: "strict".into(),
            },
            calibration: p.calibration,
            gcn: p.gcn,
            relation: p.relation,
            model: p.model,
            train: p.train,
            pipeline: PipelineOptions { joint_gcn: p.joint_gcn },
            eval: EvalOptions { threshold: 0.5, batch_size: ngfkt_core::eval::DEFAULT_BATCH },
            coldstart: ColdStartOptions { fractions: STUDENT_FRACTIONS.to_vec(), buckets: LENGTH_BUCKETS.to_vec() },
            synth: SyntheticConfig::default(),
        };
        cfg.apply_seed();
        cfg
    }
}

impl RunConfig {
    fn apply_seed(&mut self) {
        self.gcn.seed = self.seed.wrapping_add(1);
        self.train.seed = self.seed.wrapping_add(2);
        self.synth.seed = self.seed.wrapping_add(3);
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            calibration: self.calibration,
            gcn: self.gcn,
            relation: self.relation,
            model: self.model,
            train: self.train,
            joint_gcn: self.pipeline.joint_gcn,
            init_seed: self.init_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        self.synth.validate()?;
        if !matches!(self.data.parse_mode.as_str(), "strict" | "lenient") {
            bail!("data.parse_mode must be `strict` or `lenient`, got `{}`", self.data.parse_mode);
        }
        if self.eval.batch_size == 0 {
            bail!("eval.batch_size must be positive");
        }
        if self.output.is_empty() {
            bail!("output must name a directory");
        }
        Ok(())
    }

    /// Dotted keys and their values; derived seed fields are omitted.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        for k in DERIVED_KEYS {
            out.remove(k);
        }
        out
    }

    fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut nested = Map::new();
        for (key, value) in flat {
            insert_dotted(&mut nested, key, value.clone());
        }
        for k in DERIVED_KEYS {
            insert_dotted(&mut nested, k, Value::from(0u64));
        }
        let mut cfg: RunConfig = serde_json::from_value(Value::Object(nested)).context("invalid config value")?;
        cfg.apply_seed();
        Ok(cfg)
    }

    /// Defaults, then the config file, then `overrides`, then the seed
    /// environment variable.
    pub fn load(file: Option<&Path>, overrides: &[String], env_seed: Option<String>) -> Result<Self> {
        let mut flat = RunConfig::default().flatten();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let value: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            let Value::Object(map) = value else { bail!("config {} must be a JSON object", path.display()) };
            for (k, v) in map {
                set_key(&mut flat, &k, v)?;
            }
        }
        for item in overrides {
            let (k, raw) = item.split_once('=').with_context(|| format!("override `{item}` is not KEY=VALUE"))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            set_key(&mut flat, k.trim(), v)?;
        }
        if let Some(seed) = env_seed {
            let seed: u64 =
                seed.trim().parse().with_context(|| format!("{SEED_ENV}=`{seed}` is not an unsigned integer"))?;
            flat.insert("seed".into(), Value::from(seed));
        }
        let cfg = RunConfig::from_flat(&flat)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_flat_json(&self) -> Value {
        Value::Object(self.flatten().into_iter().collect())
    }
}

fn set_key(flat: &mut BTreeMap<String, Value>, key: &str, value: Value) -> Result<()> {
    match flat.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => bail!("unknown config key `{key}` (see --help for the list)"),
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other.clone());
        }
    }
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, value: Value) {
    match key.split_once('.') {
        None => {
            root.insert(key.to_owned(), value);
        }
        Some((head, rest)) => {
            let child = root.entry(head.to_owned()).or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(map) = child {
                insert_dotted(map, rest, value);
            }
        }
    }
}

/// Every key with its default, one per line.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (JSON file via --config, or --set KEY=VALUE):\n");
    for (k, v) in RunConfig::default().flatten() {
        let _ = writeln!(s, "  {k:<32} {v}");
    }
    let _ = writeln!(s, "\nThe {SEED_ENV} environment variable overrides `seed`.");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_keys() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_flat(&d.flatten()).unwrap(), d);
        let keys = d.flatten();
        assert!(keys.contains_key("model.d_model"));
        assert_eq!(keys["relation.theta"], Value::from(0.65));
        assert!(!keys.contains_key("train.seed"));
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::load(
            None,
            &["model.d_model=16".into(), "model.ffn_dim=16".into(), "relation.kind=phi".into()],
            None,
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.relation.kind, ngfkt_core::CoefficientKind::Phi);
        assert!(RunConfig::load(None, &["model.width=3".into()], None).is_err());
        assert!(RunConfig::load(None, &["model.d_model=abc".into()], None).is_err());
        let seeded = RunConfig::load(None, &[], Some("99".into())).unwrap();
        assert_eq!(seeded.seed, 99);
        assert_eq!(seeded.train.seed, 101);
    }

    proptest::proptest! {
        #[test]
        fn set_values_survive_the_flat_round_trip(d in 1usize..64, lr in 1e-6f64..1.0, theta in 0.0f64..1.0, seed in proptest::prelude::any::<u64>()) {
            let overrides = vec![
                format!("model.d_model={d}"),
                format!("model.ffn_dim={d}"),
                format!("train.learning_rate={lr}"),
                format!("relation.theta={theta}"),
                format!("seed={seed}"),
            ];
            let cfg = RunConfig::load(None, &overrides, None).unwrap();
            proptest::prop_assert_eq!(cfg.model.d_model, d);
            proptest::prop_assert_eq!(cfg.train.learning_rate, lr);
            proptest::prop_assert_eq!(cfg.relation.theta, theta);
            proptest::prop_assert_eq!(cfg.train.seed, seed.wrapping_add(2));
            proptest::prop_assert_eq!(RunConfig::from_flat(&cfg.flatten()).unwrap(), cfg);
        }
    }
}
