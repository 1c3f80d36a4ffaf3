//! Run configuration: JSON file plus `--set key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use convformer_core::fusion::ConvFormerConfig;
use convformer_core::harness::{worker_threads, DataConfig, ExperimentConfig, TrainConfig};
use convformer_core::pipeline::{PipelineConfig, OUTPUT_STRIDE};

/// Rejected configuration. Maps to exit status 2.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Syntax(serde_json::Error),
    #[error("config root must be a JSON object")]
    NotAnObject,
    #[error("malformed override `{0}`, expected key=value")]
    Override(String),
    #[error("override `{key}` descends into non-object `{at}`")]
    OverridePath { key: String, at: String },
    #[error("config key `{path}`: {msg}")]
    Field { path: String, msg: String },
    #[error("config key `{path}`: {msg}")]
    Invalid { path: &'static str, msg: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Checkpoint to evaluate; `<out>/checkpoint.kjtc` when unset.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub depths: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], depths: vec![1, 2, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub oracle_cases: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { oracle_cases: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub fusion: ConvFormerConfig,
    pub pipeline: PipelineConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub record_wall_clock: bool,
    pub seed: u64,
    pub out: String,
    /// Worker pool for ablations; `CONVFORMER_THREADS` or the core count when unset.
    pub threads: Option<usize>,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fusion: ConvFormerConfig::default(),
            pipeline: PipelineConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            record_wall_clock: false,
            seed: 0,
            out: "runs".into(),
            threads: None,
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            verify: VerifySection::default(),
        }
    }
}

/// Every config key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("fusion.channels", "fusion width C shared by both streams"),
    ("fusion.classes", "number of classes K (background plus shapes)"),
    ("fusion.heads", "attention heads; must divide channels"),
    ("fusion.ffn_expansion", "Former feed-forward expansion"),
    ("fusion.bottleneck_expansion", "Conv block inverted-bottleneck expansion"),
    ("fusion.downsample_kernel", "patch aggregation kernel"),
    ("fusion.downsample_stride", "patch aggregation stride"),
    ("fusion.depth", "stacked fusion units; 0 disables fusion"),
    ("fusion.bridge_variant", "cross_attention or inner_product"),
    ("fusion.zero_init_out_proj", "zero each branch's last affine map at init"),
    ("pipeline.text_channels", "text embedding width"),
    ("pipeline.vis_channels", "backbone output width"),
    ("pipeline.decoder_channels", "decoder width"),
    ("pipeline.temperature", "score-map temperature"),
    ("pipeline.aux_weight", "weight of the score-map loss"),
    ("pipeline.text_seed", "stub text encoder seed"),
    ("pipeline.text_embeddings", "KJTE file replacing the stub encoder"),
    ("data.image_size", "square image side, multiple of 8 in 32..=128"),
    ("data.train_count", "training images"),
    ("data.eval_count", "evaluation images"),
    ("data.train_seed", "training set seed"),
    ("data.eval_seed", "evaluation set seed"),
    ("train.steps", "optimizer steps"),
    ("train.batch_size", "images per step"),
    ("train.base_lr", "learning rate; the backbone uses a tenth"),
    ("train.optimizer.beta1", "AdamW first-moment decay"),
    ("train.optimizer.beta2", "AdamW second-moment decay"),
    ("train.optimizer.eps", "AdamW denominator epsilon"),
    ("train.optimizer.weight_decay", "decoupled weight decay"),
    ("train.eval_every", "evaluate every N steps; 0 only at the end"),
    ("record_wall_clock", "store elapsed seconds in reports (breaks byte stability)"),
    ("seed", "run seed for initialisation, shuffling and verification"),
    ("out", "output directory"),
    ("threads", "ablation worker count; null uses CONVFORMER_THREADS or all cores"),
    ("eval.checkpoint", "checkpoint for eval; null uses <out>/checkpoint.kjtc"),
    ("ablation.seeds", "seeds for ablate-bridge and ablate-depth"),
    ("ablation.depths", "depths for ablate-depth, strictly ascending"),
    ("verify.oracle_cases", "random cases per oracle check"),
];

/// Leaf paths of a JSON object, dotted. Arrays and null are leaves.
pub fn leaf_keys(value: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(v, &p, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(value, "", &mut out);
    out
}

fn lookup<'a>(value: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(value, |v, k| v.get(k))
}

/// Key reference appended to `--help`.
pub fn help_text() -> String {
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serialises");
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (JSON file or --set key=value; value parsed as JSON, else as a string):\n");
    for (key, doc) in KEYS {
        let default = lookup(&defaults, key).map(Value::to_string).unwrap_or_default();
        s.push_str(&format!("  {key:<width$}  {doc} [default: {default}]\n"));
    }
    s
}

fn set_path(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| ConfigError::Override(key.into()))?;
    let mut node = root;
    let mut at = String::new();
    for p in parts {
        at = if at.is_empty() { p.to_string() } else { format!("{at}.{p}") };
        let slot = node.entry(p).or_insert_with(|| Value::Object(Map::new()));
        node = slot
            .as_object_mut()
            .ok_or_else(|| ConfigError::OverridePath { key: key.into(), at: at.clone() })?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides to a JSON object.
pub fn apply_overrides(root: &mut Map<String, Value>, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(root, key.trim(), value)?;
    }
    Ok(())
}

/// Deserialises with the offending key path in the error.
pub fn from_value(root: Map<String, Value>) -> Result<RunConfig, ConfigError> {
    serde_path_to_error::deserialize(Value::Object(root)).map_err(|e| ConfigError::Field {
        path: e.path().to_string(),
        msg: e.into_inner().to_string(),
    })
}

/// Reads `path` (if any), applies overrides and deserialises. No semantic
/// validation; see [`RunConfig::validate`].
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.display().to_string(), source })?;
            match serde_json::from_str(&text).map_err(ConfigError::Syntax)? {
                Value::Object(m) => m,
                _ => return Err(ConfigError::NotAnObject),
            }
        }
        None => Map::new(),
    };
    apply_overrides(&mut root, overrides)?;
    from_value(root)
}

/// Which parts of the config a subcommand depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Model and dataset: training, evaluation, ablations.
    Experiment,
    /// Fusion stack and image size only.
    Cost,
    /// Class count and text width only.
    Text,
    /// Nothing beyond deserialisation.
    None,
}

fn invalid(path: &'static str, e: impl std::fmt::Display) -> ConfigError {
    let msg = e.to_string();
    let msg = msg.strip_prefix("invalid configuration: ").unwrap_or(&msg).to_string();
    ConfigError::Invalid { path, msg }
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            fusion: self.fusion.clone(),
            pipeline: self.pipeline.clone(),
            data: self.data.clone(),
            train: self.train.clone(),
            record_wall_clock: self.record_wall_clock,
        }
    }

    pub fn threads(&self) -> usize {
        self.threads.filter(|&n| n > 0).unwrap_or_else(worker_threads)
    }

    pub fn validate(&self, scope: Scope) -> Result<(), ConfigError> {
        if scope == Scope::None {
            return Ok(());
        }
        self.fusion.validate().map_err(|e| invalid("fusion", e))?;
        if scope == Scope::Cost {
            let n = self.data.image_size;
            if n == 0 || !n.is_multiple_of(OUTPUT_STRIDE) {
                return Err(invalid("data.image_size", format!("must be a positive multiple of {OUTPUT_STRIDE}, got {n}")));
            }
            return Ok(());
        }
        self.pipeline.validate().map_err(|e| invalid("pipeline", e))?;
        if scope == Scope::Text {
            if self.fusion.classes < 2 {
                return Err(invalid("fusion.classes", "need at least 2 classes"));
            }
            return Ok(());
        }
        self.train.validate().map_err(|e| invalid("train", e))?;
        let exp = self.experiment();
        exp.train_spec().validate().map_err(|e| invalid("data", e))?;
        exp.eval_spec().validate().map_err(|e| invalid("data", e))?;
        if self.threads == Some(0) {
            return Err(invalid("threads", "must be >= 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> Result<RunConfig, ConfigError> {
        match serde_json::from_str(json).unwrap() {
            Value::Object(m) => from_value(m),
            _ => unreachable!(),
        }
    }

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.fusion.depth, 6);
        c.validate(Scope::Experiment).unwrap();
    }

    #[test]
    fn depth_zero_accepted() {
        let c = parse(r#"{"fusion":{"depth":0}}"#).unwrap();
        assert_eq!(c.fusion.depth, 0);
        c.validate(Scope::Experiment).unwrap();
    }

    #[test]
    fn head_divisibility_rejected_with_path() {
        let c = parse(r#"{"fusion":{"heads":3,"channels":16}}"#).unwrap();
        let e = c.validate(Scope::Experiment).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { path: "fusion", .. }), "{e}");
        assert!(e.to_string().contains("divisible"));
    }

    #[test]
    fn unknown_key_reports_path() {
        let e = parse(r#"{"fusion":{"dpeth":2}}"#).unwrap_err();
        let ConfigError::Field { path, msg } = e else { panic!() };
        assert!(path.starts_with("fusion"), "{path}");
        assert!(msg.contains("dpeth"));
    }

    #[test]
    fn type_mismatch_reports_path() {
        let e = parse(r#"{"train":{"optimizer":{"beta1":"high"}}}"#).unwrap_err();
        let ConfigError::Field { path, .. } = e else { panic!() };
        assert_eq!(path, "train.optimizer.beta1");
    }

    #[test]
    fn overrides_nest_and_parse_json() {
        let mut root = Map::new();
        apply_overrides(
            &mut root,
            &["fusion.depth=2".into(), "out=/tmp/x".into(), "ablation.seeds=[4,5]".into(), "fusion.bridge_variant=inner_product".into()],
        )
        .unwrap();
        let c = from_value(root).unwrap();
        assert_eq!(c.fusion.depth, 2);
        assert_eq!(c.out, "/tmp/x");
        assert_eq!(c.ablation.seeds, vec![4, 5]);
        assert!(apply_overrides(&mut Map::new(), &["novalue".into()]).is_err());
        let mut root = Map::new();
        root.insert("seed".into(), Value::from(1));
        assert!(matches!(apply_overrides(&mut root, &["seed.x=1".into()]), Err(ConfigError::OverridePath { .. })));
    }

    #[test]
    fn file_form_roundtrips() {
        let mut c = RunConfig::default();
        c.pipeline.temperature = 0.1 + 0.2;
        c.threads = Some(3);
        c.eval.checkpoint = Some("a/b.kjtc".into());
        let Value::Object(m) = serde_json::from_str(&c.to_json()).unwrap() else { panic!() };
        assert_eq!(from_value(m).unwrap(), c);
    }

    #[test]
    fn key_table_matches_schema() {
        let mut schema = leaf_keys(&serde_json::to_value(RunConfig::default()).unwrap());
        let mut documented: Vec<String> = KEYS.iter().map(|(k, _)| k.to_string()).collect();
        schema.sort();
        documented.sort();
        assert_eq!(documented, schema);
    }
}
