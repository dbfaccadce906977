//! Run configuration: defaults, JSON file merge, dotted overrides, seeds.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sphere_ssm::analysis::{BenchConfig, DEFAULT_CHANNEL_NAMES};
use sphere_ssm::data::SynthConfig;
use sphere_ssm::model::{DecoderConfig, Variant};
use sphere_ssm::training::{Strategy, TrainConfig};

use crate::error::CliError;

pub const SEED_ENV: &str = "SPHERE_SSM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub label: String,
    pub bin_width: f64,
    pub ratios: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            label: "pma_weeks".into(),
            bin_width: 1.0,
            ratios: [8.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub patch_order: usize,
    pub seq_patches: Option<usize>,
    pub decoder: DecoderConfig,
    /// `None` mirrors only when starting from an autoregressive checkpoint.
    pub mirror_forward: Option<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::Micro,
            patch_order: 5,
            seq_patches: None,
            decoder: DecoderConfig::default(),
            mirror_forward: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySection {
    pub modes: Vec<String>,
    pub vertex_stride: usize,
    pub hemispheres: Vec<usize>,
    pub channel_names: Vec<String>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        SensitivitySection {
            modes: vec!["all".into()],
            vertex_stride: 1,
            hemispheres: vec![0, 1],
            channel_names: DEFAULT_CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub synth: SynthConfig,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sensitivity: SensitivitySection,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_strategy(Strategy::Scratch)
    }
}

impl RunConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            synth: SynthConfig::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::for_strategy(strategy),
            sensitivity: SensitivitySection::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Every configuration key with a one-line description.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "run seed; fills every *.seed key not set explicitly (flag > config > $SPHERE_SSM_SEED > 0)"),
    ("workers", "rayon worker threads, 0 = all cores"),
    ("synth.num_subjects", "gen-data: number of subjects"),
    ("synth.channels", "gen-data: feature channels per vertex"),
    ("synth.seed", "gen-data: generator seed"),
    ("synth.task", "gen-data: \"global\" or \"cap\" (label driven by a geodesic cap)"),
    ("synth.max_degree", "gen-data: highest spherical-harmonic degree"),
    ("synth.noise", "gen-data: per-vertex Gaussian noise sigma"),
    ("synth.gain", "gen-data: size of the latent's effect on its coefficients"),
    ("synth.nuisance", "gen-data: scale of latent-independent coefficients"),
    ("synth.label", "gen-data: label column name"),
    ("synth.label_range", "gen-data: [min, max] label range"),
    ("synth.cap_radius", "gen-data: cap geodesic radius in radians"),
    ("data.label", "label column used for splitting and regression"),
    ("data.bin_width", "label bin width for the stratified split"),
    ("data.ratios", "train/val/test proportions"),
    ("model.variant", "tiny | small | base | micro"),
    ("model.patch_order", "icosphere order of the patch grid, 1..=5"),
    ("model.seq_patches", "patches kept per hemisphere, null = all"),
    ("model.decoder.depth", "autoregressive decoder hidden layers"),
    ("model.decoder.width", "autoregressive decoder hidden width"),
    ("model.mirror_forward", "finetune: copy loaded forward-scan weights onto the backward scan; null = only for AR checkpoints"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "mini-batch size"),
    ("train.lr", "peak learning rate"),
    ("train.schedule", "\"step\" or \"cosine\""),
    ("train.step_size", "step schedule: epochs per decay"),
    ("train.gamma", "step schedule: decay factor"),
    ("train.warmup_epochs", "cosine schedule: linear warmup epochs"),
    ("train.weight_decay", "AdamW decoupled weight decay"),
    ("train.betas", "AdamW [beta1, beta2]"),
    ("train.eps", "AdamW epsilon"),
    ("train.seed", "shuffling and initialization seed"),
    ("train.strategy", "scratch | finetune | ar_pretrain | ar_finetune"),
    ("train.loss", "\"mse\""),
    ("train.recompute", "recompute layer intermediates in the backward pass"),
    ("sensitivity.modes", "\"all\" and/or channel names to nullify"),
    ("sensitivity.vertex_stride", "analyse every k-th vertex"),
    ("sensitivity.hemispheres", "hemispheres to analyse (0 = left, 1 = right)"),
    ("sensitivity.channel_names", "names of the input channels, in order"),
    ("bench.orders", "patch orders to benchmark"),
    ("bench.kinds", "blocks to benchmark: \"scan\", \"attention\""),
    ("bench.repeats", "timed forward passes per point"),
    ("bench.warmup", "untimed forward passes per point"),
    ("bench.d_model", "block width D"),
    ("bench.d_inner", "scan inner width E"),
    ("bench.heads", "attention heads"),
    ("bench.mlp_ratio", "attention MLP expansion"),
    ("bench.seed", "weight seed"),
];

/// Leaf paths and values of a JSON object; arrays are leaves.
pub fn flatten(v: &Value) -> Vec<(String, Value)> {
    fn go(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&p, x, out);
                }
            }
            _ => out.push((prefix.to_string(), v.clone())),
        }
    }
    let mut out = Vec::new();
    go("", v, &mut out);
    out
}

/// Key reference for `--help`, with the defaults of `strategy`.
pub fn key_help(strategy: Strategy) -> String {
    let defaults = serde_json::to_value(RunConfig::for_strategy(strategy)).expect("config serializes");
    let flat = flatten(&defaults);
    let mut s = String::from("Config keys (JSON file via --config, or --set key=value):\n");
    for (key, doc) in KEY_DOCS {
        let d = flat
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.to_string())
            .unwrap_or_default();
        s.push_str(&format!("  {key} = {d}\n      {doc}\n"));
    }
    s
}

/// A config being assembled, remembering which keys were set explicitly.
pub struct Resolver {
    value: Value,
    explicit: BTreeSet<String>,
}

impl Resolver {
    pub fn new(defaults: &RunConfig) -> Self {
        Resolver {
            value: serde_json::to_value(defaults).expect("config serializes"),
            explicit: BTreeSet::new(),
        }
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(CliError::usage(format!("config {}: top level must be an object", path.display())));
        }
        merge(&mut self.value, &v, "", &mut self.explicit)
    }

    /// Apply one `key=value`; the value is parsed as JSON, falling back to a
    /// plain string.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {assignment:?}")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut patch = parsed;
        for part in key.rsplit('.') {
            if part.is_empty() {
                return Err(CliError::usage(format!("empty segment in key {key:?}")));
            }
            let mut m = Map::new();
            m.insert(part.to_string(), patch);
            patch = Value::Object(m);
        }
        merge(&mut self.value, &patch, "", &mut self.explicit)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Resolve the run seed and propagate it to every sub-seed that was not
    /// set explicitly.
    pub fn finish(
        mut self,
        seed_flag: Option<u64>,
        env_seed: Option<&str>,
    ) -> Result<(RunConfig, &'static str), CliError> {
        let source;
        let seed = if let Some(s) = seed_flag {
            source = "flag";
            s
        } else if self.is_explicit("seed") {
            source = "config";
            self.value["seed"]
                .as_u64()
                .ok_or_else(|| CliError::usage("seed must be a non-negative integer"))?
        } else if let Some(e) = env_seed {
            source = "env";
            e.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SEED_ENV}={e:?} is not a non-negative integer")))?
        } else {
            source = "default";
            0
        };
        self.value["seed"] = Value::from(seed);
        for section in ["synth", "train", "bench"] {
            if !self.is_explicit(&format!("{section}.seed")) {
                self.value[section]["seed"] = Value::from(seed);
            }
        }
        let cfg: RunConfig =
            serde_json::from_value(self.value).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.train
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok((cfg, source))
    }
}

fn merge(dst: &mut Value, src: &Value, prefix: &str, explicit: &mut BTreeSet<String>) -> Result<(), CliError> {
    let (Value::Object(d), Value::Object(s)) = (&mut *dst, src) else {
        unreachable!("merge is only called on objects")
    };
    for (k, v) in s {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = d
            .get_mut(k)
            .ok_or_else(|| CliError::usage(format!("unknown config key {path:?}")))?;
        match (slot.is_object(), v.is_object()) {
            (true, true) => merge(slot, v, &path, explicit)?,
            (true, false) => {
                return Err(CliError::usage(format!("config key {path:?} is a section, not a value")))
            }
            _ => {
                *slot = v.clone();
                explicit.insert(path);
            }
        }
    }
    Ok(())
}
