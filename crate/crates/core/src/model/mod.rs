//! The patch-sequence network: configuration, parameter store and
//! initialization. Forward passes live in [`forward`], checkpoint files in
//! [`checkpoint`] and the analytic cost model in [`macs`].

pub mod check;
pub mod checkpoint;
pub mod forward;
pub mod macs;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{face_count, vertices_per_patch, BASE_ORDER};
use crate::ssm::{DirectionWeights, SsmError, VimDims, VimWeights};
use crate::tensor::{fastmath, Tensor, TensorError};

pub use check::{gradcheck_model, Objective};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry, FORMAT_VERSION};
pub use forward::{ar_forward, ar_forward_mode, ar_loss, ar_sequence, build_sequence, forward, ForwardOptions};
pub use macs::{count_macs, count_parameters};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite activations after {0}")]
    NonFinite(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint tensors do not match the model: {0:?}")]
    TensorMismatch(Vec<String>),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Micro,
}

impl Variant {
    /// `(layers, D, E)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Variant::Tiny => (24, 192, 384),
            Variant::Small => (24, 384, 768),
            Variant::Base => (24, 768, 1536),
            Variant::Micro => (4, 64, 128),
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" => Some(Variant::Tiny),
            "small" => Some(Variant::Small),
            "base" => Some(Variant::Base),
            "micro" => Some(Variant::Micro),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 1,
            width: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub patch_order: usize,
    pub channels: usize,
    pub head_out: usize,
    /// Patches per hemisphere fed to the network; the full count unless
    /// the sequence is truncated for tests.
    pub seq_patches: usize,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant, patch_order: usize) -> Self {
        let (layers, d_model, d_inner) = variant.dims();
        ModelConfig {
            variant,
            layers,
            d_model,
            d_inner,
            patch_order,
            channels: 4,
            head_out: 1,
            seq_patches: face_count(patch_order.min(BASE_ORDER)),
            decoder: DecoderConfig::default(),
        }
    }

    /// Keep only the first `n` patches of each hemisphere.
    pub fn truncated(mut self, n: usize) -> Self {
        self.seq_patches = n;
        self
    }

    /// `N`
    pub fn num_patches(&self) -> usize {
        face_count(self.patch_order)
    }

    /// `V`
    pub fn vertices_per_patch(&self) -> usize {
        vertices_per_patch(self.patch_order)
    }

    /// `V·C`, the flattened width of one patch.
    pub fn patch_dim(&self) -> usize {
        self.vertices_per_patch() * self.channels
    }

    /// `2n + 1` with `n` the patches used per hemisphere.
    pub fn tokens(&self) -> usize {
        2 * self.seq_patches + 1
    }

    pub fn vim_dims(&self) -> VimDims {
        VimDims::new(self.d_model, self.d_inner)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_order >= BASE_ORDER {
            return bad(format!(
                "patch order {} must be below {BASE_ORDER}",
                self.patch_order
            ));
        }
        if self.layers == 0 || self.d_model == 0 || self.d_inner == 0 {
            return bad("layers, d_model and d_inner must be positive".into());
        }
        if self.channels == 0 || self.head_out == 0 {
            return bad("channels and head_out must be positive".into());
        }
        if self.seq_patches == 0 || self.seq_patches > self.num_patches() {
            return bad(format!(
                "sequence uses {} patches, order {} has {}",
                self.seq_patches,
                self.patch_order,
                self.num_patches()
            ));
        }
        if self.decoder.width == 0 {
            return bad("decoder width must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    TruncNormal,
    Zeros,
    Ones,
    /// uniform on `±scale`
    Uniform(f64),
    /// `ln(n + 1)` along the state axis
    ALog,
    /// `softplus⁻¹` of a log-uniform step in `[1e-3, 1e-1]`
    DtBias,
}

pub(crate) struct Spec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

const INIT_STD: f64 = 0.02;
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

fn spec(name: String, shape: Vec<usize>, init: Init) -> Spec {
    Spec { name, shape, init }
}

pub(crate) fn head_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.d_model;
    vec![
        spec("head.norm.gamma".into(), vec![d], Init::Ones),
        spec("head.norm.beta".into(), vec![d], Init::Zeros),
        spec(
            "head.weight".into(),
            vec![d, cfg.head_out],
            Init::TruncNormal,
        ),
        spec("head.bias".into(), vec![cfg.head_out], Init::Zeros),
    ]
}

pub(crate) fn layer_specs(cfg: &ModelConfig, l: usize) -> Vec<Spec> {
    let v = cfg.vim_dims();
    let (d, e, n, r, k) = (v.d_model, v.d_inner, v.d_state, v.dt_rank, v.conv_width);
    let p = |s: &str| format!("layers.{l}.{s}");
    let mut out = vec![
        spec(p("norm_gamma"), vec![d], Init::Ones),
        spec(p("norm_beta"), vec![d], Init::Zeros),
        spec(p("in_proj_x"), vec![d, e], Init::TruncNormal),
        spec(p("in_proj_z"), vec![d, e], Init::TruncNormal),
        spec(p("out_proj"), vec![e, d], Init::TruncNormal),
    ];
    for dir in ["fwd", "bwd"] {
        let q = |s: &str| format!("layers.{l}.{dir}.{s}");
        out.extend([
            spec(
                q("conv_weight"),
                vec![e, k],
                Init::Uniform(1.0 / (k as f64).sqrt()),
            ),
            spec(q("conv_bias"), vec![e], Init::Zeros),
            spec(q("x_proj_dt"), vec![e, r], Init::TruncNormal),
            spec(q("x_proj_b"), vec![e, n], Init::TruncNormal),
            spec(q("x_proj_c"), vec![e, n], Init::TruncNormal),
            spec(
                q("dt_proj"),
                vec![r, e],
                Init::Uniform(1.0 / (r as f64).sqrt()),
            ),
            spec(q("dt_bias"), vec![e], Init::DtBias),
            spec(q("a_log"), vec![e, n], Init::ALog),
            spec(q("d_skip"), vec![e], Init::Ones),
        ]);
    }
    out
}

pub(crate) fn decoder_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let DecoderConfig { depth, width } = cfg.decoder;
    let d = cfg.d_model;
    let mut out = vec![
        spec("decoder.norm.gamma".into(), vec![d], Init::Ones),
        spec("decoder.norm.beta".into(), vec![d], Init::Zeros),
    ];
    let mut fan_in = d;
    for i in 0..depth {
        out.push(spec(
            format!("decoder.hidden.{i}.weight"),
            vec![fan_in, width],
            Init::TruncNormal,
        ));
        out.push(spec(
            format!("decoder.hidden.{i}.bias"),
            vec![width],
            Init::Zeros,
        ));
        fan_in = width;
    }
    out.push(spec(
        "decoder.out.weight".into(),
        vec![fan_in, cfg.patch_dim()],
        Init::TruncNormal,
    ));
    out.push(spec(
        "decoder.out.bias".into(),
        vec![cfg.patch_dim()],
        Init::Zeros,
    ));
    out
}

/// Every backbone and head tensor, in storage order.
pub(crate) fn model_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.d_model;
    let mut out = vec![
        spec(
            "patch_embed".into(),
            vec![cfg.patch_dim(), d],
            Init::TruncNormal,
        ),
        spec("cls_token".into(), vec![d], Init::TruncNormal),
        spec("pos_embed".into(), vec![cfg.tokens(), d], Init::TruncNormal),
    ];
    for l in 0..cfg.layers {
        out.extend(layer_specs(cfg, l));
    }
    out.extend(head_specs(cfg));
    out
}

/// Stable 64-bit FNV-1a, used to give every tensor its own random stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub(crate) fn init_tensor(s: &Spec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(&s.name));
    let n: usize = s.shape.iter().product();
    let data: Vec<f64> = match s.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::TruncNormal => {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            (0..n)
                .map(|_| loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * INIT_STD {
                        break x;
                    }
                })
                .collect()
        }
        Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
        Init::ALog => {
            let cols = *s.shape.last().unwrap_or(&1);
            (0..n).map(|i| ((i % cols) as f64 + 1.0).ln()).collect()
        }
        Init::DtBias => (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                fastmath::softplus_inv(dt.clamp(DT_MIN, DT_MAX))
            })
            .collect(),
    };
    Tensor::new(s.shape.clone(), data).expect("spec shape matches data")
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// The network's named parameters, optionally with an autoregressive
/// decoder attached.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub config: ModelConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl SimModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = model_specs(&config)
            .iter()
            .map(|s| Param {
                name: s.name.clone(),
                value: Arc::new(init_tensor(s, seed)),
            })
            .collect();
        Ok(Self::from_params(config, params))
    }

    fn from_params(config: ModelConfig, params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        SimModel {
            config,
            params,
            index,
        }
    }

    /// Add freshly initialized decoder tensors (replacing any present).
    pub fn attach_decoder(&mut self, seed: u64) {
        self.detach_decoder();
        for s in decoder_specs(&self.config) {
            let value = Arc::new(init_tensor(&s, seed));
            self.params.push(Param {
                name: s.name,
                value,
            });
        }
        *self = Self::from_params(self.config, std::mem::take(&mut self.params));
    }

    pub fn detach_decoder(&mut self) {
        let params: Vec<Param> = std::mem::take(&mut self.params)
            .into_iter()
            .filter(|p| !is_decoder(&p.name))
            .collect();
        *self = Self::from_params(self.config, params);
    }

    pub fn has_decoder(&self) -> bool {
        self.index.contains_key("decoder.out.weight")
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.into()))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(ModelError::TensorMismatch(vec![format!(
                "{name}: model {:?}, given {:?}",
                self.params[i].value.shape(),
                value.shape()
            )]));
        }
        self.params[i].value = Arc::new(value);
        Ok(())
    }

    /// Replace every parameter at once, in [`SimModel::params`] order.
    pub fn set_all(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(ModelError::Shape(format!(
                "{} tensors given for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(ModelError::TensorMismatch(vec![p.name.clone()]));
            }
            p.value = Arc::new(v);
        }
        Ok(())
    }

    /// Backbone and head scalars, excluding any decoder.
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !is_decoder(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Re-draw the head tensors from `seed`, leaving everything else alone.
    pub fn reset_head(&mut self, seed: u64) {
        for s in head_specs(&self.config) {
            let i = self.index[&s.name];
            self.params[i].value = Arc::new(init_tensor(&s, seed));
        }
    }

    /// Copy every forward-direction scan tensor onto its backward twin.
    pub fn mirror_forward_direction(&mut self) {
        for l in 0..self.config.layers {
            for f in DirectionWeights::<()>::NAMES {
                let src = self.index[&format!("layers.{l}.fwd.{f}")];
                let dst = self.index[&format!("layers.{l}.bwd.{f}")];
                self.params[dst].value = Arc::clone(&self.params[src].value);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub(crate) fn layer_weights<N: Clone>(&self, nodes: &[N], l: usize) -> VimWeights<N> {
        let mut names: Vec<String> = VimWeights::<()>::SHARED_NAMES
            .iter()
            .map(|s| format!("layers.{l}.{s}"))
            .collect();
        for dir in ["fwd", "bwd"] {
            names.extend(
                DirectionWeights::<()>::NAMES
                    .iter()
                    .map(|s| format!("layers.{l}.{dir}.{s}")),
            );
        }
        let v: Vec<N> = names.iter().map(|n| nodes[self.index[n]].clone()).collect();
        VimWeights::from_slice(&v)
    }

    pub(crate) fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownParam(name.into()))
    }
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

pub fn is_decoder(name: &str) -> bool {
    name.starts_with("decoder.")
}

pub fn is_backbone(name: &str) -> bool {
    !is_head(name) && !is_decoder(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_dims_and_tokens() {
        let c = ModelConfig::new(Variant::Tiny, 1);
        assert_eq!((c.layers, c.d_model, c.d_inner), (24, 192, 384));
        assert_eq!(c.num_patches(), 80);
        assert_eq!(c.vertices_per_patch(), 561);
        assert_eq!(c.patch_dim(), 2244);
        assert_eq!(c.tokens(), 161);
        for v in [Variant::Tiny, Variant::Small, Variant::Base, Variant::Micro] {
            let (_, d, e) = v.dims();
            assert_eq!(e, 2 * d);
        }
    }

    #[test]
    fn init_rules() {
        let cfg = ModelConfig::new(Variant::Micro, 5).truncated(20);
        let m = SimModel::new(cfg, 3).unwrap();
        let a = m.get("layers.0.fwd.a_log").unwrap();
        assert_eq!(&a.data()[..3], &[0.0, 2f64.ln(), 3f64.ln()]);
        let dt = m.get("layers.1.bwd.dt_bias").unwrap();
        assert!(dt
            .data()
            .iter()
            .all(|&b| (1e-3 - 1e-12..=0.1 + 1e-12).contains(&fastmath::softplus(b))));
        let w = m.get("layers.2.in_proj_x").unwrap();
        assert!(w.data().iter().all(|x| x.abs() <= 0.04));
        let sd = (w.data().iter().map(|x| x * x).sum::<f64>() / w.numel() as f64).sqrt();
        assert!((0.013..0.02).contains(&sd), "{sd}");
        assert!(m.get("head.bias").unwrap().data().iter().all(|&b| b == 0.0));
        assert!(m
            .get("layers.0.fwd.conv_bias")
            .unwrap()
            .data()
            .iter()
            .all(|&b| b == 0.0));
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::new(Variant::Micro, 4).truncated(8);
        let a = SimModel::new(cfg, 9).unwrap();
        let b = SimModel::new(cfg, 9).unwrap();
        let c = SimModel::new(cfg, 10).unwrap();
        for ((p, q), r) in a.params().iter().zip(b.params()).zip(c.params()) {
            assert_eq!(p.value, q.value);
            if p.name == "patch_embed" {
                assert_ne!(p.value, r.value);
            }
        }
    }

    #[test]
    fn reset_head_touches_only_head() {
        let cfg = ModelConfig::new(Variant::Micro, 4).truncated(8);
        let a = SimModel::new(cfg, 1).unwrap();
        let mut b = a.clone();
        b.reset_head(77);
        for (p, q) in a.params().iter().zip(b.params()) {
            if p.name == "head.weight" {
                assert_ne!(p.value, q.value);
            } else if !is_head(&p.name) {
                assert_eq!(p.value, q.value);
            }
        }
    }

    #[test]
    fn decoder_shapes() {
        let cfg = ModelConfig::new(Variant::Micro, 3);
        let mut m = SimModel::new(cfg, 1).unwrap();
        let before = m.parameter_count();
        m.attach_decoder(2);
        assert_eq!(
            m.get("decoder.hidden.0.weight").unwrap().shape(),
            &[64, 256]
        );
        assert_eq!(m.get("decoder.hidden.0.bias").unwrap().shape(), &[256]);
        assert_eq!(
            m.get("decoder.out.weight").unwrap().shape(),
            &[256, cfg.patch_dim()]
        );
        assert_eq!(
            m.get("decoder.out.bias").unwrap().shape(),
            &[cfg.patch_dim()]
        );
        assert_eq!(m.parameter_count(), before);
        m.detach_decoder();
        assert!(!m.has_decoder());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SimModel::new(ModelConfig::new(Variant::Micro, 6), 0).is_err());
        assert!(SimModel::new(ModelConfig::new(Variant::Micro, 5).truncated(0), 0).is_err());
        assert!(SimModel::new(ModelConfig::new(Variant::Micro, 5).truncated(20481), 0).is_err());
    }
}
