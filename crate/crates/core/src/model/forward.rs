//! Forward passes, generic over eager evaluation and the tape.

use std::rc::Rc;

use super::{ModelError, Result, SimModel};
use crate::ssm::{vim_block_forward, ScanMode, VimWeights, LN_EPS};
use crate::tensor::{CheckpointFn, Eager, Graph, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Recompute each layer's intermediates during the backward pass
    /// instead of keeping them.
    pub recompute: bool,
}

impl SimModel {
    /// One graph node per parameter, in [`SimModel::params`] order.
    pub fn bind<G: Graph>(&self, g: &G) -> Vec<G::Node> {
        self.params().iter().map(|p| g.param(&p.value)).collect()
    }

    fn node<G: Graph>(&self, nodes: &[G::Node], name: &str) -> Result<G::Node> {
        Ok(nodes[self.index_of(name)?].clone())
    }

    /// Eager regression output for one subject.
    pub fn predict(&self, left: &Tensor, right: &Tensor) -> Result<Vec<f64>> {
        let g = Eager;
        let nodes = self.bind(&g);
        let y = forward(
            &g,
            self,
            &nodes,
            &g.constant(left.clone()),
            &g.constant(right.clone()),
            ForwardOptions::default(),
        )?;
        Ok(y.data().to_vec())
    }

    /// Eager next-patch predictions `[2n, V·C]`.
    pub fn ar_predict(&self, left: &Tensor, right: &Tensor) -> Result<Tensor> {
        let g = Eager;
        let nodes = self.bind(&g);
        let y = ar_forward(
            &g,
            self,
            &nodes,
            &g.constant(left.clone()),
            &g.constant(right.clone()),
            ForwardOptions::default(),
        )?;
        Ok(y.as_ref().clone())
    }
}

fn hemisphere<G: Graph>(g: &G, model: &SimModel, x: &G::Node, side: &str) -> Result<G::Node> {
    let cfg = &model.config;
    let want = [cfg.seq_patches, cfg.vertices_per_patch(), cfg.channels];
    let got = g.value(x).shape().to_vec();
    if got != want {
        return Err(ModelError::Shape(format!(
            "{side} hemisphere is {got:?}, expected {want:?}"
        )));
    }
    Ok(g.reshape(x, &[cfg.seq_patches, cfg.patch_dim()])?)
}

/// `[left·W; X_cls; right·W] + E_pos`, shape `[2n + 1, D]`.
pub fn build_sequence<G: Graph>(
    g: &G,
    model: &SimModel,
    nodes: &[G::Node],
    left: &G::Node,
    right: &G::Node,
) -> Result<G::Node> {
    let w = model.node::<G>(nodes, "patch_embed")?;
    let l = g.matmul(&hemisphere(g, model, left, "left")?, &w)?;
    let r = g.matmul(&hemisphere(g, model, right, "right")?, &w)?;
    let cls = g.reshape(
        &model.node::<G>(nodes, "cls_token")?,
        &[1, model.config.d_model],
    )?;
    let s = g.concat(&[l, cls, r], 0)?;
    Ok(g.add(&s, &model.node::<G>(nodes, "pos_embed")?)?)
}

/// The class-token-free sequence `[left·W; right·W]` plus the positional
/// rows of those tokens, shape `[2n, D]`.
pub fn ar_sequence<G: Graph>(
    g: &G,
    model: &SimModel,
    nodes: &[G::Node],
    left: &G::Node,
    right: &G::Node,
) -> Result<G::Node> {
    let n = model.config.seq_patches;
    let w = model.node::<G>(nodes, "patch_embed")?;
    let l = g.matmul(&hemisphere(g, model, left, "left")?, &w)?;
    let r = g.matmul(&hemisphere(g, model, right, "right")?, &w)?;
    let s = g.concat(&[l, r], 0)?;
    let pos = model.node::<G>(nodes, "pos_embed")?;
    let pos = g.concat(&[g.narrow(&pos, 0, 0, n)?, g.narrow(&pos, 0, n + 1, n)?], 0)?;
    Ok(g.add(&s, &pos)?)
}

fn tensor_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid {
        op: "layer",
        msg: e.to_string(),
    }
}

fn layers<G: Graph>(
    g: &G,
    model: &SimModel,
    nodes: &[G::Node],
    mut s: G::Node,
    mode: ScanMode,
    opts: ForwardOptions,
) -> Result<G::Node> {
    let dims = model.config.vim_dims();
    for l in 0..model.config.layers {
        let w = model.layer_weights(nodes, l);
        s = if opts.recompute && g.records() {
            let mut inputs = vec![s];
            inputs.extend(w.to_vec());
            let f: Rc<CheckpointFn> = Rc::new(move |t: &Tape, v: &[Var<'_>]| {
                let w = VimWeights::from_slice(&v[1..]);
                vim_block_forward(&t, &v[0], &w, &dims, mode).map_err(tensor_err)
            });
            g.checkpoint(&inputs, f)?
        } else {
            vim_block_forward(g, &s, &w, &dims, mode)?
        };
        if !g.value(&s).is_finite() {
            return Err(ModelError::NonFinite(format!("layer {l}")));
        }
    }
    Ok(s)
}

/// Regression output `[head_out]`: bidirectional layers, then layer norm
/// and a linear head on the class token.
pub fn forward<G: Graph>(
    g: &G,
    model: &SimModel,
    nodes: &[G::Node],
    left: &G::Node,
    right: &G::Node,
    opts: ForwardOptions,
) -> Result<G::Node> {
    let s0 = build_sequence(g, model, nodes, left, right)?;
    let s = layers(g, model, nodes, s0, ScanMode::Bidirectional, opts)?;
    let cls = g.narrow(&s, 0, model.config.seq_patches, 1)?;
    let t = g.layernorm(
        &cls,
        &model.node::<G>(nodes, "head.norm.gamma")?,
        &model.node::<G>(nodes, "head.norm.beta")?,
        LN_EPS,
    )?;
    let y = g.matmul(&t, &model.node::<G>(nodes, "head.weight")?)?;
    let y = g.add(&y, &model.node::<G>(nodes, "head.bias")?)?;
    let y = g.reshape(&y, &[model.config.head_out])?;
    if !g.value(&y).is_finite() {
        return Err(ModelError::NonFinite("head".into()));
    }
    Ok(y)
}

/// Causal layers and the decoder: row `t` predicts the flattened features
/// of patch `t + 1`. Shape `[2n, V·C]`.
pub fn ar_forward<G: Graph>(
    g: &G,
    model: &SimModel,
    nodes: &[G::Node],
    left: &G::Node,
    right: &G::Node,
    opts: ForwardOptions,
) -> Result<G::Node> {
    ar_forward_mode(g, model, nodes, left, right, ScanMode::Causal, opts)
}

/// [`ar_forward`] with the layers run in `mode`; only `Causal` is a valid
/// next-patch predictor, `Bidirectional` exists for comparison.
pub fn ar_forward_mode<G: Graph>(
    g: &G,
    model: &SimModel,
    nodes: &[G::Node],
    left: &G::Node,
    right: &G::Node,
    mode: ScanMode,
    opts: ForwardOptions,
) -> Result<G::Node> {
    if !model.has_decoder() {
        return Err(ModelError::Config("no decoder attached".into()));
    }
    let s0 = ar_sequence(g, model, nodes, left, right)?;
    let s = layers(g, model, nodes, s0, mode, opts)?;
    let mut h = g.layernorm(
        &s,
        &model.node::<G>(nodes, "decoder.norm.gamma")?,
        &model.node::<G>(nodes, "decoder.norm.beta")?,
        LN_EPS,
    )?;
    for i in 0..model.config.decoder.depth {
        let w = model.node::<G>(nodes, &format!("decoder.hidden.{i}.weight"))?;
        let b = model.node::<G>(nodes, &format!("decoder.hidden.{i}.bias"))?;
        h = g.silu(&g.add(&g.matmul(&h, &w)?, &b)?);
    }
    let w = model.node::<G>(nodes, "decoder.out.weight")?;
    let b = model.node::<G>(nodes, "decoder.out.bias")?;
    let y = g.add(&g.matmul(&h, &w)?, &b)?;
    let out_dim = *g.value(&y).shape().last().unwrap_or(&0);
    if out_dim != model.config.patch_dim() {
        return Err(ModelError::Shape(format!(
            "decoder emits {out_dim} features per token, patches have {}",
            model.config.patch_dim()
        )));
    }
    if !g.value(&y).is_finite() {
        return Err(ModelError::NonFinite("decoder".into()));
    }
    Ok(y)
}

/// Mean squared next-patch error over positions `0..2n-1`.
pub fn ar_loss<G: Graph>(
    g: &G,
    model: &SimModel,
    nodes: &[G::Node],
    left: &G::Node,
    right: &G::Node,
    opts: ForwardOptions,
) -> Result<G::Node> {
    let cfg = &model.config;
    let n2 = 2 * cfg.seq_patches;
    let pred = ar_forward(g, model, nodes, left, right, opts)?;
    let target = g.concat(
        &[
            hemisphere(g, model, left, "left")?,
            hemisphere(g, model, right, "right")?,
        ],
        0,
    )?;
    let p = g.narrow(&pred, 0, 0, n2 - 1)?;
    let t = g.narrow(&target, 0, 1, n2 - 1)?;
    Ok(g.mse(&p, &t)?)
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, Variant};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hemis(cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let shape = [cfg.seq_patches, cfg.vertices_per_patch(), cfg.channels];
        let n: usize = shape.iter().product();
        let mut t =
            || Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        (t(), t())
    }

    fn micro() -> ModelConfig {
        ModelConfig::new(Variant::Micro, 5).truncated(12)
    }

    #[test]
    fn zero_inputs_give_zero_sequence() {
        let cfg = micro();
        let mut m = SimModel::new(cfg, 1).unwrap();
        m.set("cls_token", Tensor::zeros([cfg.d_model])).unwrap();
        m.set("pos_embed", Tensor::zeros([cfg.tokens(), cfg.d_model]))
            .unwrap();
        let z = Tensor::zeros([12, 6, 4]);
        let g = Eager;
        let nodes = m.bind(&g);
        let s = build_sequence(&g, &m, &nodes, &Arc::new(z.clone()), &Arc::new(z)).unwrap();
        assert_eq!(s.shape(), &[25, 64]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_token_is_input_independent() {
        let cfg = micro();
        let m = SimModel::new(cfg, 2).unwrap();
        let (l, r) = hemis(&cfg, 3);
        let g = Eager;
        let nodes = m.bind(&g);
        let a = build_sequence(&g, &m, &nodes, &Arc::new(l.clone()), &Arc::new(r.clone())).unwrap();
        let b = build_sequence(&g, &m, &nodes, &Arc::new(r), &Arc::new(l)).unwrap();
        let d = cfg.d_model;
        let n = cfg.seq_patches;
        assert_eq!(&a.data()[n * d..(n + 1) * d], &b.data()[n * d..(n + 1) * d]);
        let cls = m.get("cls_token").unwrap();
        let pos = m.get("pos_embed").unwrap();
        for k in 0..d {
            assert_eq!(a.data()[n * d + k], cls.data()[k] + pos.data()[n * d + k]);
        }
        assert_ne!(&a.data()[..n * d], &b.data()[..n * d]);
    }

    #[test]
    fn hemisphere_shape_checked() {
        let cfg = micro();
        let m = SimModel::new(cfg, 2).unwrap();
        let (l, _) = hemis(&cfg, 3);
        let bad = Tensor::zeros([11, 6, 4]);
        assert!(matches!(m.predict(&l, &bad), Err(ModelError::Shape(_))));
    }

    #[test]
    fn head_bias_alone_sets_output() {
        let cfg = micro();
        let mut m = SimModel::new(cfg, 4).unwrap();
        m.set("head.weight", Tensor::zeros([64, 1])).unwrap();
        m.set("head.bias", Tensor::from_slice(&[1.75])).unwrap();
        for seed in 0..3 {
            let (l, r) = hemis(&cfg, seed);
            assert_eq!(m.predict(&l, &r).unwrap(), vec![1.75]);
        }
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let cfg = micro();
        let m = SimModel::new(cfg, 5).unwrap();
        let (l, r) = hemis(&cfg, 6);
        let a = m.predict(&l, &r).unwrap();
        assert_eq!(a, m.predict(&l, &r).unwrap());
        let (n, w) = (cfg.seq_patches, cfg.patch_dim());
        let mut perm = l.data().to_vec();
        let rows: Vec<usize> = (0..n).rev().collect();
        for (dst, &src) in rows.iter().enumerate() {
            perm[dst * w..(dst + 1) * w].copy_from_slice(&l.data()[src * w..(src + 1) * w]);
        }
        let lp = Tensor::new(l.shape().to_vec(), perm).unwrap();
        assert_ne!(a, m.predict(&lp, &r).unwrap());
    }

    #[test]
    fn recompute_matches_plain_gradients() {
        let cfg = micro().truncated(5);
        let m = SimModel::new(cfg, 7).unwrap();
        let (l, r) = hemis(&cfg, 8);
        let grads = |recompute: bool| {
            let tape = Tape::new();
            let g = &tape;
            let nodes = m.bind(&g);
            let y = forward(
                &g,
                &m,
                &nodes,
                &g.constant(l.clone()),
                &g.constant(r.clone()),
                ForwardOptions { recompute },
            )
            .unwrap();
            let loss = g.mse(&y, &g.constant(Tensor::from_slice(&[0.3]))).unwrap();
            let gr = tape.backward(loss).unwrap();
            nodes.iter().map(|v| gr.get(v).cloned()).collect::<Vec<_>>()
        };
        let a = grads(false);
        let b = grads(true);
        for (x, y) in a.iter().zip(&b) {
            let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
            assert!(
                x.max_abs_diff(y).unwrap()
                    <= 1e-14 * (1.0 + x.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
            );
        }
    }

    #[test]
    fn ar_predictions_ignore_future_patches() {
        let cfg = micro();
        let mut m = SimModel::new(cfg, 9).unwrap();
        m.attach_decoder(10);
        let (l, r) = hemis(&cfg, 11);
        let base = m.ar_predict(&l, &r).unwrap();
        assert_eq!(base.shape(), &[24, cfg.patch_dim()]);
        let w = cfg.patch_dim();
        for t in [0usize, 5, 12, 20] {
            // perturb every patch after t (sequence order is left then right)
            let mut l2 = l.clone();
            let mut r2 = r.clone();
            for p in t + 1..24 {
                let (h, i) = if p < 12 {
                    (&mut l2, p)
                } else {
                    (&mut r2, p - 12)
                };
                for v in &mut h.data_mut()[i * w..(i + 1) * w] {
                    *v += 0.5;
                }
            }
            let out = m.ar_predict(&l2, &r2).unwrap();
            assert_eq!(&out.data()[..(t + 1) * w], &base.data()[..(t + 1) * w]);
            if t < 23 {
                assert_ne!(&out.data()[(t + 1) * w..], &base.data()[(t + 1) * w..]);
            }
        }
    }

    #[test]
    fn ar_needs_decoder() {
        let cfg = micro();
        let m = SimModel::new(cfg, 9).unwrap();
        let (l, r) = hemis(&cfg, 1);
        assert!(matches!(m.ar_predict(&l, &r), Err(ModelError::Config(_))));
    }

    use std::sync::Arc;
}
