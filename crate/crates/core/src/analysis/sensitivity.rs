use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};
use crate::data::{BASE_VERTICES, HEMISPHERES};
use crate::geometry::PatchSet;
use crate::model::SimModel;
use crate::tensor::Tensor;
use crate::training::{LabelStats, Sample};

/// Cortical feature channels, in storage order.
pub const DEFAULT_CHANNEL_NAMES: [&str; 4] = ["curvature", "sulc", "thickness", "myelin"];

/// What gets zeroed at a vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    All,
    Channel(usize),
}

impl Mode {
    /// `all`, a channel name, or `c<k>` / a bare index.
    pub fn parse(s: &str, channel_names: &[String]) -> Result<Mode> {
        if s == "all" {
            return Ok(Mode::All);
        }
        if let Some(k) = channel_names.iter().position(|n| n == s) {
            return Ok(Mode::Channel(k));
        }
        let idx = s.strip_prefix('c').unwrap_or(s);
        match idx.parse::<usize>() {
            Ok(k) if k < channel_names.len() => Ok(Mode::Channel(k)),
            _ => Err(AnalysisError::Invalid(format!(
                "unknown sensitivity mode {s:?}; expected all or one of {channel_names:?}"
            ))),
        }
    }

    pub fn name(&self, channel_names: &[String]) -> String {
        match *self {
            Mode::All => "all".into(),
            Mode::Channel(k) => channel_names
                .get(k)
                .cloned()
                .unwrap_or_else(|| format!("c{k}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOptions {
    pub modes: Vec<Mode>,
    /// Evaluate every `vertex_stride`-th base vertex.
    pub vertex_stride: usize,
    pub hemispheres: Vec<usize>,
    pub channel_names: Vec<String>,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            modes: vec![Mode::All],
            vertex_stride: 1,
            hemispheres: (0..HEMISPHERES).collect(),
            channel_names: DEFAULT_CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub vertex_index: u32,
    pub hemisphere: usize,
    pub mode: String,
    /// Nullified test MAE minus baseline test MAE, label units.
    pub delta: f64,
    pub zscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub baseline_mae: f64,
    pub subjects: usize,
    pub entries: Vec<SensitivityEntry>,
}

impl SensitivityMap {
    pub fn for_mode<'a>(&'a self, mode: &'a str) -> impl Iterator<Item = &'a SensitivityEntry> + 'a {
        self.entries.iter().filter(move |e| e.mode == mode)
    }
}

/// For every base vertex, the `(patch, slot)` positions it occupies among the
/// first `keep` patches.
pub fn vertex_slots(patches: &PatchSet, keep: usize) -> Vec<Vec<(u32, u32)>> {
    let mut out = vec![Vec::new(); BASE_VERTICES];
    for (p, verts) in patches.patch_vertex_indices.iter().take(keep).enumerate() {
        for (s, &v) in verts.iter().enumerate() {
            if let Some(list) = out.get_mut(v as usize) {
                list.push((p as u32, s as u32));
            }
        }
    }
    out
}

/// Zero the selected channel(s) at every listed slot of a `[n, V, C]` tensor.
pub fn nullify_vertex(x: &mut Tensor, slots: &[(u32, u32)], mode: Mode) {
    let (v, c) = (x.shape()[1], x.shape()[2]);
    let data = x.data_mut();
    for &(p, s) in slots {
        let base = (p as usize * v + s as usize) * c;
        match mode {
            Mode::All => data[base..base + c].fill(0.0),
            Mode::Channel(k) => data[base + k] = 0.0,
        }
    }
}

/// Population z-score; a constant input maps to all zeros.
pub fn zscore_in_place(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    } else {
        log::warn!("sensitivity deltas are constant; z-scores set to 0");
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn ranking_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(AnalysisError::Invalid("AUC needs both classes".into()));
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positives {
        let below = neg.partition_point(|&x| x < p);
        let tied = neg[below..].partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * tied as f64;
    }
    Ok(wins / (positives.len() * neg.len()) as f64)
}

/// Test MAE in label units; callers pass subjects in id order.
fn mae(model: &SimModel, subjects: &[(&Sample, Tensor, Tensor)], label: &LabelStats) -> Result<f64> {
    let mut total = 0.0;
    for (s, l, r) in subjects {
        let y = model.predict(l, r)?[0];
        let e = (label.mean + label.std * y - s.label).abs();
        if !e.is_finite() {
            return Err(AnalysisError::BadModel(format!("non-finite prediction for {}", s.id)));
        }
        total += e;
    }
    Ok(total / subjects.len() as f64)
}

/// Nullify each selected vertex in turn and record the change in test MAE.
/// Each (vertex, hemisphere, mode) gets its own forward passes; deltas are
/// z-scored across vertices within each mode.
pub fn sensitivity_analysis(
    model: &SimModel,
    test: &[Sample],
    patches: &PatchSet,
    label: &LabelStats,
    opts: &SensitivityOptions,
) -> Result<SensitivityMap> {
    if test.is_empty() {
        return Err(AnalysisError::Invalid("empty test set".into()));
    }
    if opts.vertex_stride == 0 || opts.modes.is_empty() {
        return Err(AnalysisError::Invalid("need vertex_stride >= 1 and at least one mode".into()));
    }
    if !model.all_finite() {
        return Err(AnalysisError::BadModel("parameters contain NaN or infinity".into()));
    }
    let cfg = &model.config;
    if patches.vertices_per_patch != cfg.vertices_per_patch() || patches.num_patches != cfg.num_patches() {
        return Err(AnalysisError::Invalid(format!(
            "patch set has order {}, model expects {}",
            patches.patch_order, cfg.patch_order
        )));
    }
    for m in &opts.modes {
        if let Mode::Channel(k) = m {
            if *k >= cfg.channels {
                return Err(AnalysisError::Invalid(format!("channel {k} out of range")));
            }
        }
    }
    if let Some(h) = opts.hemispheres.iter().find(|&&h| h >= HEMISPHERES) {
        return Err(AnalysisError::Invalid(format!("hemisphere {h} out of range")));
    }

    let mut sorted: Vec<&Sample> = test.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let base: Vec<(&Sample, Tensor, Tensor)> =
        sorted.iter().map(|s| (*s, s.left.clone(), s.right.clone())).collect();
    let baseline = mae(model, &base, label)?;

    let slots = vertex_slots(patches, cfg.seq_patches);
    let vertices: Vec<u32> = (0..BASE_VERTICES as u32).step_by(opts.vertex_stride).collect();
    let mut entries = Vec::new();
    for &mode in &opts.modes {
        let jobs: Vec<(usize, u32)> = opts
            .hemispheres
            .iter()
            .flat_map(|&h| vertices.iter().map(move |&v| (h, v)))
            .collect();
        let deltas: Vec<f64> = jobs
            .par_iter()
            .map(|&(h, v)| {
                let sl = &slots[v as usize];
                if sl.is_empty() {
                    return Ok(0.0);
                }
                let nulled: Vec<(&Sample, Tensor, Tensor)> = base
                    .iter()
                    .map(|(s, l, r)| {
                        let (mut l, mut r) = (l.clone(), r.clone());
                        nullify_vertex(if h == 0 { &mut l } else { &mut r }, sl, mode);
                        (*s, l, r)
                    })
                    .collect();
                Ok(mae(model, &nulled, label)? - baseline)
            })
            .collect::<Result<_>>()?;
        let mut z = deltas.clone();
        zscore_in_place(&mut z);
        let name = mode.name(&opts.channel_names);
        for (((h, v), d), z) in jobs.into_iter().zip(deltas).zip(z) {
            entries.push(SensitivityEntry {
                vertex_index: v,
                hemisphere: h,
                mode: name.clone(),
                delta: d,
                zscore: z,
            });
        }
    }
    Ok(SensitivityMap {
        baseline_mae: baseline,
        subjects: test.len(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{extract_patches, make_icosphere};
    use crate::model::{ModelConfig, Variant};
    use rand::{Rng, SeedableRng};

    fn setup(keep: usize) -> (SimModel, Vec<Sample>, PatchSet, LabelStats) {
        let mesh = make_icosphere(6).unwrap();
        let patches = extract_patches(&mesh, 3).unwrap();
        let cfg = ModelConfig::new(Variant::Micro, 3).truncated(keep);
        let model = SimModel::new(cfg, 4).unwrap();
        let shape = [keep, cfg.vertices_per_patch(), cfg.channels];
        let n: usize = shape.iter().product();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut t = || Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let samples = (0..3)
            .map(|i| Sample {
                id: format!("s{i}"),
                left: t(),
                right: t(),
                target: 0.0,
                label: 40.0 + i as f64,
            })
            .collect();
        let label = LabelStats {
            name: "y".into(),
            mean: 40.0,
            std: 2.0,
        };
        (model, samples, patches, label)
    }

    fn opts(stride: usize) -> SensitivityOptions {
        SensitivityOptions {
            modes: vec![Mode::All, Mode::Channel(1)],
            vertex_stride: stride,
            ..SensitivityOptions::default()
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(ranking_auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(ranking_auc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(ranking_auc(&[0.0], &[1.0, -1.0]).unwrap(), 0.5);
        assert!(ranking_auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn nullify_is_idempotent() {
        let (_, s, patches, _) = setup(4);
        let slots = vertex_slots(&patches, 4);
        let v = patches.patch_vertex_indices[0][0] as usize;
        let mut once = s[0].left.clone();
        nullify_vertex(&mut once, &slots[v], Mode::Channel(2));
        let mut twice = once.clone();
        nullify_vertex(&mut twice, &slots[v], Mode::Channel(2));
        assert_eq!(once, twice);
        assert_ne!(once, s[0].left);
    }

    #[test]
    fn zscores_are_standardized_and_order_free() {
        let (model, mut s, patches, label) = setup(6);
        let a = sensitivity_analysis(&model, &s, &patches, &label, &opts(97)).unwrap();
        for mode in ["all", "sulc"] {
            let z: Vec<f64> = a.for_mode(mode).map(|e| e.zscore).collect();
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let sd = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9, "{mode}: {mean} {sd}");
        }
        assert!(a.entries.iter().any(|e| e.delta != 0.0));
        s.reverse();
        let b = sensitivity_analysis(&model, &s, &patches, &label, &opts(97)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_embedding_rows_give_zero_delta() {
        let (mut model, s, patches, label) = setup(6);
        let keep = 6;
        let slots = vertex_slots(&patches, keep);
        let v = patches.patch_vertex_indices[2][10] as usize;
        let mut w = model.get("patch_embed").unwrap().as_ref().clone();
        let (c, d) = (model.config.channels, model.config.d_model);
        for &(_, slot) in &slots[v] {
            for ch in 0..c {
                let row = slot as usize * c + ch;
                w.data_mut()[row * d..(row + 1) * d].fill(0.0);
            }
        }
        model.set("patch_embed", w).unwrap();
        let rows: Vec<_> = s.iter().map(|x| (x, x.left.clone(), x.right.clone())).collect();
        let base = mae(&model, &rows, &label).unwrap();
        let nulled: Vec<_> = s
            .iter()
            .map(|x| {
                let mut l = x.left.clone();
                nullify_vertex(&mut l, &slots[v], Mode::All);
                (x, l, x.right.clone())
            })
            .collect();
        assert_eq!(mae(&model, &nulled, &label).unwrap() - base, 0.0);
    }

    #[test]
    fn nan_model_is_rejected() {
        let (mut model, s, patches, label) = setup(4);
        let mut w = model.get("head.weight").unwrap().as_ref().clone();
        w.data_mut()[0] = f64::NAN;
        model.set("head.weight", w).unwrap();
        match sensitivity_analysis(&model, &s, &patches, &label, &opts(500)) {
            Err(AnalysisError::BadModel(_)) => {}
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn mode_parsing() {
        let names = SensitivityOptions::default().channel_names;
        assert_eq!(Mode::parse("all", &names).unwrap(), Mode::All);
        assert_eq!(Mode::parse("thickness", &names).unwrap(), Mode::Channel(2));
        assert_eq!(Mode::parse("c3", &names).unwrap(), Mode::Channel(3));
        assert!(Mode::parse("c4", &names).is_err());
        assert!(Mode::parse("depth", &names).is_err());
    }
}
