//! Subject records, normalization, stratified splitting, file formats and
//! the synthetic spherical-harmonic generator.

pub mod io;
pub mod sh;
pub mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{patch_tensorize, vertex_count, GeometryError, PatchSet, BASE_ORDER};
use crate::tensor::{Tensor, TensorError};

pub use io::{load_manifest, read_simf, require_label, write_dataset, write_simf, MANIFEST_HEADER};
pub use synth::{synth_generate, Cap, SynthConfig, SynthMeta, SynthTask};

/// Vertices of each hemisphere's Ico-6 sphere.
pub const BASE_VERTICES: usize = 40962;
pub const HEMISPHERES: usize = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },
    #[error("{path}: bad magic, not a feature file")]
    BadMagic { path: PathBuf },
    #[error("{path}: shape mismatch: {msg}")]
    ShapeMismatch { path: PathBuf, msg: String },
    #[error("subject {subject}: missing label {label}")]
    MissingLabel { subject: String, label: String },
    #[error("channel {channel} has zero variance on the {split} split")]
    ZeroVariance { channel: usize, split: String },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub channels: usize,
    /// `[2][V][C]`, hemisphere-major then vertex then channel.
    pub features: Vec<f64>,
    pub labels: BTreeMap<String, f64>,
}

impl SubjectRecord {
    pub fn new(
        subject_id: impl Into<String>,
        channels: usize,
        features: Vec<f64>,
        labels: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let want = HEMISPHERES * BASE_VERTICES * channels;
        if channels == 0 || features.len() != want {
            return Err(DataError::Invalid(format!(
                "subject {subject_id}: {} feature values, expected {want}",
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "subject {subject_id}: non-finite feature at flat index {i}"
            )));
        }
        Ok(SubjectRecord {
            subject_id,
            channels,
            features,
            labels,
        })
    }

    pub fn hemisphere(&self, h: usize) -> &[f64] {
        let n = BASE_VERTICES * self.channels;
        &self.features[h * n..(h + 1) * n]
    }

    pub fn label(&self, name: &str) -> Result<f64> {
        match self.labels.get(name) {
            Some(v) if v.is_finite() => Ok(*v),
            _ => Err(DataError::MissingLabel {
                subject: self.subject_id.clone(),
                label: name.into(),
            }),
        }
    }

    /// Both hemispheres as `[N, V, C]` patch tensors, keeping the first
    /// `keep` patches of each.
    pub fn patches(&self, patches: &PatchSet, keep: usize) -> Result<(Tensor, Tensor)> {
        let one = |h: usize| -> Result<Tensor> {
            let t = patch_tensorize(self.hemisphere(h), self.channels, patches)?;
            if keep >= patches.num_patches {
                return Ok(t);
            }
            let w = patches.vertices_per_patch * self.channels;
            let data = t.data()[..keep * w].to_vec();
            Ok(Tensor::new(
                [keep, patches.vertices_per_patch, self.channels],
                data,
            )?)
        };
        Ok((one(0)?, one(1)?))
    }
}

/// Per-channel statistics and the split they were computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fit_split: String,
    pub fit_subjects: Vec<String>,
}

/// Population mean and σ per channel over every vertex, hemisphere and
/// record.
pub fn zscore_fit(records: &[&SubjectRecord], split: &str) -> Result<NormalizationStats> {
    if records.len() < 2 {
        return Err(DataError::Invalid(format!(
            "normalization needs at least 2 records, got {}",
            records.len()
        )));
    }
    let c = records[0].channels;
    if records.iter().any(|r| r.channels != c) {
        return Err(DataError::Invalid("records disagree on channel count".into()));
    }
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for r in records {
        for row in r.features.chunks_exact(c) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        count += r.features.len() / c;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut ss = vec![0.0; c];
    for r in records {
        for row in r.features.chunks_exact(c) {
            for k in 0..c {
                let d = row[k] - mean[k];
                ss[k] += d * d;
            }
        }
    }
    let mut std = Vec::with_capacity(c);
    for (k, s) in ss.iter().enumerate() {
        let sd = (s / count as f64).sqrt();
        if !(sd > 0.0) {
            return Err(DataError::ZeroVariance {
                channel: k,
                split: split.into(),
            });
        }
        std.push(sd);
    }
    Ok(NormalizationStats {
        mean,
        std,
        fit_split: split.into(),
        fit_subjects: records.iter().map(|r| r.subject_id.clone()).collect(),
    })
}

pub fn zscore_apply(record: &SubjectRecord, stats: &NormalizationStats) -> Result<SubjectRecord> {
    let c = record.channels;
    if stats.mean.len() != c {
        return Err(DataError::Invalid(format!(
            "stats have {} channels, record {} has {c}",
            stats.mean.len(),
            record.subject_id
        )));
    }
    let mut out = record.clone();
    for row in out.features.chunks_exact_mut(c) {
        for k in 0..c {
            row[k] = (row[k] - stats.mean[k]) / stats.std[k];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub label: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub bin_edges: Vec<f64>,
    /// Records without the label, left out of every split.
    pub excluded: Vec<String>,
}

/// Split `counts` proportionally to `ratios` by largest remainder; equal
/// remainders are ordered by `tie`.
fn apportion(n: usize, ratios: [f64; 3], tie: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let quota: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut out = [0usize; 3];
    for k in 0..3 {
        out[k] = quota[k].floor() as usize;
    }
    let mut left = n - out.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quota[a] - quota[a].floor(), quota[b] - quota[b].floor());
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(tie[a].partial_cmp(&tie[b]).unwrap_or(std::cmp::Ordering::Equal))
    });
    for k in order {
        if left == 0 {
            break;
        }
        out[k] += 1;
        left -= 1;
    }
    out
}

/// Bins of width `bin_width` from the smallest label; within each bin a
/// seeded shuffle, then train/val/test counts by largest remainder.
pub fn stratified_split(
    records: &[SubjectRecord],
    label: &str,
    bin_width: f64,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    if !(bin_width > 0.0) || ratios.iter().any(|r| !(*r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0
    {
        return Err(DataError::Invalid(
            "bin width and ratio sum must be positive".into(),
        ));
    }
    let mut excluded = Vec::new();
    let mut labelled = Vec::new();
    for r in records {
        match r.label(label) {
            Ok(y) => labelled.push((r.subject_id.clone(), y)),
            Err(_) => {
                log::warn!("subject {} has no {label}; excluded from splits", r.subject_id);
                excluded.push(r.subject_id.clone());
            }
        }
    }
    if labelled.is_empty() {
        return Err(DataError::Empty);
    }
    let lo = labelled.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let bin_of = |y: f64| ((y - lo) / bin_width).floor() as usize;
    let nbins = labelled.iter().map(|x| bin_of(x.1)).max().unwrap_or(0) + 1;
    let mut bins: Vec<Vec<String>> = vec![Vec::new(); nbins];
    for (id, y) in &labelled {
        bins[bin_of(*y)].push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        label: label.into(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        bin_edges: (0..=nbins).map(|k| lo + k as f64 * bin_width).collect(),
        excluded,
    };
    for bin in &mut bins {
        bin.shuffle(&mut rng);
        let tie = [rng.gen(), rng.gen(), rng.gen()];
        let [a, b, _] = apportion(bin.len(), ratios, tie);
        split.train.extend_from_slice(&bin[..a]);
        split.val.extend_from_slice(&bin[a..a + b]);
        split.test.extend_from_slice(&bin[a + b..]);
    }
    Ok(split)
}

/// Ico-6 vertex count check shared by the file readers.
pub(crate) fn expected_vertices() -> usize {
    vertex_count(BASE_ORDER)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, fill: impl Fn(usize) -> f64, label: Option<f64>) -> SubjectRecord {
        let n = HEMISPHERES * BASE_VERTICES * 2;
        let mut labels = BTreeMap::new();
        if let Some(y) = label {
            labels.insert("pma_weeks".to_string(), y);
        }
        SubjectRecord::new(id, 2, (0..n).map(fill).collect(), labels).unwrap()
    }

    #[test]
    fn zscore_three_values() {
        // channel 0 takes the values 1, 2, 3 in equal proportion
        let a = record("a", |i| ((i / 2) % 3) as f64 + 1.0, None);
        let b = record("b", |i| ((i / 2 + 1) % 3) as f64 + 1.0 + (i % 2) as f64, None);
        let st = zscore_fit(&[&a, &a], "train").unwrap();
        assert_eq!(st.fit_split, "train");
        assert!((st.mean[0] - 2.0).abs() < 1e-12);
        assert!((st.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-9);
        let z = zscore_apply(&a, &st).unwrap();
        assert!((z.features[0] + 1.224_744_871).abs() < 1e-6);
        assert!((z.features[2]).abs() < 1e-12);
        assert!((z.features[4] - 1.224_744_871).abs() < 1e-6);
        let st2 = zscore_fit(&[&a, &b], "train").unwrap();
        let zs: Vec<SubjectRecord> = [&a, &b].iter().map(|r| zscore_apply(r, &st2).unwrap()).collect();
        let again = zscore_fit(&[&zs[0], &zs[1]], "train").unwrap();
        for k in 0..2 {
            assert!(again.mean[k].abs() < 1e-10);
            assert!((again.std[k] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_variance_names_channel() {
        let a = record("a", |i| if i % 2 == 1 { 5.0 } else { i as f64 }, None);
        match zscore_fit(&[&a, &a], "train") {
            Err(DataError::ZeroVariance { channel: 1, .. }) => {}
            r => panic!("{r:?}"),
        }
        assert!(zscore_fit(&[&a], "train").is_err());
    }

    fn labelled(n: usize, label: impl Fn(usize) -> f64) -> Vec<SubjectRecord> {
        (0..n)
            .map(|i| SubjectRecord {
                subject_id: format!("s{i:04}"),
                channels: 1,
                features: Vec::new(),
                labels: [("pma_weeks".to_string(), label(i))].into_iter().collect(),
            })
            .collect()
    }

    #[test]
    fn single_bin_proportions() {
        for (n, want) in [(20, (16, 2, 2)), (10, (8, 1, 1))] {
            let s = stratified_split(&labelled(n, |_| 40.2), "pma_weeks", 1.0, [8.0, 1.0, 1.0], 3)
                .unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), want);
        }
    }

    #[test]
    fn missing_labels_are_excluded() {
        let mut recs = labelled(12, |i| 34.0 + i as f64 * 0.5);
        recs[3].labels.clear();
        let s = stratified_split(&recs, "pma_weeks", 1.0, [8.0, 1.0, 1.0], 0).unwrap();
        assert_eq!(s.excluded, vec!["s0003".to_string()]);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 11);
        assert!(matches!(
            stratified_split(&[], "pma_weeks", 1.0, [8.0, 1.0, 1.0], 0),
            Err(DataError::Empty)
        ));
    }

    #[test]
    fn split_is_deterministic() {
        let recs = labelled(100, |i| 34.0 + (i * 7 % 11) as f64);
        let a = stratified_split(&recs, "pma_weeks", 1.0, [8.0, 1.0, 1.0], 5).unwrap();
        let b = stratified_split(&recs, "pma_weeks", 1.0, [8.0, 1.0, 1.0], 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(20, [8.0, 1.0, 1.0], [0.0, 0.1, 0.2]), [16, 2, 2]);
        assert_eq!(apportion(3, [8.0, 1.0, 1.0], [0.0, 0.1, 0.2]), [3, 0, 0]);
        assert_eq!(apportion(5, [8.0, 1.0, 1.0], [0.5, 0.9, 0.1]), [4, 0, 1]);
    }
}
