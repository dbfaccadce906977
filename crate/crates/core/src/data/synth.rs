//! Synthetic cohorts built from low-degree spherical-harmonic mixtures.
//!
//! Each subject draws a latent `s ~ U(0,1)` and its label is
//! `lo + (hi - lo) s`. In the global task the latent sets fixed harmonic
//! coefficients (degree 0, 1 and 2 zonal terms in channels 0, 1 and 2). In
//! the cap task subjects share one random harmonic field and differ only by
//! noise and a smooth bump in channel 0 inside a geodesic cap on the left
//! hemisphere, whose amplitude the latent sets; the label is a function of
//! in-cap values alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sh, DataError, Result, SubjectRecord, BASE_VERTICES, HEMISPHERES};
use crate::geometry::{IcoMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    Global,
    Cap,
}

impl SynthTask {
    pub fn parse(s: &str) -> Option<SynthTask> {
        match s {
            "global" | "pma" => Some(SynthTask::Global),
            "cap" => Some(SynthTask::Cap),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_subjects: usize,
    pub channels: usize,
    pub seed: u64,
    pub task: SynthTask,
    pub max_degree: usize,
    /// Per-vertex Gaussian noise σ.
    pub noise: f64,
    /// Size of the latent's effect on its coefficients.
    pub gain: f64,
    /// Scale of the latent-independent random coefficients, drawn per
    /// subject in the global task and once per cohort in the cap task.
    pub nuisance: f64,
    pub label: String,
    pub label_range: (f64, f64),
    /// Geodesic radius of the cap in radians.
    pub cap_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_subjects: 64,
            channels: 4,
            seed: 0,
            task: SynthTask::Global,
            max_degree: 8,
            noise: 0.1,
            gain: 6.0,
            nuisance: 0.5,
            label: "pma_weeks".into(),
            label_range: (34.0, 45.0),
            cap_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cap {
    pub hemisphere: usize,
    pub channel: usize,
    pub center: Vec3,
    pub radius: f64,
    /// Ico-6 vertices strictly inside the cap.
    pub vertices: Vec<u32>,
}

impl Cap {
    pub fn contains(&self, p: Vec3) -> bool {
        angle(self.center, p) < self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub subject_ids: Vec<String>,
    pub latent: Vec<f64>,
    /// Per subject, the coefficients the latent drives (one per driven
    /// channel in the global task, the bump amplitude in the cap task).
    pub driver_coefficients: Vec<Vec<f64>>,
    pub cap: Option<Cap>,
}

fn angle(a: Vec3, b: Vec3) -> f64 {
    let d = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    d.acos()
}

/// Zonal harmonic driven in each channel of the global task.
const DRIVEN: [(usize, usize); 3] = [(0, 0), (1, 1), (2, 2)];
const CHANNEL_OFFSET: [f64; 4] = [8.0, -3.0, 2.0, 5.0];

fn bump(theta: f64, radius: f64) -> f64 {
    if theta >= radius {
        0.0
    } else {
        let c = (0.5 * std::f64::consts::PI * theta / radius).cos();
        c * c
    }
}

/// Degree-`l` coefficients drawn from `N(0, (nuisance / (1 + l))^2)`.
fn random_coefficients(rng: &mut ChaCha8Rng, cfg: &SynthConfig, nb: usize) -> Vec<f64> {
    let mut coef = vec![0.0; nb];
    for l in 0..=cfg.max_degree {
        let sd = cfg.nuisance / (1.0 + l as f64);
        for m in -(l as i64)..=(l as i64) {
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            coef[sh::index(l, m)] = sd * g;
        }
    }
    coef
}

/// Generate `config.num_subjects` records on the Ico-6 `mesh`.
pub fn synth_generate(mesh: &IcoMesh, config: &SynthConfig) -> Result<(Vec<SubjectRecord>, SynthMeta)> {
    let cfg = config.clone();
    if mesh.vertices.len() != BASE_VERTICES {
        return Err(DataError::Invalid(format!(
            "synthetic data needs the {BASE_VERTICES}-vertex sphere, got {}",
            mesh.vertices.len()
        )));
    }
    if cfg.channels == 0 || cfg.num_subjects == 0 || !(cfg.noise >= 0.0) {
        return Err(DataError::Invalid(
            "synthetic data needs channels > 0, subjects > 0 and noise >= 0".into(),
        ));
    }
    if cfg.task == SynthTask::Cap && !(cfg.cap_radius > 0.0 && cfg.cap_radius < 3.0) {
        return Err(DataError::Invalid("cap radius must lie in (0, 3) rad".into()));
    }
    let nb = sh::basis_len(cfg.max_degree);
    let basis: Vec<f64> = mesh
        .vertices
        .par_iter()
        .flat_map_iter(|&v| sh::eval(cfg.max_degree, v))
        .collect();

    let cap = (cfg.task == SynthTask::Cap).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let z: f64 = rng.gen_range(-0.6..0.6);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        let center = [r * phi.cos(), r * phi.sin(), z];
        let vertices = mesh
            .vertices
            .iter()
            .enumerate()
            .filter(|(_, &p)| angle(center, p) < cfg.cap_radius)
            .map(|(i, _)| i as u32)
            .collect();
        Cap {
            hemisphere: 0,
            channel: 0,
            center,
            radius: cfg.cap_radius,
            vertices,
        }
    });
    let bump_profile: Option<Vec<f64>> = cap.as_ref().map(|c| {
        mesh.vertices
            .iter()
            .map(|&p| bump(angle(c.center, p), c.radius))
            .collect()
    });

    let (lo, hi) = cfg.label_range;
    let c = cfg.channels;
    // cap-task subjects share one harmonic field per hemisphere and channel
    let template: Option<Vec<Vec<f64>>> = (cfg.task == SynthTask::Cap).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX - 1);
        (0..HEMISPHERES * c)
            .map(|_| random_coefficients(&mut rng, &cfg, nb))
            .collect()
    });
    let subjects: Vec<(SubjectRecord, f64, Vec<f64>)> = (0..cfg.num_subjects)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let s: f64 = rng.gen();
            let drive = cfg.gain * (s - 0.5);
            let mut drivers = Vec::new();
            let mut features = vec![0.0; HEMISPHERES * BASE_VERTICES * c];
            let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("σ > 0");
            for h in 0..HEMISPHERES {
                for ch in 0..c {
                    let mut coef = match &template {
                        Some(t) => t[h * c + ch].clone(),
                        None => random_coefficients(&mut rng, &cfg, nb),
                    };
                    coef[0] += CHANNEL_OFFSET[ch % CHANNEL_OFFSET.len()];
                    if cfg.task == SynthTask::Global {
                        if let Some(&(_, l)) = DRIVEN.iter().find(|d| d.0 == ch) {
                            let k = sh::index(l, 0);
                            coef[k] = if k == 0 { CHANNEL_OFFSET[ch] } else { 0.0 } + drive;
                            if h == 0 {
                                drivers.push(coef[k]);
                            }
                        }
                    }
                    let amp = match (&cap, &bump_profile) {
                        (Some(cp), Some(_)) if cp.hemisphere == h && cp.channel == ch => drive,
                        _ => 0.0,
                    };
                    if cfg.task == SynthTask::Cap && h == 0 && ch == 0 {
                        drivers.push(amp);
                    }
                    for v in 0..BASE_VERTICES {
                        let y = &basis[v * nb..(v + 1) * nb];
                        let mut x: f64 = y.iter().zip(&coef).map(|(a, b)| a * b).sum();
                        if amp != 0.0 {
                            x += amp * bump_profile.as_ref().expect("cap")[v];
                        }
                        if cfg.noise > 0.0 {
                            x += noise.sample(&mut rng);
                        }
                        features[(h * BASE_VERTICES + v) * c + ch] = x as f32 as f64;
                    }
                }
            }
            let labels: BTreeMap<String, f64> =
                [(cfg.label.clone(), lo + (hi - lo) * s)].into_iter().collect();
            let rec = SubjectRecord {
                subject_id: format!("sub-{i:04}"),
                channels: c,
                features,
                labels,
            };
            (rec, s, drivers)
        })
        .collect();

    let mut meta = SynthMeta {
        config: cfg,
        subject_ids: Vec::new(),
        latent: Vec::new(),
        driver_coefficients: Vec::new(),
        cap,
    };
    let mut records = Vec::with_capacity(subjects.len());
    for (r, s, d) in subjects {
        meta.subject_ids.push(r.subject_id.clone());
        meta.latent.push(s);
        meta.driver_coefficients.push(d);
        records.push(r);
    }
    Ok((records, meta))
}
