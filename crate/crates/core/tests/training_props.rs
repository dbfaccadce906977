use proptest::prelude::*;
use sphere_ssm::data::{stratified_split, synth_generate, SynthConfig};
use sphere_ssm::geometry::{extract_patches, make_icosphere};
use sphere_ssm::model::{ModelConfig, SimModel, Variant};
use sphere_ssm::tensor::Tensor;
use sphere_ssm::training::{
    ar_eval, evaluate, prepare_dataset, train_ar, train_supervised, AdamW, ArTarget, PreparedData,
    Sample, Schedule, TrainConfig,
};

/// Textbook AdamW, one scalar at a time, with moments kept by the caller.
fn reference_step(
    theta: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    t: i32,
    lr: f64,
    (b1, b2, eps, wd): (f64, f64, f64, f64),
) {
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / (1.0 - b1.powi(t));
        let vhat = v[i] / (1.0 - b2.powi(t));
        theta[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * theta[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adamw_matches_reference(
        init in prop::collection::vec(-3.0f64..3.0, 1..20),
        grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 20), 1..8),
        lr in 1e-5f64..0.5,
        wd in 0.0f64..0.6,
    ) {
        let n = init.len();
        let hp = (0.9, 0.999, 1e-8, wd);
        let mut opt = AdamW::new((hp.0, hp.1), hp.2, hp.3);
        let mut p = vec![Tensor::new([n], init.clone()).unwrap()];
        let (mut th, mut m, mut v) = (init.clone(), vec![0.0; n], vec![0.0; n]);
        for (t, g) in grads.iter().enumerate() {
            let g = &g[..n];
            opt.step(&mut p, &[Tensor::new([n], g.to_vec()).unwrap()], &[], lr).unwrap();
            reference_step(&mut th, &mut m, &mut v, g, t as i32 + 1, lr, hp);
        }
        for (a, b) in p[0].data().iter().zip(&th) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

fn cohort(n: usize, seed: u64, keep: usize) -> (PreparedData, ModelConfig) {
    let mesh = make_icosphere(6).unwrap();
    let patches = extract_patches(&mesh, 2).unwrap();
    let (recs, _) = synth_generate(
        &mesh,
        &SynthConfig {
            num_subjects: n,
            seed,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let split = stratified_split(&recs, "pma_weeks", 1.0, [8.0, 1.0, 1.0], seed).unwrap();
    let data = prepare_dataset(&recs, &split, &patches, keep).unwrap();
    (data, ModelConfig::new(Variant::Micro, 2).truncated(keep))
}

fn ar_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr: 1e-3,
        schedule: Schedule::Cosine,
        step_size: None,
        gamma: None,
        warmup_epochs: 10,
        weight_decay: 1e-4,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn ar_pretraining_reduces_loss_by_thirty_percent() {
    let (data, cfg) = cohort(20, 1, 6);
    let train: Vec<Sample> = data.all().take(16).cloned().collect();
    let model = SimModel::new(cfg, 5).unwrap();
    let out = train_ar(model, &train, &[], &ar_config(200), &ArTarget::NextPatch).unwrap();
    let drop = 1.0 - out.final_loss / out.initial_loss;
    assert!(drop >= 0.3, "initial {} final {} drop {drop}", out.initial_loss, out.final_loss);
}

#[test]
fn constant_subject_is_fit_exactly() {
    let cfg = ModelConfig::new(Variant::Micro, 2).truncated(4);
    let shape = [4, cfg.vertices_per_patch(), cfg.channels];
    let n: usize = shape.iter().product();
    let s = Sample {
        id: "const".into(),
        left: Tensor::new(shape, vec![0.7; n]).unwrap(),
        right: Tensor::new(shape, vec![0.7; n]).unwrap(),
        target: 0.0,
        label: f64::NAN,
    };
    let model = SimModel::new(cfg, 1).unwrap();
    let out = train_ar(model, &[s], &[], &ar_config(150), &ArTarget::NextPatch).unwrap();
    assert!(out.final_loss < 1e-3, "{} -> {}", out.initial_loss, out.final_loss);
}

#[test]
fn next_patch_targets_beat_shuffled_control() {
    let (data, cfg) = cohort(20, 2, 6);
    let all: Vec<Sample> = data.all().cloned().collect();
    let (train, held) = all.split_at(14);
    let run = |target: ArTarget| {
        let model = SimModel::new(cfg, 8).unwrap();
        let out = train_ar(model, train, &[], &ar_config(60), &target).unwrap();
        ar_eval(&out.model, held).unwrap()
    };
    let real = run(ArTarget::NextPatch);
    let control = run(ArTarget::Permuted(77));
    assert!(real < control, "next-patch {real} vs shuffled {control}");
}

#[test]
fn supervised_training_beats_mean_predictor_at_small_scale() {
    let (data, cfg) = cohort(40, 4, 8);
    let tc = TrainConfig {
        epochs: 40,
        batch_size: 4,
        lr: 1e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let model = SimModel::new(cfg, 2).unwrap();
    let before = evaluate(&model, &data.test, &data.label, "test").unwrap();
    let out = train_supervised(model, &data, &tc).unwrap();
    let mean: f64 = data.train.iter().map(|s| s.label).sum::<f64>() / data.train.len() as f64;
    let baseline: f64 =
        data.test.iter().map(|s| (s.label - mean).abs()).sum::<f64>() / data.test.len() as f64;
    assert!(
        out.test.mae_mean < 0.5 * baseline,
        "test MAE {} (init {}) vs mean predictor {baseline}",
        out.test.mae_mean,
        before.mae_mean
    );
    let again = train_supervised(SimModel::new(cfg, 2).unwrap(), &data, &tc).unwrap();
    let bits = |c: &[sphere_ssm::training::EpochRecord]| -> Vec<u64> {
        c.iter().map(|r| r.train_loss.to_bits()).collect()
    };
    assert_eq!(bits(&out.curves), bits(&again.curves));
}
