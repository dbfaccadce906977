use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};
use sphere_ssm::analysis::{
    bench_blocks, emit_report, ranking_auc, sensitivity_analysis, Mode, ReportSet, SensitivityMap,
    SensitivityOptions,
};
use sphere_ssm::data::{
    load_manifest, stratified_split, synth_generate, write_dataset, DatasetSplit, NormalizationStats,
    SubjectRecord, SynthMeta,
};
use sphere_ssm::geometry::{extract_patches, make_icosphere, PatchSet, BASE_ORDER};
use sphere_ssm::model::{is_backbone, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, SimModel};
use sphere_ssm::training::{
    evaluate, make_samples, prepare_dataset, train_ar, train_supervised, ArTarget, LabelStats, MetricReport,
    Sample,
};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SYNTH_META_FILE: &str = "synth_meta.json";

/// What one subcommand produced, for `run.json`.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Map<String, Value>,
    pub results: Map<String, Value>,
}

impl Outcome {
    fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), json!(path.display().to_string()));
    }

    fn result(&mut self, name: &str, v: impl Serialize) {
        self.results
            .insert(name.into(), serde_json::to_value(v).expect("result serializes"));
    }
}

pub fn write_json_file(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn patch_set(order: usize) -> Result<PatchSet, CliError> {
    let mesh = make_icosphere(BASE_ORDER)?;
    Ok(extract_patches(&mesh, order)?)
}

fn model_config(cfg: &RunConfig, channels: usize) -> Result<ModelConfig, CliError> {
    let mut mc = ModelConfig::new(cfg.model.variant, cfg.model.patch_order);
    mc.channels = channels;
    mc.decoder = cfg.model.decoder;
    if let Some(n) = cfg.model.seq_patches {
        mc = mc.truncated(n);
    }
    mc.validate()?;
    Ok(mc)
}

fn load_records(manifest: &Path) -> Result<Vec<SubjectRecord>, CliError> {
    let recs = load_manifest(manifest)?;
    if recs.is_empty() {
        return Err(CliError::data(format!("{}: no subjects", manifest.display())));
    }
    Ok(recs)
}

/// Everything a later stage needs to rebuild the same inputs.
fn checkpoint_metadata(
    kind: &str,
    split: &DatasetSplit,
    norm: &NormalizationStats,
    label: &LabelStats,
    cfg: &RunConfig,
) -> Value {
    json!({
        "kind": kind,
        "split": split,
        "norm": norm,
        "label": label,
        "run_config": cfg,
    })
}

fn meta_field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T, CliError> {
    serde_json::from_value(ck.metadata[key].clone())
        .map_err(|e| CliError::data(format!("checkpoint metadata {key:?}: {e}")))
}

/// Kind recorded by `train`/`pretrain`/`finetune` ("supervised" or "ar").
pub fn checkpoint_kind(ck: &Checkpoint) -> Option<&str> {
    ck.metadata.get("kind").and_then(Value::as_str)
}

fn mean_predictor_mae(train: &[Sample], test: &[Sample]) -> f64 {
    let m = train.iter().map(|s| s.label).sum::<f64>() / train.len().max(1) as f64;
    test.iter().map(|s| (s.label - m).abs()).sum::<f64>() / test.len().max(1) as f64
}

pub fn mesh(order: usize, out: &Path) -> Result<Outcome, CliError> {
    let m = make_icosphere(order)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    m.save_json(out)?;
    let mut o = Outcome::default();
    o.output("mesh", out);
    o.result("order", order);
    o.result("vertices", m.vertices.len());
    o.result("faces", m.faces.len());
    Ok(o)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let mesh = make_icosphere(BASE_ORDER)?;
    let (records, meta) = synth_generate(&mesh, &cfg.synth)?;
    let manifest = write_dataset(out, &records)?;
    let meta_path = out.join(SYNTH_META_FILE);
    write_json_file(&meta_path, &meta)?;
    let mut o = Outcome::default();
    o.output("manifest", &manifest);
    o.output("synth_meta", &meta_path);
    o.result("subjects", records.len());
    o.result("task", cfg.synth.task);
    if let Some(cap) = &meta.cap {
        o.result("cap_vertices", cap.vertices.len());
    }
    Ok(o)
}

fn supervised_reports(
    out: &Path,
    val: &MetricReport,
    test: &MetricReport,
    o: &mut Outcome,
) -> Result<(), CliError> {
    let files = emit_report(
        &ReportSet {
            metrics: vec![val.clone(), test.clone()],
            ..ReportSet::default()
        },
        out,
    )?;
    let test_json = out.join("test_metrics.json");
    test.write_json(&test_json)?;
    let curves = out.join("curves.csv");
    test.write_curves_csv(&curves)?;
    o.output("summary", &files.summary);
    o.output("metrics_csv", &files.metrics_csv);
    o.output("test_metrics", &test_json);
    o.output("curves", &curves);
    o.result("test_mae", test.mae_mean);
    o.result("val_mae", val.mae_mean);
    Ok(())
}

pub fn train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Outcome, CliError> {
    create_dir(out)?;
    let records = load_records(manifest)?;
    let split = stratified_split(&records, &cfg.data.label, cfg.data.bin_width, cfg.data.ratios, cfg.seed)?;
    let mc = model_config(cfg, records[0].channels)?;
    let patches = patch_set(mc.patch_order)?;
    let data = prepare_dataset(&records, &split, &patches, mc.seq_patches)?;
    let model = SimModel::new(mc, cfg.train.seed)?;
    let outcome = train_supervised(model, &data, &cfg.train)?;

    let ck = out.join(CHECKPOINT_FILE);
    save_checkpoint(
        &ck,
        &outcome.model,
        checkpoint_metadata("supervised", &split, &data.norm, &data.label, cfg),
    )?;
    let mut o = Outcome::default();
    o.output("checkpoint", &ck);
    supervised_reports(out, &outcome.val, &outcome.test, &mut o)?;
    o.result("best_epoch", outcome.best_epoch);
    o.result("mean_predictor_test_mae", mean_predictor_mae(&data.train, &data.test));
    Ok(o)
}

pub fn pretrain(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Outcome, CliError> {
    create_dir(out)?;
    let records = load_records(manifest)?;
    let split = stratified_split(&records, &cfg.data.label, cfg.data.bin_width, cfg.data.ratios, cfg.seed)?;
    let mc = model_config(cfg, records[0].channels)?;
    let patches = patch_set(mc.patch_order)?;
    let data = prepare_dataset(&records, &split, &patches, mc.seq_patches)?;
    let model = SimModel::new(mc, cfg.train.seed)?;
    let ar = train_ar(model, &data.train, &data.val, &cfg.train, &ArTarget::NextPatch)?;

    let ck = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ck, &ar.model, checkpoint_metadata("ar", &split, &data.norm, &data.label, cfg))?;
    let drop = 1.0 - ar.final_loss / ar.initial_loss;
    let report = out.join("ar.json");
    write_json_file(
        &report,
        &json!({
            "initial_loss": ar.initial_loss,
            "final_loss": ar.final_loss,
            "relative_drop": drop,
            "curves": ar.curves,
        }),
    )?;
    let mut o = Outcome::default();
    o.output("checkpoint", &ck);
    o.output("ar_report", &report);
    o.result("initial_loss", ar.initial_loss);
    o.result("final_loss", ar.final_loss);
    o.result("relative_drop", drop);
    Ok(o)
}

/// Count backbone tensors of `model` that are bit-equal to their source in
/// `ck` (the forward twin for backward-scan tensors when mirrored).
pub fn backbone_matches(model: &SimModel, ck: &Checkpoint, mirror: bool) -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut differ = Vec::new();
    for p in model.params().iter().filter(|p| is_backbone(&p.name)) {
        let src = if mirror { p.name.replace(".bwd.", ".fwd.") } else { p.name.clone() };
        checked += 1;
        let same = ck.get(&src).is_some_and(|t| {
            t.shape() == p.value.shape()
                && t.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if !same {
            differ.push(p.name.clone());
        }
    }
    (checked, differ)
}

pub fn finetune(cfg: &RunConfig, ck_path: &Path, manifest: &Path, out: &Path) -> Result<Outcome, CliError> {
    create_dir(out)?;
    let ck = load_checkpoint(ck_path)?;
    let split: DatasetSplit = meta_field(&ck, "split")?;
    let records = load_records(manifest)?;
    let patches = patch_set(ck.config.patch_order)?;
    let data = prepare_dataset(&records, &split, &patches, ck.config.seq_patches)?;

    let mirror = cfg.model.mirror_forward.unwrap_or(checkpoint_kind(&ck) == Some("ar"));
    let mut model = SimModel::new(ck.config, cfg.train.seed)?;
    model.load_backbone(&ck, mirror)?;
    let (checked, differ) = backbone_matches(&model, &ck, mirror);
    if !differ.is_empty() {
        return Err(CliError::data(format!("backbone tensors not loaded: {differ:?}")));
    }
    log::info!("loaded {checked} backbone tensors bit-equal from {}", ck_path.display());

    let outcome = train_supervised(model, &data, &cfg.train)?;
    let new_ck = out.join(CHECKPOINT_FILE);
    save_checkpoint(
        &new_ck,
        &outcome.model,
        checkpoint_metadata("supervised", &split, &data.norm, &data.label, cfg),
    )?;
    let mut o = Outcome::default();
    o.output("checkpoint", &new_ck);
    supervised_reports(out, &outcome.val, &outcome.test, &mut o)?;
    o.result(
        "backbone",
        json!({
            "source": ck_path.display().to_string(),
            "source_kind": checkpoint_kind(&ck),
            "tensors_bit_equal": checked,
            "mirror_forward": mirror,
        }),
    );
    o.result("best_epoch", outcome.best_epoch);
    o.result("mean_predictor_test_mae", mean_predictor_mae(&data.train, &data.test));
    Ok(o)
}

/// Model, label moments and normalized samples of one split, rebuilt from a
/// trained checkpoint.
fn checkpoint_split(
    ck_path: &Path,
    manifest: &Path,
    which: &str,
) -> Result<(SimModel, LabelStats, PatchSet, Vec<Sample>), CliError> {
    let ck = load_checkpoint(ck_path)?;
    if checkpoint_kind(&ck) != Some("supervised") {
        log::warn!("{} is not a supervised checkpoint; its head is untrained", ck_path.display());
    }
    let model = SimModel::from_checkpoint(&ck)?;
    let split: DatasetSplit = meta_field(&ck, "split")?;
    let norm: NormalizationStats = meta_field(&ck, "norm")?;
    let label: LabelStats = meta_field(&ck, "label")?;
    let ids = match which {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        _ => return Err(CliError::usage(format!("unknown split {which:?}; use train, val or test"))),
    };
    let records = load_records(manifest)?;
    let picked: Vec<&SubjectRecord> = ids
        .iter()
        .map(|id| {
            records
                .iter()
                .find(|r| &r.subject_id == id)
                .ok_or_else(|| CliError::data(format!("subject {id} from the checkpoint split is not in the manifest")))
        })
        .collect::<Result<_, _>>()?;
    let patches = patch_set(ck.config.patch_order)?;
    let samples = make_samples(&picked, &norm, &patches, ck.config.seq_patches, Some(&label))?;
    Ok((model, label, patches, samples))
}

pub fn eval(ck_path: &Path, manifest: &Path, out: &Path, which: &str) -> Result<Outcome, CliError> {
    create_dir(out)?;
    let (model, label, _, samples) = checkpoint_split(ck_path, manifest, which)?;
    if samples.is_empty() {
        return Err(CliError::data(format!("the {which} split is empty")));
    }
    let report = evaluate(&model, &samples, &label, which)?;
    let files = emit_report(
        &ReportSet {
            metrics: vec![report.clone()],
            ..ReportSet::default()
        },
        out,
    )?;
    let path = out.join("metric_report.json");
    report.write_json(&path)?;
    let mut o = Outcome::default();
    o.output("metric_report", &path);
    o.output("summary", &files.summary);
    o.output("metrics_csv", &files.metrics_csv);
    o.result("split", which);
    o.result("n", report.len());
    o.result("mae", report.mae_mean);
    o.result("mse", report.mse_mean);
    Ok(o)
}

/// Ranking AUC of in-cap vertices over the rest, per mode.
fn cap_auc(map: &SensitivityMap, meta: &SynthMeta) -> Option<Vec<(String, f64)>> {
    let cap = meta.cap.as_ref()?;
    let inside: HashSet<u32> = cap.vertices.iter().copied().collect();
    let mut modes: Vec<&str> = map.entries.iter().map(|e| e.mode.as_str()).collect();
    modes.dedup();
    let mut out = Vec::new();
    for m in modes {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for e in map.for_mode(m) {
            if e.hemisphere == cap.hemisphere && inside.contains(&e.vertex_index) {
                pos.push(e.zscore);
            } else {
                neg.push(e.zscore);
            }
        }
        if let Ok(a) = ranking_auc(&pos, &neg) {
            out.push((m.to_string(), a));
        }
    }
    Some(out)
}

pub fn sensitivity(cfg: &RunConfig, ck_path: &Path, manifest: &Path, out: &Path) -> Result<Outcome, CliError> {
    create_dir(out)?;
    let (model, label, patches, test) = checkpoint_split(ck_path, manifest, "test")?;
    let s = &cfg.sensitivity;
    let modes = s
        .modes
        .iter()
        .map(|m| Mode::parse(m, &s.channel_names))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = SensitivityOptions {
        modes,
        vertex_stride: s.vertex_stride,
        hemispheres: s.hemispheres.clone(),
        channel_names: s.channel_names.clone(),
    };
    let map = sensitivity_analysis(&model, &test, &patches, &label, &opts)?;
    let files = emit_report(
        &ReportSet {
            sensitivity: Some(map.clone()),
            ..ReportSet::default()
        },
        out,
    )?;
    let mut o = Outcome::default();
    o.output("sensitivity_csv", &files.sensitivity_csv);
    o.output("summary", &files.summary);
    o.result("baseline_mae", map.baseline_mae);
    o.result("entries", map.entries.len());
    let meta_path: PathBuf = manifest.with_file_name(SYNTH_META_FILE);
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| CliError::data(format!("{}: {e}", meta_path.display())))?;
        let meta: SynthMeta =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", meta_path.display())))?;
        if let Some(aucs) = cap_auc(&map, &meta) {
            let aucs: Map<String, Value> = aucs.into_iter().map(|(m, a)| (m, json!(a))).collect();
            o.result("cap_auc", aucs);
        }
    }
    Ok(o)
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    create_dir(out)?;
    let report = bench_blocks(&cfg.bench)?;
    let files = emit_report(
        &ReportSet {
            bench: Some(report.clone()),
            ..ReportSet::default()
        },
        out,
    )?;
    let mut o = Outcome::default();
    o.output("bench_csv", &files.bench_csv);
    o.output("bench_json", &out.join("bench.json"));
    o.output("summary", &files.summary);
    for (kind, fit) in &report.fits {
        o.result(&format!("{}_exponent", kind.name()), fit.exponent);
    }
    o.result("host", &report.host);
    Ok(o)
}
