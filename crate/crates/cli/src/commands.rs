//! Subcommand implementations. Every command creates its output directory,
//! writes its artifacts, persists the effective config, and finishes with a
//! run manifest.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use distil_core::attack::{attack_campaign, default_budget, summarize, CampaignRecord};
use distil_core::data::{load_mnist_idx, subset};
use distil_core::metrics::{
    accuracy, confidence, gradient_histogram, mean_gradient_amplitudes, median, robustness,
    GradientHistogram,
};
use distil_core::nn::{Architecture, Model};
use distil_core::train::{distill, train, EpochMetrics, LabeledDataset};
use distil_core::Tensor;

use crate::artifacts::{num, write_csv, write_effective_config, write_json, write_manifest};
use crate::config::{row_seed, ExperimentConfig};
use crate::CliError;

fn load_split(
    images: &Path,
    labels: &Path,
    count: usize,
    seed: u64,
    input_shape: &[usize],
) -> Result<LabeledDataset, CliError> {
    let raw = load_mnist_idx(images, labels)?;
    let raw = if count > 0 && count < raw.len() {
        subset(&raw, count, seed)?
    } else {
        raw
    };
    Ok(raw.labeled(input_shape)?)
}

struct Experiment {
    arch: Architecture,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
}

fn setup(cfg: &ExperimentConfig) -> Result<Experiment, CliError> {
    cfg.check_dataset_paths(true, true)?;
    let arch = Architecture::by_name(&cfg.model.architecture)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let train_ds = load_split(
        &cfg.data.train_images,
        &cfg.data.train_labels,
        cfg.data.train_count,
        cfg.seed,
        &arch.input_shape,
    )?;
    let test_ds = load_split(
        &cfg.data.test_images,
        &cfg.data.test_labels,
        cfg.data.test_count,
        cfg.seed,
        &arch.input_shape,
    )?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(Experiment {
        arch,
        train_ds,
        test_ds,
    })
}

fn effective_budget(cfg: &ExperimentConfig, input_len: usize) -> usize {
    if cfg.attack.max_features == 0 {
        default_budget(input_len)
    } else {
        cfg.attack.max_features
    }
}

fn epochs_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<(), CliError> {
    let rows: Vec<String> = metrics
        .iter()
        .map(|m| {
            format!(
                "{},{},{}",
                m.epoch,
                num(m.train_loss),
                m.test_accuracy.map(num).unwrap_or_default()
            )
        })
        .collect();
    write_csv(path, "epoch,train_loss,test_accuracy", &rows)
}

fn campaign_csv(path: &Path, records: &[CampaignRecord]) -> Result<(), CliError> {
    let rows: Vec<String> = records
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.sample_id,
                r.source_class,
                r.target_class,
                r.result.success,
                r.result.features_changed,
                r.result.queries
            )
        })
        .collect();
    write_csv(
        path,
        "sample_id,source_class,target_class,success,features_changed,queries",
        &rows,
    )
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let exp = setup(cfg)?;
    let tc = cfg.train.to_train_config(cfg.seed);
    let (model, metrics) = train(exp.arch, &exp.train_ds, Some(&exp.test_ds), &tc)?;
    model.save(&cfg.output_dir.join("model.bin"))?;
    epochs_csv(&cfg.output_dir.join("epochs.csv"), &metrics)?;
    write_effective_config(&cfg.output_dir, cfg)?;
    write_manifest(&cfg.output_dir, "train", cfg, started)?;
    let acc = accuracy(&model, &exp.test_ds)?;
    println!("trained {} at T={}: test accuracy {:.4}", cfg.model.architecture, tc.temperature, acc);
    Ok(())
}

pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let exp = setup(cfg)?;
    let tc = cfg.train.to_train_config(cfg.seed);
    let outcome = distill(exp.arch, &exp.train_ds, Some(&exp.test_ds), &tc)?;
    outcome.teacher.save(&cfg.output_dir.join("teacher.bin"))?;
    outcome.student.save(&cfg.output_dir.join("student.bin"))?;
    epochs_csv(&cfg.output_dir.join("teacher_epochs.csv"), &outcome.teacher_metrics)?;
    epochs_csv(&cfg.output_dir.join("student_epochs.csv"), &outcome.student_metrics)?;
    let teacher_acc = accuracy(&outcome.teacher, &exp.test_ds)?;
    let student_acc = accuracy(&outcome.student, &exp.test_ds)?;
    write_csv(
        &cfg.output_dir.join("comparison.csv"),
        "temperature,teacher_accuracy,student_accuracy,accuracy_variation",
        &[format!(
            "{},{},{},{}",
            tc.temperature,
            num(teacher_acc),
            num(student_acc),
            num(student_acc - teacher_acc)
        )],
    )?;
    write_effective_config(&cfg.output_dir, cfg)?;
    write_manifest(&cfg.output_dir, "distill", cfg, started)?;
    println!(
        "distilled at T={}: teacher {:.4}, student {:.4}, variation {:+.4}",
        tc.temperature,
        teacher_acc,
        student_acc,
        student_acc - teacher_acc
    );
    Ok(())
}

#[derive(Serialize)]
struct AttackSummaryOut {
    total: usize,
    successes: usize,
    success_rate: f64,
    mean_features_changed: f64,
    budget: usize,
    robustness: distil_core::metrics::RobustnessReport,
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "model file {} not found (set --model)",
            path.display()
        )));
    }
    Ok(Model::load(path)?)
}

fn attack_samples(cfg: &ExperimentConfig, model: &Model) -> Result<Vec<Tensor>, CliError> {
    cfg.check_dataset_paths(false, true)?;
    let test = load_split(
        &cfg.data.test_images,
        &cfg.data.test_labels,
        cfg.data.test_count,
        cfg.seed,
        &model.arch.input_shape,
    )?;
    Ok(test
        .inputs
        .iter()
        .take(cfg.attack.sample_count)
        .cloned()
        .collect())
}

pub fn cmd_attack(model_path: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let model = load_model(model_path)?;
    let samples = attack_samples(cfg, &model)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let input_len = model.arch.input_len();
    let budget = effective_budget(cfg, input_len);
    let records = attack_campaign(&model, &samples, budget)?;
    campaign_csv(&cfg.output_dir.join("campaign.csv"), &records)?;
    let s = summarize(&records);
    let summary = AttackSummaryOut {
        total: s.total,
        successes: s.successes,
        success_rate: s.success_rate,
        mean_features_changed: s.mean_features_changed,
        budget,
        robustness: robustness(&records, input_len)?,
    };
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    write_effective_config(&cfg.output_dir, cfg)?;
    write_manifest(&cfg.output_dir, "attack", cfg, started)?;
    println!(
        "campaign: {}/{} targets reached ({:.1}%)",
        s.successes,
        s.total,
        100.0 * s.success_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOut {
    accuracy: f64,
    mean_confidence: f64,
    median_gradient_amplitude: f64,
    mean_max_probability: f64,
    temperature: f32,
    gradient_histogram: GradientHistogram,
}

/// Mean over samples of the largest predicted probability at the model's own
/// training temperature: the paper's elbow diagnostic for picking T.
fn mean_max_probability(model: &Model, inputs: &[Tensor]) -> Result<f64, CliError> {
    let mut acc = 0.0f64;
    for x in inputs {
        let p = model.predict(x, None)?;
        acc += p.data()[p.argmax()] as f64;
    }
    Ok(acc / inputs.len().max(1) as f64)
}

pub fn cmd_evaluate(model_path: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let model = load_model(model_path)?;
    cfg.check_dataset_paths(false, true)?;
    let test = load_split(
        &cfg.data.test_images,
        &cfg.data.test_labels,
        cfg.data.test_count,
        cfg.seed,
        &model.arch.input_shape,
    )?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let grad_inputs: Vec<Tensor> = test
        .inputs
        .iter()
        .take(cfg.sweep.gradient_sample_count)
        .cloned()
        .collect();
    let amplitudes = mean_gradient_amplitudes(&model, &grad_inputs)?;
    let out = EvaluationOut {
        accuracy: accuracy(&model, &test)?,
        mean_confidence: confidence(&model, &test)?,
        median_gradient_amplitude: median(&amplitudes),
        mean_max_probability: mean_max_probability(&model, &test.inputs)?,
        temperature: model.temperature,
        gradient_histogram: gradient_histogram(&model, &grad_inputs)?,
    };
    write_json(&cfg.output_dir.join("evaluation.json"), &out)?;
    write_effective_config(&cfg.output_dir, cfg)?;
    write_manifest(&cfg.output_dir, "evaluate", cfg, started)?;
    println!(
        "accuracy {:.4}, mean confidence {:.4}, median |J| {:.3e}",
        out.accuracy, out.mean_confidence, out.median_gradient_amplitude
    );
    Ok(())
}

#[derive(Serialize, Clone)]
struct SweepRow {
    model: String,
    temperature: f32,
    accuracy: Option<f64>,
    accuracy_variation: Option<f64>,
    attack_success_rate: Option<f64>,
    robustness: Option<f64>,
    median_gradient_amplitude: Option<f64>,
    mean_confidence: Option<f64>,
    mean_max_probability: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct SweepReport {
    baseline: SweepRow,
    rows: Vec<SweepRow>,
}

struct RowMetrics {
    accuracy: f64,
    attack_success_rate: f64,
    robustness: f64,
    median_gradient_amplitude: f64,
    mean_confidence: f64,
    mean_max_probability: f64,
}

fn row_metrics(
    model: &Model,
    test: &LabeledDataset,
    cfg: &ExperimentConfig,
) -> Result<RowMetrics, CliError> {
    let input_len = model.arch.input_len();
    let samples: Vec<Tensor> = test
        .inputs
        .iter()
        .take(cfg.attack.sample_count)
        .cloned()
        .collect();
    let records = attack_campaign(model, &samples, effective_budget(cfg, input_len))?;
    let grad_inputs: Vec<Tensor> = test
        .inputs
        .iter()
        .take(cfg.sweep.gradient_sample_count)
        .cloned()
        .collect();
    let amplitudes = mean_gradient_amplitudes(model, &grad_inputs)?;
    Ok(RowMetrics {
        accuracy: accuracy(model, test)?,
        attack_success_rate: summarize(&records).success_rate,
        robustness: robustness(&records, input_len)?.robustness,
        median_gradient_amplitude: median(&amplitudes),
        mean_confidence: confidence(model, test)?,
        mean_max_probability: mean_max_probability(model, &test.inputs)?,
    })
}

fn sweep_csv_row(r: &SweepRow) -> String {
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.model,
        r.temperature,
        opt(r.accuracy),
        opt(r.accuracy_variation),
        opt(r.attack_success_rate),
        opt(r.robustness),
        opt(r.median_gradient_amplitude),
        opt(r.mean_confidence),
        opt(r.mean_max_probability),
        r.error.clone().unwrap_or_default()
    )
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let exp = setup(cfg)?;

    // dashed-line reference: one undistilled model trained at T = 1
    let mut baseline_tc = cfg.train.to_train_config(cfg.seed);
    baseline_tc.temperature = 1.0;
    let (baseline_model, _) = train(exp.arch.clone(), &exp.train_ds, None, &baseline_tc)?;
    let base = row_metrics(&baseline_model, &exp.test_ds, cfg)?;
    let baseline = SweepRow {
        model: "baseline".into(),
        temperature: 1.0,
        accuracy: Some(base.accuracy),
        accuracy_variation: Some(0.0),
        attack_success_rate: Some(base.attack_success_rate),
        robustness: Some(base.robustness),
        median_gradient_amplitude: Some(base.median_gradient_amplitude),
        mean_confidence: Some(base.mean_confidence),
        mean_max_probability: Some(base.mean_max_probability),
        error: None,
    };
    println!(
        "baseline: accuracy {:.4}, attack success {:.1}%",
        base.accuracy,
        100.0 * base.attack_success_rate
    );

    let mut rows = Vec::with_capacity(cfg.sweep.temperatures.len());
    for &t in &cfg.sweep.temperatures {
        // each row owns its seed, so row order (or parallelism) is irrelevant
        let mut tc = cfg.train.to_train_config(row_seed(cfg.seed, t));
        tc.temperature = t;
        let outcome = (|| -> Result<RowMetrics, CliError> {
            let outcome = distill(exp.arch.clone(), &exp.train_ds, None, &tc)?;
            row_metrics(&outcome.student, &exp.test_ds, cfg)
        })();
        let row = match outcome {
            Ok(m) => SweepRow {
                model: "distilled".into(),
                temperature: t,
                accuracy: Some(m.accuracy),
                accuracy_variation: Some(m.accuracy - base.accuracy),
                attack_success_rate: Some(m.attack_success_rate),
                robustness: Some(m.robustness),
                median_gradient_amplitude: Some(m.median_gradient_amplitude),
                mean_confidence: Some(m.mean_confidence),
                mean_max_probability: Some(m.mean_max_probability),
                error: None,
            },
            // partial failure: record it on the row and keep sweeping
            Err(CliError::Usage(e)) | Err(CliError::Internal(e)) => SweepRow {
                model: "distilled".into(),
                temperature: t,
                accuracy: None,
                accuracy_variation: None,
                attack_success_rate: None,
                robustness: None,
                median_gradient_amplitude: None,
                mean_confidence: None,
                mean_max_probability: None,
                error: Some(e),
            },
        };
        match (&row.error, row.attack_success_rate) {
            (None, Some(rate)) => println!(
                "T={t}: accuracy {:.4}, attack success {:.1}%",
                row.accuracy.unwrap(),
                100.0 * rate
            ),
            _ => println!("T={t}: failed: {}", row.error.as_deref().unwrap_or("?")),
        }
        rows.push(row);
    }

    let header = "model,temperature,accuracy,accuracy_variation,attack_success_rate,\
                  robustness,median_gradient_amplitude,mean_confidence,mean_max_probability,error";
    let mut csv_rows = vec![sweep_csv_row(&baseline)];
    csv_rows.extend(rows.iter().map(sweep_csv_row));
    write_csv(&cfg.output_dir.join("sweep.csv"), header, &csv_rows)?;
    write_json(&cfg.output_dir.join("sweep.json"), &SweepReport { baseline, rows })?;
    write_effective_config(&cfg.output_dir, cfg)?;
    write_manifest(&cfg.output_dir, "sweep", cfg, started)?;
    Ok(())
}
