//! The `train`, `eval` and `report` commands.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ffcnn::data::{subset, LabeledImageSet, Split};
use ffcnn::ensemble::{
    correctness, diversity_report, fit_ensemble, fit_meta, fuse, predict_two_stage, write_confidence_csv, write_pair_q_csv,
    DiversityReport, EnsembleModel, TrainSummary, TwoStagePrediction,
};
use ffcnn::ffcnn::{argmax_rows, predict_roster, Scheme};
use ffcnn::saab::channel_correlation;

use crate::codec::{decode, encode, StoredModel};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::model_file::ModelFile;

pub const MODEL_FILE: &str = "model.ffcn";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const EVAL_REPORT: &str = "eval_report.csv";
pub const EASY_HARD_REPORT: &str = "easy_hard.csv";
pub const CONFIDENCE_REPORT: &str = "confidence.csv";
pub const DIVERSITY_REPORT: &str = "diversity.csv";
pub const DIVERSITY_PAIRS: &str = "diversity_pairs.csv";
pub const CORRELATION_REPORT: &str = "correlation.csv";
pub const SIZE_SWEEP_REPORT: &str = "size_sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportKind {
    Diversity,
    Correlation,
    SizeSweep,
}

/// Loads one split, reduced to the configured per-class subset.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> CliResult<LabeledImageSet> {
    let root = cfg.data_root()?;
    let name = cfg.dataset.name;
    let missing: Vec<String> = name.files(&root, split).into_iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!("missing dataset files: {}", missing.join(", "))));
    }
    let full = name.load(&root, split).map_err(|e| CliError::Data(e.to_string()))?;
    let per_class = match split {
        Split::Train => cfg.dataset.per_class,
        Split::Test => cfg.dataset.test_per_class,
    };
    match per_class {
        Some(k) => subset(&full, k, cfg.seed).map_err(|e| CliError::Data(e.to_string())),
        None => Ok(full),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

fn count_correct(pred: &[usize], truth: &[usize]) -> usize {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count()
}

fn ratio(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub report_path: PathBuf,
    pub model: EnsembleModel,
    pub summary: TrainSummary,
}

/// Trains the configured roster and ensemble, writing the model file and a
/// training-accuracy CSV into `out`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let train = load_split(cfg, Split::Train)?;
    ensure_dir(out)?;
    let roster = cfg.roster();
    log::info!("training {} base(s) on {} images", roster.len(), train.len());
    let t = Instant::now();
    let (model, summary) = fit_ensemble(&roster, &train, &cfg.ensemble_options())?;
    log::info!("training finished in {:.1}s", t.elapsed().as_secs_f64());

    let model_path = out.join(MODEL_FILE);
    encode(cfg, &model)?.write(&model_path)?;

    let mut csv = String::from("name,tag,role,train_accuracy\n");
    for (b, acc) in model.bases.iter().zip(&summary.base_accuracy) {
        writeln!(csv, "{},{},base,{acc:.4}", b.config.name, b.config.tag.as_str()).expect("string write");
    }
    writeln!(csv, "ensemble,ALL,ensemble,{:.4}", summary.ensemble_accuracy).expect("string write");
    if let (Some(hard), Some(hm)) = (&summary.hard, &model.hard) {
        for (b, acc) in hm.bases.iter().zip(&hard.base_accuracy) {
            writeln!(csv, "{},{},hard-base,{acc:.4}", b.config.name, b.config.tag.as_str()).expect("string write");
        }
        writeln!(csv, "hard-ensemble,ALL,hard-ensemble,{:.4}", hard.ensemble_accuracy).expect("string write");
    }
    let report_path = out.join(TRAIN_REPORT);
    write_file(&report_path, &csv)?;
    Ok(TrainOutcome { model_path, report_path, model, summary })
}

pub fn load_model(path: &Path) -> CliResult<StoredModel> {
    let file = ModelFile::read(path)?;
    decode(&file).map_err(|e| match e {
        CliError::ModelFile { msg, .. } => CliError::ModelFile { path: path.to_path_buf(), msg },
        other => other,
    })
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub base_accuracy: Vec<f64>,
    pub ensemble_accuracy: f64,
    pub two_stage_accuracy: f64,
    /// First-ensemble accuracy on the easy and hard subsets.
    pub easy_accuracy: Option<f64>,
    pub hard_accuracy: Option<f64>,
    /// Hard-ensemble accuracy on the hard subset.
    pub hard_plus_accuracy: Option<f64>,
    pub prediction: TwoStagePrediction,
    pub samples: usize,
}

/// Evaluates a stored model on the test split named by `cfg` (or by the
/// config stored in the model).
pub fn run_eval(model_path: &Path, cfg: Option<&ExperimentConfig>, out: &Path) -> CliResult<EvalOutcome> {
    let stored = load_model(model_path)?;
    let cfg = cfg.unwrap_or(&stored.config);
    let test = load_split(cfg, Split::Test)?;
    ensure_dir(out)?;
    let outcome = evaluate(&stored.model, &test)?;

    let mut csv = String::from("name,tag,role,samples,correct,accuracy\n");
    let n = test.len();
    for (b, labels) in stored.model.bases.iter().zip(&outcome.prediction.first.base_labels) {
        let c = count_correct(labels, &test.labels);
        writeln!(csv, "{},{},base,{n},{c},{}", b.config.name, b.config.tag.as_str(), fmt_acc(ratio(c, n))).expect("string write");
    }
    let c = count_correct(&outcome.prediction.first.labels, &test.labels);
    writeln!(csv, "ensemble,ALL,ensemble,{n},{c},{}", fmt_acc(ratio(c, n))).expect("string write");
    if stored.model.hard.is_some() {
        let c = count_correct(&outcome.prediction.labels, &test.labels);
        writeln!(csv, "two-stage,ALL,two-stage,{n},{c},{}", fmt_acc(ratio(c, n))).expect("string write");
    }
    write_file(&out.join(EVAL_REPORT), &csv)?;

    let p = &outcome.prediction;
    let easy_hard = format!(
        "easy_samples,hard_samples,easy,hard,hard_plus,ff,ff_plus\n{},{},{},{},{},{},{}\n",
        p.partition.easy.len(),
        p.partition.hard.len(),
        fmt_acc(outcome.easy_accuracy),
        fmt_acc(outcome.hard_accuracy),
        fmt_acc(outcome.hard_plus_accuracy),
        fmt_acc(Some(outcome.ensemble_accuracy)),
        fmt_acc(Some(outcome.two_stage_accuracy)),
    );
    write_file(&out.join(EASY_HARD_REPORT), &easy_hard)?;
    write_confidence_csv(&out.join(CONFIDENCE_REPORT), &p.records, &test.source_indices)?;
    Ok(outcome)
}

/// Two-stage prediction plus the accuracy breakdown on `set`.
pub fn evaluate(model: &EnsembleModel, set: &LabeledImageSet) -> CliResult<EvalOutcome> {
    let t = Instant::now();
    let prediction = predict_two_stage(model, set)?;
    log::info!("prediction on {} images took {:.1}s", set.len(), t.elapsed().as_secs_f64());
    let truth = &set.labels;
    let n = set.len();
    let acc = |labels: &[usize]| count_correct(labels, truth) as f64 / n as f64;
    let on = |idx: &[usize], labels: &dyn Fn(usize) -> usize| ratio(idx.iter().filter(|&&i| labels(i) == truth[i]).count(), idx.len());
    let part = &prediction.partition;
    let easy_accuracy = on(&part.easy, &|i| prediction.first.labels[i]);
    let hard_accuracy = on(&part.hard, &|i| prediction.first.labels[i]);
    let hard_plus_accuracy = prediction.hard_labels.as_ref().and_then(|_| on(&part.hard, &|i| prediction.labels[i]));
    Ok(EvalOutcome {
        base_accuracy: prediction.first.base_labels.iter().map(|l| acc(l)).collect(),
        ensemble_accuracy: acc(&prediction.first.labels),
        two_stage_accuracy: acc(&prediction.labels),
        easy_accuracy,
        hard_accuracy,
        hard_plus_accuracy,
        samples: n,
        prediction,
    })
}

/// One diversity row per scheme tag, then one over the whole roster.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityRow {
    pub group: String,
    pub bases: usize,
    pub report: Option<DiversityReport>,
}

pub fn diversity_rows(model: &EnsembleModel, base_labels: &[Vec<usize>], truth: &[usize]) -> CliResult<Vec<DiversityRow>> {
    let correct: Vec<Vec<bool>> = base_labels.iter().map(|l| correctness(l, truth)).collect();
    let mut rows = Vec::new();
    let groups: Vec<(String, Vec<usize>)> = Scheme::ALL
        .iter()
        .map(|&s| (s.as_str().to_string(), (0..model.bases.len()).filter(|&i| model.bases[i].config.tag == s).collect()))
        .chain(std::iter::once(("ALL".to_string(), (0..model.bases.len()).collect())))
        .collect();
    for (group, idx) in groups {
        let members: Vec<Vec<bool>> = idx.iter().map(|&i| correct[i].clone()).collect();
        let report = if members.len() >= 2 { Some(diversity_report(&members)?) } else { None };
        rows.push(DiversityRow { group, bases: idx.len(), report });
    }
    Ok(rows)
}

/// Writes the requested report into `out` and returns the main CSV path.
pub fn run_report(model_path: &Path, cfg: Option<&ExperimentConfig>, kind: ReportKind, out: &Path) -> CliResult<PathBuf> {
    let stored = load_model(model_path)?;
    let cfg = cfg.unwrap_or(&stored.config);
    let model = &stored.model;
    let test = load_split(cfg, Split::Test)?;
    ensure_dir(out)?;
    match kind {
        ReportKind::Diversity => {
            let decisions = predict_roster(&model.bases, &test)?;
            let labels: Vec<Vec<usize>> = decisions.iter().map(|d| argmax_rows(d.view())).collect();
            let rows = diversity_rows(model, &labels, &test.labels)?;
            let mut csv = String::from("group,bases,mean_q,entropy,degenerate_pairs\n");
            for r in &rows {
                match &r.report {
                    Some(d) => writeln!(csv, "{},{},{:.6},{:.6},{}", r.group, r.bases, d.mean_q, d.entropy, d.degenerate_pairs()),
                    None => writeln!(csv, "{},{},NA,NA,0", r.group, r.bases),
                }
                .expect("string write");
            }
            let path = out.join(DIVERSITY_REPORT);
            write_file(&path, &csv)?;
            if let Some(all) = rows.last().and_then(|r| r.report.as_ref()) {
                let names: Vec<String> = model.bases.iter().map(|b| b.config.name.clone()).collect();
                write_pair_q_csv(&out.join(DIVERSITY_PAIRS), all, &names)?;
            }
            Ok(path)
        }
        ReportKind::Correlation => {
            let base = &model.bases[0];
            let input = base.config.form.apply(&test)?;
            let outputs = base.conv.forward(input.images.view())?;
            let mut csv = String::from("layer,channel,positions,mean_abs_off_diagonal,degenerate_positions\n");
            for (layer, maps) in [(1, &outputs.conv1), (2, &outputs.conv2)] {
                for ch in 0..maps.spectral() {
                    let m = channel_correlation(maps.view(), ch)?;
                    let file = out.join(format!("correlation_conv{layer}_ch{ch}.csv"));
                    let f = fs::File::create(&file).map_err(|e| CliError::io(format!("creating {}", file.display()), e))?;
                    m.write_csv(BufWriter::new(f)).map_err(|e| CliError::io(format!("writing {}", file.display()), e))?;
                    let degenerate = m.degenerate.iter().filter(|&&d| d).count();
                    writeln!(csv, "{layer},{ch},{},{:.6},{degenerate}", m.values.nrows(), m.mean_abs_off_diagonal()).expect("string write");
                }
            }
            let path = out.join(CORRELATION_REPORT);
            write_file(&path, &csv)?;
            Ok(path)
        }
        ReportKind::SizeSweep => {
            let train = load_split(cfg, Split::Train)?;
            let opts = cfg.ensemble_options();
            let train_dec = predict_roster(&model.bases, &train)?;
            let test_dec = predict_roster(&model.bases, &test)?;
            let mut csv = String::from("bases,last_base,accuracy\n");
            for m in 1..=model.bases.len() {
                let fused = fuse(&train_dec[..m])?;
                let meta = fit_meta(fused.view(), &train.labels, train.class_count, opts.energy, &opts.svm)?;
                let scores = meta.scores(fuse(&test_dec[..m])?.view())?;
                let acc = count_correct(&argmax_rows(scores.view()), &test.labels) as f64 / test.len() as f64;
                log::info!("size sweep: {m} base(s) → {acc:.4}");
                writeln!(csv, "{m},{},{acc:.4}", model.bases[m - 1].config.name).expect("string write");
            }
            let path = out.join(SIZE_SWEEP_REPORT);
            write_file(&path, &csv)?;
            Ok(path)
        }
    }
}
