//! Decision fusion, confidence scoring, easy/hard routing and diversity
//! measures over a roster of base classifiers.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{invalid, shape_err, Error, Result};
use crate::ffcnn::{argmax_rows, predict_roster, train_roster, BaseClassifier, BaseConfig};
use crate::numerics::{fit_pca, PcaBasis, PcaTarget};
use crate::svm::{fit_svm, SvmModel, SvmParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleOptions {
    /// Energy fraction kept by the PCA over fused decision vectors.
    #[serde(default = "default_energy")]
    pub energy: f64,
    #[serde(default)]
    pub svm: SvmParams,
    pub t1: f64,
    pub t2: f64,
    /// Train a second ensemble on the hard training samples.
    #[serde(default)]
    pub hard_stage: bool,
    /// Added to every base seed of the hard-sample roster.
    #[serde(default = "default_hard_offset")]
    pub hard_seed_offset: u64,
}

fn default_energy() -> f64 {
    0.995
}

fn default_hard_offset() -> u64 {
    1
}

impl EnsembleOptions {
    pub fn new(t1: f64, t2: f64) -> Self {
        Self { energy: default_energy(), svm: SvmParams::default(), t1, t2, hard_stage: false, hard_seed_offset: default_hard_offset() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.energy > 0.0 && self.energy <= 1.0) {
            return Err(invalid(format!("fusion energy {} outside (0, 1]", self.energy)));
        }
        check_thresholds(self.t1, self.t2)?;
        self.svm.validate()
    }
}

fn check_thresholds(t1: f64, t2: f64) -> Result<()> {
    for (name, t) in [("T1", t1), ("T2", t2)] {
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid(format!("{name} = {t} outside (0, 1)")));
        }
    }
    Ok(())
}

/// PCA over fused decision vectors followed by the SVM.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaClassifier {
    pub basis: PcaBasis,
    pub svm: SvmModel,
}

impl MetaClassifier {
    /// `P_final` rows on the probability simplex.
    pub fn scores(&self, fused: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let z = self.basis.project(fused)?;
        self.svm.decision_scores(z.view())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub bases: Vec<BaseClassifier>,
    pub meta: MetaClassifier,
    pub t1: f64,
    pub t2: f64,
    pub hard: Option<Box<EnsembleModel>>,
}

impl EnsembleModel {
    pub fn new(bases: Vec<BaseClassifier>, meta: MetaClassifier, t1: f64, t2: f64, hard: Option<EnsembleModel>) -> Result<Self> {
        check_thresholds(t1, t2)?;
        if bases.is_empty() {
            return Err(invalid("ensemble without bases"));
        }
        let width: usize = bases.iter().map(|b| b.fc.out_dim()).sum();
        if meta.basis.dim() != width {
            return Err(shape_err(format!("fusion basis of dim {} over {width} fused columns", meta.basis.dim())));
        }
        Ok(Self { bases, meta, t1, t2, hard: hard.map(Box::new) })
    }

    pub fn class_count(&self) -> usize {
        self.meta.svm.class_count
    }

    pub fn configs(&self) -> Vec<BaseConfig> {
        self.bases.iter().map(|b| b.config.clone()).collect()
    }
}

/// Output of a single ensemble on a set.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub labels: Vec<usize>,
    pub p_final: Array2<f64>,
    /// One label vector per base, in roster order.
    pub base_labels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceRecord {
    pub cs1: f64,
    pub cs2: f64,
    pub majority: usize,
    pub is_hard: bool,
}

/// Exhaustive, exclusive index partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStagePrediction {
    pub labels: Vec<usize>,
    pub first: EnsemblePrediction,
    pub records: Vec<ConfidenceRecord>,
    pub partition: Partition,
    /// Hard-ensemble labels aligned with `partition.hard`, when a hard stage exists.
    pub hard_labels: Option<Vec<usize>>,
}

/// Training-time diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub base_accuracy: Vec<f64>,
    pub ensemble_accuracy: f64,
    pub fused_dim: usize,
    pub projected_dim: usize,
    pub hard_count: usize,
    pub hard: Option<Box<TrainSummary>>,
}

/// Concatenates decision matrices column-wise in the given order.
pub fn fuse(sets: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = sets.first().ok_or_else(|| invalid("nothing to fuse"))?;
    if let Some(bad) = sets.iter().find(|s| s.nrows() != first.nrows()) {
        return Err(shape_err(format!("fusing {} rows with {} rows", first.nrows(), bad.nrows())));
    }
    let views: Vec<_> = sets.iter().map(|s| s.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("row counts checked"))
}

pub fn fit_meta(
    fused: ArrayView2<'_, f64>,
    labels: &[usize],
    class_count: usize,
    energy: f64,
    params: &SvmParams,
) -> Result<MetaClassifier> {
    let basis = fit_pca(fused, PcaTarget::Energy(energy))?;
    let z = basis.project(fused)?;
    log::info!("fusion PCA keeps {} of {} dims", basis.n_components(), basis.dim());
    let svm = fit_svm(z.view(), labels, class_count, params)?;
    Ok(MetaClassifier { basis, svm })
}

/// Trains the roster and the meta-classifier, plus the hard stage when
/// enabled.
pub fn fit_ensemble(configs: &[BaseConfig], train: &LabeledImageSet, options: &EnsembleOptions) -> Result<(EnsembleModel, TrainSummary)> {
    options.validate()?;
    let (bases, decisions) = train_roster(configs, train)?;
    let fused = fuse(&decisions)?;
    let meta = fit_meta(fused.view(), &train.labels, train.class_count, options.energy, &options.svm)?;
    let p_final = meta.scores(fused.view())?;
    let labels = argmax_rows(p_final.view());
    let base_labels: Vec<Vec<usize>> = decisions.iter().map(|d| argmax_rows(d.view())).collect();
    let records = confidence_scores(p_final.view(), &base_labels, options.t1, options.t2)?;
    let partition = split_easy_hard(&records);
    let mut summary = TrainSummary {
        base_accuracy: base_labels.iter().map(|l| crate::ffcnn::accuracy(l, &train.labels)).collect(),
        ensemble_accuracy: crate::ffcnn::accuracy(&labels, &train.labels),
        fused_dim: fused.ncols(),
        projected_dim: meta.basis.n_components(),
        hard_count: partition.hard.len(),
        hard: None,
    };
    drop(fused);
    let mut hard = None;
    if options.hard_stage {
        let subset = train.select(&partition.hard)?;
        match fit_hard_ensemble(&subset, configs, options) {
            Ok((model, s)) => {
                summary.hard = Some(Box::new(s));
                hard = Some(model);
            }
            Err(e) => log::warn!("hard stage skipped on {} training samples: {e}", partition.hard.len()),
        }
    }
    let model = EnsembleModel::new(bases, meta, options.t1, options.t2, hard)?;
    Ok((model, summary))
}

/// A fresh ensemble with the same roster, reseeded, trained on hard samples
/// only. The returned ensemble has no hard stage of its own.
pub fn fit_hard_ensemble(
    hard_train: &LabeledImageSet,
    configs: &[BaseConfig],
    options: &EnsembleOptions,
) -> Result<(EnsembleModel, TrainSummary)> {
    let present = hard_train.class_histogram().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::Degenerate(format!("hard training set of {} samples covers {present} class(es)", hard_train.len())));
    }
    let reseeded: Vec<BaseConfig> = configs.iter().map(|c| c.reseeded(options.hard_seed_offset)).collect();
    let inner = EnsembleOptions { hard_stage: false, ..options.clone() };
    fit_ensemble(&reseeded, hard_train, &inner)
}

pub fn predict_ensemble(model: &EnsembleModel, set: &LabeledImageSet) -> Result<EnsemblePrediction> {
    let decisions = predict_roster(&model.bases, set)?;
    let fused = fuse(&decisions)?;
    let p_final = model.meta.scores(fused.view())?;
    Ok(EnsemblePrediction {
        labels: argmax_rows(p_final.view()),
        p_final,
        base_labels: decisions.iter().map(|d| argmax_rows(d.view())).collect(),
    })
}

/// Confidence of each sample: `CS1 = max P_final`, `CS2` the fraction of
/// bases voting the majority label. Hard means both fall below threshold.
pub fn confidence_scores(p_final: ArrayView2<'_, f64>, base_labels: &[Vec<usize>], t1: f64, t2: f64) -> Result<Vec<ConfidenceRecord>> {
    let n = p_final.nrows();
    let n_all = base_labels.len();
    if n_all == 0 {
        return Err(invalid("confidence needs at least one base"));
    }
    if let Some(bad) = base_labels.iter().find(|l| l.len() != n) {
        return Err(shape_err(format!("{} base labels for {n} samples", bad.len())));
    }
    let classes = p_final.ncols();
    let mut counts = vec![0usize; classes];
    let mut out = Vec::with_capacity(n);
    for (i, row) in p_final.rows().into_iter().enumerate() {
        counts.iter_mut().for_each(|c| *c = 0);
        for l in base_labels {
            let c = *counts.get_mut(l[i]).ok_or_else(|| invalid(format!("base label {} with {classes} classes", l[i])))?;
            counts[l[i]] = c + 1;
        }
        let mut majority = 0;
        for c in 1..classes {
            if counts[c] > counts[majority] {
                majority = c;
            }
        }
        let cs1 = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let cs2 = counts[majority] as f64 / n_all as f64;
        out.push(ConfidenceRecord { cs1, cs2, majority, is_hard: cs1 < t1 && cs2 < t2 });
    }
    Ok(out)
}

pub fn split_easy_hard(records: &[ConfidenceRecord]) -> Partition {
    let mut p = Partition::default();
    for (i, r) in records.iter().enumerate() {
        if r.is_hard {
            p.hard.push(i);
        } else {
            p.easy.push(i);
        }
    }
    p
}

/// Routes easy samples to the first ensemble and hard ones to the hard stage.
pub fn predict_two_stage(model: &EnsembleModel, set: &LabeledImageSet) -> Result<TwoStagePrediction> {
    let first = predict_ensemble(model, set)?;
    let records = confidence_scores(first.p_final.view(), &first.base_labels, model.t1, model.t2)?;
    let partition = split_easy_hard(&records);
    let mut labels = first.labels.clone();
    let mut hard_labels = None;
    if let Some(hard) = &model.hard {
        if !partition.hard.is_empty() {
            let subset = set.select(&partition.hard)?;
            let second = predict_ensemble(hard, &subset)?;
            for (&i, &l) in partition.hard.iter().zip(&second.labels) {
                labels[i] = l;
            }
            hard_labels = Some(second.labels);
        } else {
            hard_labels = Some(Vec::new());
        }
    }
    Ok(TwoStagePrediction { labels, first, records, partition, hard_labels })
}

/// Yule's Q for two correctness vectors; `degenerate` marks a zero
/// denominator, in which case `q` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QValue {
    pub q: f64,
    pub degenerate: bool,
}

pub fn q_statistic(a: &[bool], b: &[bool]) -> Result<QValue> {
    if a.len() != b.len() {
        return Err(shape_err(format!("correctness vectors of length {} and {}", a.len(), b.len())));
    }
    let (mut n11, mut n00, mut n10, mut n01) = (0u64, 0u64, 0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (true, true) => n11 += 1,
            (false, false) => n00 += 1,
            (true, false) => n10 += 1,
            (false, true) => n01 += 1,
        }
    }
    let agree = (n11 * n00) as f64;
    let disagree = (n01 * n10) as f64;
    let den = agree + disagree;
    if den == 0.0 {
        return Ok(QValue { q: 0.0, degenerate: true });
    }
    Ok(QValue { q: (agree - disagree) / den, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairQ {
    pub a: usize,
    pub b: usize,
    pub q: QValue,
}

/// Non-pairwise disagreement over `L ≥ 2` classifiers, one correctness vector
/// per classifier.
pub fn entropy_measure(correct: &[Vec<bool>]) -> Result<f64> {
    let l = correct.len();
    if l < 2 {
        return Err(invalid(format!("entropy measure needs at least 2 classifiers, got {l}")));
    }
    let n = correct[0].len();
    if correct.iter().any(|c| c.len() != n) {
        return Err(shape_err("correctness vectors of unequal length"));
    }
    if n == 0 {
        return Err(invalid("entropy measure over zero samples"));
    }
    let denom = (l - l.div_ceil(2)) as f64;
    let mut total = 0.0;
    for j in 0..n {
        let right = correct.iter().filter(|c| c[j]).count();
        total += right.min(l - right) as f64 / denom;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub mean_q: f64,
    pub entropy: f64,
    pub pairs: Vec<PairQ>,
}

impl DiversityReport {
    pub fn degenerate_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.q.degenerate).count()
    }
}

pub fn diversity_report(correct: &[Vec<bool>]) -> Result<DiversityReport> {
    let entropy = entropy_measure(correct)?;
    let mut pairs = Vec::new();
    for a in 0..correct.len() {
        for b in a + 1..correct.len() {
            pairs.push(PairQ { a, b, q: q_statistic(&correct[a], &correct[b])? });
        }
    }
    let mean_q = pairs.iter().map(|p| p.q.q).sum::<f64>() / pairs.len() as f64;
    Ok(DiversityReport { mean_q, entropy, pairs })
}

pub fn correctness(predicted: &[usize], truth: &[usize]) -> Vec<bool> {
    predicted.iter().zip(truth).map(|(p, t)| p == t).collect()
}

/// Writes `index,cs1,cs2,majority,is_hard`, where `index` is the sample's
/// position in its source dataset.
pub fn write_confidence_csv(path: &Path, records: &[ConfidenceRecord], source_indices: &[usize]) -> Result<()> {
    if records.len() != source_indices.len() {
        return Err(shape_err(format!("{} records for {} indices", records.len(), source_indices.len())));
    }
    let mut s = String::from("index,cs1,cs2,majority,is_hard\n");
    for (r, i) in records.iter().zip(source_indices) {
        writeln!(s, "{i},{:.6},{:.6},{},{}", r.cs1, r.cs2, r.majority, r.is_hard as u8).expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_pair_q_csv(path: &Path, report: &DiversityReport, names: &[String]) -> Result<()> {
    let mut s = String::from("base_a,base_b,q,degenerate\n");
    for p in &report.pairs {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
        writeln!(s, "{},{},{:.6},{}", name(p.a), name(p.b), p.q.q, p.q.degenerate as u8).expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1};
    use proptest::prelude::*;

    #[test]
    fn fuse_layout() {
        let a = Array2::from_elem((3, 10), 1.0);
        let b = Array2::from_elem((3, 10), 2.0);
        let ab = fuse(&[a.clone(), b.clone()]).unwrap();
        let ba = fuse(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(ab.ncols(), 20);
        assert_eq!(ab.slice(ndarray::s![.., ..10]), ba.slice(ndarray::s![.., 10..]));
        assert_eq!(fuse(std::slice::from_ref(&a)).unwrap(), a);
        assert!(fuse(&[a, Array2::zeros((2, 10))]).is_err());
    }

    #[test]
    fn duplicated_blocks_collapse_under_pca() {
        let mut rng = crate::numerics::rng_from_seed(4);
        use rand::Rng;
        let d = Array2::from_shape_fn((200, 10), |_| rng.random_range(0.0..1.0));
        let fused = fuse(&[d.clone(), d.clone(), d]).unwrap();
        let labels: Vec<usize> = (0..200).map(|i| i % 3).collect();
        let meta = fit_meta(fused.view(), &labels, 3, 0.995, &SvmParams::default()).unwrap();
        assert!(meta.basis.n_components() <= 10);
        let full = fit_pca(fused.view(), PcaTarget::Energy(1.0)).unwrap();
        assert_eq!(full.n_components(), 10);
    }

    #[test]
    fn confidence_arithmetic() {
        let mut p = Array2::zeros((1, 10));
        p[[0, 0]] = 0.1;
        p[[0, 9]] = 0.9;
        let labels: Vec<Vec<usize>> = (0..10).map(|i| vec![if i < 7 { 9 } else { i - 7 }]).collect();
        let r = confidence_scores(p.view(), &labels, 0.98, 0.7).unwrap()[0];
        assert_eq!(r.cs1, 0.9);
        assert!((r.cs2 - 0.7).abs() < 1e-15);
        assert_eq!(r.majority, 9);
        assert!(!r.is_hard);

        let mut q = Array2::zeros((1, 10));
        q[[0, 2]] = 0.99;
        q[[0, 3]] = 0.01;
        let split: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        let r = confidence_scores(q.view(), &split, 0.98, 0.7).unwrap()[0];
        assert!(!r.is_hard, "CS1 above T1 is easy whatever CS2 is");
        assert_eq!(r.majority, 0, "vote ties go to the lowest class");
        assert_eq!(r.cs2, 0.25);
    }

    #[test]
    fn q_and_entropy_fixtures() {
        let mut a = vec![true; 45];
        a.extend(vec![false; 15]);
        let mut b = vec![true; 40];
        b.extend(vec![false; 5]);
        b.extend(vec![true; 5]);
        b.extend(vec![false; 10]);
        let q = q_statistic(&a, &b).unwrap();
        assert!((q.q - 375.0 / 425.0).abs() < 1e-12);
        let same = vec![true, false, true, false];
        assert_eq!(q_statistic(&same, &same).unwrap().q, 1.0);
        let all = vec![true; 5];
        let d = q_statistic(&all, &all).unwrap();
        assert!(d.degenerate && d.q == 0.0);
        assert_eq!(entropy_measure(&[all.clone(), all.clone(), all]).unwrap(), 0.0);
        let half = vec![vec![true, false], vec![false, true], vec![true, false], vec![false, true]];
        assert_eq!(entropy_measure(&half).unwrap(), 1.0);
        assert!(entropy_measure(&[vec![true]]).is_err());
    }

    #[test]
    fn two_stage_without_hard_model_matches_first_stage() {
        // Exercised end to end in the integration tests; here only the
        // routing on an empty partition.
        let records = vec![ConfidenceRecord { cs1: 0.99, cs2: 1.0, majority: 0, is_hard: false }; 3];
        assert_eq!(split_easy_hard(&records), Partition { easy: vec![0, 1, 2], hard: vec![] });
    }

    #[test]
    fn thresholds_checked() {
        assert!(EnsembleOptions::new(0.98, 0.7).validate().is_ok());
        assert!(EnsembleOptions::new(1.0, 0.7).validate().is_err());
        assert!(EnsembleOptions::new(0.5, 0.0).validate().is_err());
        let opts: EnsembleOptions = serde_json::from_str(r#"{"t1":0.97,"t2":0.65}"#).unwrap();
        assert_eq!(opts.energy, 0.995);
        assert!(serde_json::from_str::<EnsembleOptions>(r#"{"t1":0.97,"t2":0.65,"bogus":1}"#).is_err());
    }

    fn correctness_matrix() -> impl Strategy<Value = Vec<Vec<bool>>> {
        (2usize..6, 1usize..40).prop_flat_map(|(l, n)| prop::collection::vec(prop::collection::vec(any::<bool>(), n), l))
    }

    proptest! {
        #[test]
        fn diversity_ranges_and_permutation(m in correctness_matrix(), rot in 0usize..6) {
            let r = diversity_report(&m).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r.mean_q));
            prop_assert!((0.0..=1.0).contains(&r.entropy));
            for p in &r.pairs {
                prop_assert!((-1.0..=1.0).contains(&p.q.q));
            }
            let mut perm = m.clone();
            perm.rotate_left(rot % m.len());
            perm.reverse();
            let s = diversity_report(&perm).unwrap();
            prop_assert!((s.mean_q - r.mean_q).abs() < 1e-12);
            prop_assert!((s.entropy - r.entropy).abs() < 1e-12);
        }

        #[test]
        fn partition_is_exhaustive_and_exclusive(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..30),
            bases in prop::collection::vec(prop::collection::vec(0usize..4, 30), 1..7),
            t1 in 0.05f64..0.95,
            t2 in 0.05f64..0.95,
        ) {
            let n = rows.len();
            let p = Array2::from_shape_fn((n, 4), |(i, j)| rows[i][j]);
            let labels: Vec<Vec<usize>> = bases.iter().map(|b| b[..n].to_vec()).collect();
            let recs = confidence_scores(p.view(), &labels, t1, t2).unwrap();
            let part = split_easy_hard(&recs);
            prop_assert_eq!(part.easy.len() + part.hard.len(), n);
            let mut all: Vec<usize> = part.easy.iter().chain(&part.hard).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for r in &recs {
                let steps = r.cs2 * labels.len() as f64;
                prop_assert!((steps - steps.round()).abs() < 1e-9);
                prop_assert!(r.cs2 > 0.0 && r.cs2 <= 1.0);
                prop_assert_eq!(r.is_hard, r.cs1 < t1 && r.cs2 < t2);
            }
        }
    }

    #[test]
    fn meta_scores_on_simplex() {
        let fused = arr2(&[[1.0, 0.0, 0.1], [0.9, 0.1, 0.0], [0.0, 1.0, 0.2], [0.1, 0.8, 0.1], [0.0, 0.1, 1.0], [0.2, 0.0, 0.9]]);
        let meta = fit_meta(fused.view(), &[0, 0, 1, 1, 2, 2], 3, 0.995, &SvmParams::default()).unwrap();
        let s = meta.scores(fused.view()).unwrap();
        let sums: Array1<f64> = s.sum_axis(Axis(1));
        assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(argmax_rows(s.view()), vec![0, 0, 1, 1, 2, 2]);
    }
}
