//! Fully-connected module built from cascaded least-squares regressions onto
//! one-hot pseudo-labels obtained by per-class k-means.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{derive_seed, kmeans_with, least_squares_fit, KMeansOptions, LinearMap};

/// Stage output dimensions; the last one is the class count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FcArch {
    pub dims: Vec<usize>,
}

impl FcArch {
    pub fn new(dims: Vec<usize>) -> Self {
        Self { dims }
    }

    pub fn class_count(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.dims.is_empty() {
            return Err(invalid("FC arch without stages"));
        }
        if self.class_count() != class_count {
            return Err(invalid(format!("FC arch ends in {} outputs for {class_count} classes", self.class_count())));
        }
        if self.dims.windows(2).any(|w| w[0] <= w[1]) {
            return Err(invalid(format!("FC dims {:?} must be strictly decreasing", self.dims)));
        }
        Ok(())
    }
}

/// Cluster memberships used as intermediate regression targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabeling {
    /// Target dimension (number of one-hot columns).
    pub k_o: usize,
    pub cluster_of_sample: Vec<usize>,
    /// True class of every formed cluster; may be shorter than `k_o` when
    /// some classes had too few samples for their quota.
    pub class_of_cluster: Vec<usize>,
}

impl PseudoLabeling {
    /// `n × k_o` one-hot target matrix.
    pub fn one_hot(&self) -> Array2<f64> {
        one_hot(&self.cluster_of_sample, self.k_o)
    }
}

pub fn one_hot(labels: &[usize], dim: usize) -> Array2<f64> {
    let mut t = Array2::<f64>::zeros((labels.len(), dim));
    for (i, &l) in labels.iter().enumerate() {
        t[[i, l]] = 1.0;
    }
    t
}

/// `⌊k_o / C⌋` clusters per class, one more for the first `k_o mod C`
/// classes, capped by each class's population.
pub fn cluster_quotas(class_sizes: &[usize], k_o: usize) -> Vec<usize> {
    let c = class_sizes.len();
    (0..c)
        .map(|j| {
            let quota = k_o / c + usize::from(j < k_o % c);
            if class_sizes[j] < quota {
                log::warn!("class {j} has {} samples for a quota of {quota} clusters; quota reduced", class_sizes[j]);
            }
            quota.min(class_sizes[j])
        })
        .collect()
}

pub fn make_pseudo_labels(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    class_count: usize,
    k_o: usize,
    seed: u64,
) -> Result<PseudoLabeling> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(shape_err(format!("{n} feature rows but {} labels", labels.len())));
    }
    if class_count == 0 || k_o < class_count {
        return Err(invalid(format!("{k_o} clusters for {class_count} classes")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(invalid(format!("label {bad} with {class_count} classes")));
    }
    let mut members = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = cluster_quotas(&sizes, k_o);

    let mut cluster_of_sample = vec![0usize; n];
    let mut class_of_cluster = Vec::with_capacity(k_o);
    for (class, (idx, &quota)) in members.iter().zip(&quotas).enumerate() {
        if quota == 0 {
            continue;
        }
        let base = class_of_cluster.len();
        if quota == 1 {
            for &i in idx {
                cluster_of_sample[i] = base;
            }
        } else {
            let x = features.select(ndarray::Axis(0), idx);
            let clustering = kmeans_with(x.view(), quota, derive_seed(seed, class as u64), KMeansOptions::default())?;
            for (&i, &a) in idx.iter().zip(&clustering.assignment) {
                cluster_of_sample[i] = base + a;
            }
        }
        class_of_cluster.extend(std::iter::repeat_n(class, quota));
    }
    Ok(PseudoLabeling { k_o, cluster_of_sample, class_of_cluster })
}

/// One LSR stage, rectified unless it is the output stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FcStage {
    pub map: LinearMap,
    pub rectified: bool,
}

impl FcStage {
    pub fn apply(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = self.map.apply(inputs)?;
        if self.rectified {
            out.mapv_inplace(|v| v.max(0.0));
        }
        Ok(out)
    }
}

pub fn fit_fc_stage(features: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, rectified: bool) -> Result<FcStage> {
    Ok(FcStage { map: least_squares_fit(features, targets)?, rectified })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcModel {
    pub stages: Vec<FcStage>,
}

impl FcModel {
    pub fn new(stages: Vec<FcStage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(invalid("FC model without stages"));
        }
        for w in stages.windows(2) {
            if w[0].map.out_dim() != w[1].map.in_dim() {
                return Err(shape_err(format!("stage of {} outputs feeds a stage of {} inputs", w[0].map.out_dim(), w[1].map.in_dim())));
            }
        }
        Ok(Self { stages })
    }

    pub fn in_dim(&self) -> usize {
        self.stages[0].map.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.stages.last().expect("nonempty").map.out_dim()
    }
}

/// Hidden stages regress onto pseudo-label one-hots of their own inputs; the
/// output stage regresses onto true-class one-hots.
pub fn fit_fc_module(features: ArrayView2<'_, f64>, labels: &[usize], arch: &FcArch, seed: u64) -> Result<FcModel> {
    let class_count = arch.class_count();
    arch.validate(class_count)?;
    if labels.len() != features.nrows() {
        return Err(shape_err(format!("{} feature rows but {} labels", features.nrows(), labels.len())));
    }
    if features.nrows() == 0 {
        return Err(Error::Degenerate("FC fit on zero samples".into()));
    }
    let mut x = features.to_owned();
    let mut stages = Vec::with_capacity(arch.dims.len());
    for (s, &dim) in arch.dims[..arch.dims.len() - 1].iter().enumerate() {
        let pl = make_pseudo_labels(x.view(), labels, class_count, dim, derive_seed(seed, s as u64))?;
        let stage = fit_fc_stage(x.view(), pl.one_hot().view(), true)?;
        x = stage.apply(x.view())?;
        stages.push(stage);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(invalid(format!("label {bad} with {class_count} classes")));
    }
    stages.push(fit_fc_stage(x.view(), one_hot(labels, class_count).view(), false)?);
    FcModel::new(stages)
}

/// Raw decision vectors, one row per sample.
pub fn apply_fc(model: &FcModel, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut x = model.stages[0].apply(features)?;
    for stage in &model.stages[1..] {
        x = stage.apply(x.view())?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmax;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clouds(n_per: usize, classes: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_per * classes;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let x = Array2::from_shape_fn((n, dim), |(i, j)| {
            let centre = if j % classes == labels[i] { 3.0 } else { 0.0 };
            centre + rng.random_range(-1.0..1.0)
        });
        (x, labels)
    }

    #[test]
    fn quota_rule() {
        assert_eq!(cluster_quotas(&[100; 10], 120), vec![12; 10]);
        let q = cluster_quotas(&[100; 10], 84);
        assert_eq!(q, vec![9, 9, 9, 9, 8, 8, 8, 8, 8, 8]);
        assert_eq!(q.iter().sum::<usize>(), 84);
        assert_eq!(cluster_quotas(&[3, 100, 0], 12), vec![3, 4, 0]);
    }

    #[test]
    fn one_cluster_per_class_reproduces_labels() {
        let (x, labels) = clouds(10, 3, 4, 0);
        let pl = make_pseudo_labels(x.view(), &labels, 3, 3, 0).unwrap();
        assert_eq!(pl.cluster_of_sample, labels);
        assert_eq!(pl.class_of_cluster, vec![0, 1, 2]);
    }

    #[test]
    fn clusters_are_pure_and_cover_quota() {
        let (x, labels) = clouds(30, 10, 12, 1);
        let pl = make_pseudo_labels(x.view(), &labels, 10, 84, 5).unwrap();
        assert_eq!(pl.class_of_cluster.len(), 84);
        for (i, &c) in pl.cluster_of_sample.iter().enumerate() {
            assert_eq!(pl.class_of_cluster[c], labels[i]);
        }
        let mut used = pl.cluster_of_sample.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 84);
        assert!(make_pseudo_labels(x.view(), &labels, 10, 9, 0).is_err());
    }

    #[test]
    fn small_classes_shrink_quota() {
        let x = arr2(&[[0.0], [1.0], [5.0], [6.0], [7.0]]);
        let labels = [0, 0, 1, 1, 1];
        let pl = make_pseudo_labels(x.view(), &labels, 3, 9, 0).unwrap();
        assert_eq!(pl.class_of_cluster, vec![0, 0, 1, 1, 1]);
        assert_eq!(pl.one_hot().dim(), (5, 9));
    }

    #[test]
    fn separable_stage_classifies_fixture() {
        let x = arr2(&[[0.0, 0.0], [0.0, 1.0], [5.0, 5.0], [5.0, 6.0]]);
        let t = one_hot(&[0, 0, 1, 1], 2);
        let stage = fit_fc_stage(x.view(), t.view(), true).unwrap();
        let out = stage.apply(x.view()).unwrap();
        assert!(out.iter().all(|&v| v >= 0.0));
        let pred: Vec<usize> = out.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())).collect();
        assert_eq!(pred, vec![0, 0, 1, 1]);
    }

    #[test]
    fn conflicting_duplicates_regress_to_mean() {
        let x = arr2(&[[1.0], [1.0]]);
        let t = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let stage = fit_fc_stage(x.view(), t.view(), false).unwrap();
        let out = stage.apply(x.view()).unwrap();
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-5), "{out}");
    }

    #[test]
    fn zero_input_follows_bias_path() {
        let s1 = FcStage { map: LinearMap::new(arr2(&[[1.0], [2.0]]), arr1(&[0.5, -1.0])).unwrap(), rectified: true };
        let s2 = FcStage { map: LinearMap::new(arr2(&[[2.0, 3.0]]), arr1(&[0.25])).unwrap(), rectified: false };
        let model = FcModel::new(vec![s1, s2]).unwrap();
        let out = apply_fc(&model, Array2::zeros((1, 1)).view()).unwrap();
        // relu(0.5, −1) = (0.5, 0); 2·0.5 + 0.25.
        assert_eq!(out[[0, 0]], 1.25);
    }

    #[test]
    fn module_shapes_determinism_and_fit() {
        let (x, labels) = clouds(40, 4, 8, 2);
        let arch = FcArch::new(vec![12, 8, 4]);
        let a = fit_fc_module(x.view(), &labels, &arch, 3).unwrap();
        let b = fit_fc_module(x.view(), &labels, &arch, 3).unwrap();
        assert_eq!(a, b);
        let out = apply_fc(&a, x.view()).unwrap();
        assert_eq!(out.dim(), (160, 4));
        assert_eq!(out, apply_fc(&a, x.view()).unwrap());
        let correct = out.rows().into_iter().zip(&labels).filter(|(r, &l)| argmax(r.as_slice().unwrap()) == l).count();
        assert!(correct as f64 / 160.0 > 0.9);
        assert!(apply_fc(&a, Array2::zeros((1, 7)).view()).is_err());
    }

    #[test]
    fn arch_validation() {
        assert!(FcArch::new(vec![120, 84, 10]).validate(10).is_ok());
        assert!(FcArch::new(vec![200, 100, 10]).validate(10).is_ok());
        assert!(FcArch::new(vec![84, 120, 10]).validate(10).is_err());
        assert!(FcArch::new(vec![120, 84, 9]).validate(10).is_err());
        assert!(FcArch::new(vec![]).validate(10).is_err());
        let x = Array2::<f64>::zeros((2, 2));
        assert!(fit_fc_module(x.view(), &[0, 1, 1], &FcArch::new(vec![2]), 0).is_err());
    }
}
