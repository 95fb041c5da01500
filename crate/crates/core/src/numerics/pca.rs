use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{ensure_finite, symmetric_eigen_desc};
use crate::error::{invalid, shape_err, Error, Result};

/// How many principal directions to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PcaTarget {
    /// Keep exactly this many components.
    Components(usize),
    /// Keep the smallest number of components whose cumulative eigenvalue
    /// fraction reaches the given energy in `(0, 1]`.
    Energy(f64),
}

/// A fitted principal subspace: column mean, orthonormal directions stored as
/// the columns of a `d × m` matrix, and their nonincreasing eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    mean: Array1<f64>,
    components: Array2<f64>,
    eigenvalues: Array1<f64>,
}

impl PcaBasis {
    /// Rebuilds a basis from stored parts, checking the structural invariants.
    pub fn from_parts(mean: Array1<f64>, components: Array2<f64>, eigenvalues: Array1<f64>) -> Result<Self> {
        let (d, m) = components.dim();
        if mean.len() != d {
            return Err(shape_err(format!("mean length {} vs basis dim {d}", mean.len())));
        }
        if eigenvalues.len() != m || m > d {
            return Err(shape_err(format!("{} eigenvalues for {m} components of dim {d}", eigenvalues.len())));
        }
        Ok(Self { mean, components, eigenvalues })
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    /// `d × m`, one principal direction per column.
    pub fn components(&self) -> ArrayView2<'_, f64> {
        self.components.view()
    }

    pub fn eigenvalues(&self) -> ArrayView1<'_, f64> {
        self.eigenvalues.view()
    }

    /// Input dimension `d`.
    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    /// Number of retained components `m`.
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    /// `(samples − mean) · components`.
    pub fn project(&self, samples: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if samples.ncols() != self.dim() {
            return Err(shape_err(format!("projecting {}-dim samples onto a {}-dim basis", samples.ncols(), self.dim())));
        }
        let centered = &samples - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.components))
    }

    /// Maps coordinates back to the input space: `coords · componentsᵀ + mean`.
    pub fn back_project(&self, coords: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if coords.ncols() != self.n_components() {
            return Err(shape_err(format!("back-projecting {} coordinates with {} components", coords.ncols(), self.n_components())));
        }
        let mut out = coords.dot(&self.components.t());
        out += &self.mean.view().insert_axis(Axis(0));
        Ok(out)
    }

    /// Keeps only the leading `m` components.
    pub fn truncated(&self, m: usize) -> Result<Self> {
        if m > self.n_components() {
            return Err(invalid(format!("cannot keep {m} of {} components", self.n_components())));
        }
        Ok(Self {
            mean: self.mean.clone(),
            components: self.components.slice(ndarray::s![.., ..m]).to_owned(),
            eigenvalues: self.eigenvalues.slice(ndarray::s![..m]).to_owned(),
        })
    }
}

/// Fits PCA on in-memory samples (one per row) from the `1/(n−1)` sample
/// covariance.
pub fn fit_pca(samples: ArrayView2<'_, f64>, target: PcaTarget) -> Result<PcaBasis> {
    let (n, d) = samples.dim();
    if n < 2 {
        return Err(Error::Degenerate(format!("PCA needs at least 2 samples, got {n}")));
    }
    if d == 0 {
        return Err(Error::Degenerate("PCA on zero-dimensional samples".into()));
    }
    ensure_finite(&samples, "PCA samples")?;
    let mean = samples.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &samples - &mean.view().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered);
    cov /= (n - 1) as f64;
    basis_from_covariance(mean, cov, n, target)
}

/// Streaming first/second moment accumulator for covariance estimation when
/// the sample matrix does not fit in memory at once. Samples are shifted by
/// the first row seen to limit cancellation.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    n: usize,
    shift: Option<Array1<f64>>,
    sum: Array1<f64>,
    cross: Array2<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, shift: None, sum: Array1::zeros(dim), cross: Array2::zeros((dim, dim)) }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push_rows(&mut self, rows: ArrayView2<'_, f64>) -> Result<()> {
        if rows.ncols() != self.dim() {
            return Err(shape_err(format!("accumulating {}-dim rows into a {}-dim covariance", rows.ncols(), self.dim())));
        }
        if rows.nrows() == 0 {
            return Ok(());
        }
        ensure_finite(&rows, "covariance rows")?;
        let shift = self.shift.get_or_insert_with(|| rows.row(0).to_owned());
        let shifted = &rows - &shift.view().insert_axis(Axis(0));
        self.sum += &shifted.sum_axis(Axis(0));
        ndarray::linalg::general_mat_mul(1.0, &shifted.t(), &shifted, 1.0, &mut self.cross);
        self.n += rows.nrows();
        Ok(())
    }

    pub fn mean(&self) -> Array1<f64> {
        match &self.shift {
            Some(s) => s + &(&self.sum / self.n as f64),
            None => Array1::zeros(self.dim()),
        }
    }

    /// Unbiased (`1/(n−1)`) covariance.
    pub fn covariance(&self) -> Result<Array2<f64>> {
        if self.n < 2 {
            return Err(Error::Degenerate(format!("covariance needs at least 2 samples, got {}", self.n)));
        }
        let n = self.n as f64;
        let mu = &self.sum / n;
        let outer = mu.view().insert_axis(Axis(1)).dot(&mu.view().insert_axis(Axis(0)));
        let mut cov = &self.cross - &(outer * n);
        cov /= n - 1.0;
        Ok(cov)
    }

    pub fn fit(&self, target: PcaTarget) -> Result<PcaBasis> {
        let cov = self.covariance()?;
        basis_from_covariance(self.mean(), cov, self.n, target)
    }
}

fn basis_from_covariance(mean: Array1<f64>, cov: Array2<f64>, n: usize, target: PcaTarget) -> Result<PcaBasis> {
    let d = mean.len();
    let m = match target {
        PcaTarget::Components(m) => {
            if m == 0 || m > d.min(n) {
                return Err(invalid(format!("requested {m} components from {n} samples of dim {d}")));
            }
            Some(m)
        }
        PcaTarget::Energy(e) => {
            if !(e > 0.0 && e <= 1.0) {
                return Err(invalid(format!("energy fraction {e} outside (0, 1]")));
            }
            None
        }
    };
    let (mut values, mut vectors) = symmetric_eigen_desc(&cov)?;
    // Roundoff can push null-space eigenvalues slightly below zero.
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let m = match (m, target) {
        (Some(m), _) => m,
        (None, PcaTarget::Energy(e)) => energy_cutoff(&values, e),
        _ => unreachable!(),
    };
    for mut col in vectors.columns_mut() {
        let mut pivot = 0.0f64;
        for &v in col.iter() {
            if v.abs() > pivot.abs() {
                pivot = v;
            }
        }
        if pivot < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    values.truncate(m);
    let components = vectors.slice(ndarray::s![.., ..m]).to_owned();
    PcaBasis::from_parts(mean, components, Array1::from(values))
}

/// Smallest count whose cumulative eigenvalue fraction reaches `energy`.
/// With an all-zero spectrum a single component is kept.
pub(crate) fn energy_cutoff(eigenvalues: &[f64], energy: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let goal = energy * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (i, v) in eigenvalues.iter().enumerate() {
        acc += v;
        if acc >= goal {
            return i + 1;
        }
    }
    eigenvalues.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn identical_samples_give_zero_spectrum() {
        let x = Array2::from_shape_fn((5, 3), |(_, j)| j as f64 + 0.5);
        let basis = fit_pca(x.view(), PcaTarget::Components(3)).unwrap();
        assert!(basis.eigenvalues().iter().all(|&v| v.abs() < 1e-14));
        let proj = basis.project(x.view()).unwrap();
        assert!(proj.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn line_y_equals_x() {
        // Points on y = x centred at the origin: covariance is var·[[1,1],[1,1]]
        // with eigenvectors (1,1)/√2 (eigenvalue 2·var) and (1,−1)/√2 (0).
        let x = arr2(&[[-2.0, -2.0], [-1.0, -1.0], [0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        let basis = fit_pca(x.view(), PcaTarget::Components(2)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((basis.components()[[0, 0]].abs() - h).abs() < 1e-12);
        assert!((basis.components()[[1, 0]].abs() - h).abs() < 1e-12);
        // var of {-2..2} with 1/(n-1) is 2.5, so the leading eigenvalue is 5.
        assert!((basis.eigenvalues()[0] - 5.0).abs() < 1e-12);
        assert!(basis.eigenvalues()[1].abs() < 1e-12);

        let p = basis.project(arr2(&[[3.0, 3.0]]).view()).unwrap();
        assert!((p[[0, 0]].abs() - 3.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(p[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn energy_cutoff_matches_cumulative_sum() {
        // 4 / 5.5 = 0.727 < 0.8; 5 / 6 … cumulative (4+1)/6 = 0.833 ≥ 0.8.
        assert_eq!(energy_cutoff(&[4.0, 1.0, 0.5, 0.5], 0.80), 2);
        assert_eq!(energy_cutoff(&[4.0, 1.0, 0.5, 0.5], 1.0), 4);
        assert_eq!(energy_cutoff(&[4.0, 1.0, 0.5, 0.5], 0.5), 1);
        assert_eq!(energy_cutoff(&[0.0, 0.0], 0.9), 1);
    }

    #[test]
    fn energy_target_on_diagonal_spectrum() {
        // Independent axes scaled so the covariance eigenvalues are {4,1,.5,.5}.
        let mut rows = Vec::new();
        let scales = [2.0, 1.0, 0.5f64.sqrt(), 0.5f64.sqrt()];
        for axis in 0..4 {
            for sign in [-1.0, 1.0] {
                let mut r = [0.0; 4];
                r[axis] = sign * scales[axis] * 2.0;
                rows.push(r);
            }
        }
        let x = Array2::from_shape_fn((8, 4), |(i, j)| rows[i][j]);
        let basis = fit_pca(x.view(), PcaTarget::Energy(0.8)).unwrap();
        let ev = basis.eigenvalues();
        assert_eq!(basis.n_components(), 2);
        assert!((ev[0] / ev[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let x = arr2(&[[1.0, 2.0]]);
        assert!(matches!(fit_pca(x.view(), PcaTarget::Components(1)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn projection_dimension_mismatch() {
        let x = arr2(&[[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]]);
        let basis = fit_pca(x.view(), PcaTarget::Components(1)).unwrap();
        assert!(basis.project(arr2(&[[1.0, 2.0, 3.0]]).view()).is_err());
    }

    #[test]
    fn accumulator_matches_in_memory_fit() {
        let x = Array2::from_shape_fn((50, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 0.3 + j as f64);
        let direct = fit_pca(x.view(), PcaTarget::Components(4)).unwrap();
        let mut acc = CovarianceAccumulator::new(4);
        acc.push_rows(x.slice(ndarray::s![..17, ..])).unwrap();
        acc.push_rows(x.slice(ndarray::s![17.., ..])).unwrap();
        let streamed = acc.fit(PcaTarget::Components(4)).unwrap();
        for (a, b) in direct.eigenvalues().iter().zip(streamed.eigenvalues().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(max_abs(&(&direct.components() - &streamed.components())) < 1e-8);
    }

    fn sample_matrix() -> impl Strategy<Value = Array2<f64>> {
        (2usize..12, 1usize..7).prop_flat_map(|(n, d)| {
            proptest::collection::vec(-10.0f64..10.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn components_orthonormal_and_energy_preserved(x in sample_matrix()) {
            let d = x.ncols();
            let m = d.min(x.nrows());
            let basis = fit_pca(x.view(), PcaTarget::Components(m)).unwrap();
            let c = basis.components();
            let gram = c.t().dot(&c);
            let eye = Array2::<f64>::eye(m);
            prop_assert!(max_abs(&(&gram - &eye)) < 1e-8);
            let ev = basis.eigenvalues();
            for w in ev.as_slice().unwrap().windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            prop_assert!(ev.iter().all(|&v| v >= 0.0));

            // Full basis: eigenvalue sum equals covariance trace.
            let full = fit_pca(x.view(), PcaTarget::Components(d.min(x.nrows()).max(1))).unwrap();
            let mean = x.mean_axis(Axis(0)).unwrap();
            let trace: f64 = x.rows().into_iter()
                .map(|r| (&r - &mean).mapv(|v| v * v).sum())
                .sum::<f64>() / (x.nrows() - 1) as f64;
            if m == d {
                let total: f64 = full.eigenvalues().sum();
                prop_assert!((total - trace).abs() <= 1e-6 * trace.max(1e-12) + 1e-12);
            }
        }

        #[test]
        fn full_rank_roundtrip(x in sample_matrix()) {
            let d = x.ncols();
            prop_assume!(x.nrows() >= d);
            let basis = fit_pca(x.view(), PcaTarget::Components(d)).unwrap();
            let back = basis.back_project(basis.project(x.view()).unwrap().view()).unwrap();
            prop_assert!(max_abs(&(&back - &x)) < 1e-8);
            let mean_row = basis.mean().insert_axis(Axis(0)).to_owned();
            let p = basis.project(mean_row.view()).unwrap();
            prop_assert!(p.iter().all(|v| v.abs() < 1e-9));
        }

        #[test]
        fn sign_convention_largest_entry_positive(x in sample_matrix()) {
            let m = x.ncols().min(x.nrows());
            let basis = fit_pca(x.view(), PcaTarget::Components(m)).unwrap();
            for col in basis.components().columns() {
                let mut pivot = 0.0f64;
                for &v in col.iter() {
                    if v.abs() > pivot.abs() { pivot = v; }
                }
                prop_assert!(pivot >= 0.0);
            }
        }
    }
}
