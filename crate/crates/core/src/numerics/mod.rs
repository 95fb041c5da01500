//! Dense linear-algebra and clustering primitives shared by every stage of
//! the pipeline. All fits are single-threaded and deterministic given their
//! inputs and seed.

mod kmeans;
mod lsq;
mod pca;

pub use kmeans::{kmeans, kmeans_with, Clustering, KMeansOptions};
pub use lsq::{least_squares_fit, least_squares_fit_with, LinearMap, DEFAULT_RIDGE_SCALE};
pub use pca::{fit_pca, CovarianceAccumulator, PcaBasis, PcaTarget};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major sample matrix: one sample per row.
pub type Matrix = Array2<f64>;

/// Mixes a base seed with a stream index so that independent consumers of a
/// single user seed draw from decorrelated generators.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn ensure_finite(m: &ArrayView2<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Eigendecomposition of a symmetric matrix, eigenpairs sorted by descending
/// eigenvalue. Eigenvectors are the columns of the returned matrix.
pub(crate) fn symmetric_eigen_desc(sym: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let d = sym.nrows();
    if d != sym.ncols() {
        return Err(crate::error::shape_err("eigendecomposition needs a square matrix"));
    }
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (sym[[i, j]] + sym[[j, i]]));
    let eig = nalgebra::SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Array2::from_shape_fn((d, d), |(r, c)| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        let a = derive_seed(0, 0);
        let b = derive_seed(0, 1);
        let c = derive_seed(1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(0, 0));
    }

    #[test]
    fn eigen_of_diagonal_is_sorted() {
        let m = ndarray::arr2(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]);
        let (vals, vecs) = symmetric_eigen_desc(&m).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
        assert!((vecs[[1, 0]].abs() - 1.0).abs() < 1e-12);
    }
}
