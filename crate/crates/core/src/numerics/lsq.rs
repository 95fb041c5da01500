use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::ensure_finite;
use crate::error::{invalid, shape_err, Error, Result};

/// Ridge damping relative to the mean diagonal of the bias-augmented Gram
/// matrix.
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-6;

/// Affine map `x ↦ W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// `out_dim × in_dim`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearMap {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(shape_err(format!("weights have {} rows but bias has {} entries", weights.nrows(), bias.len())));
        }
        ensure_finite(&weights.view(), "linear map weights")?;
        if !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("linear map bias"));
        }
        Ok(Self { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Applies the map to every row of `inputs`.
    pub fn apply(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.in_dim() {
            return Err(shape_err(format!("{}-dim inputs into a map expecting {}", inputs.ncols(), self.in_dim())));
        }
        let mut out = inputs.dot(&self.weights.t());
        out += &self.bias.view().insert_axis(Axis(0));
        Ok(out)
    }
}

/// Least-squares affine fit with the default ridge damping.
pub fn least_squares_fit(inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<LinearMap> {
    least_squares_fit_with(inputs, targets, DEFAULT_RIDGE_SCALE)
}

/// Minimises `Σ‖W·x + b − t‖²` through the normal equations of the
/// bias-augmented inputs, damped by `ridge_scale · trace(G) / dim(G)` on the
/// diagonal. The damping must be positive.
pub fn least_squares_fit_with(inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, ridge_scale: f64) -> Result<LinearMap> {
    let (n, k_in) = inputs.dim();
    if n == 0 {
        return Err(Error::Degenerate("least squares on zero samples".into()));
    }
    if targets.nrows() != n {
        return Err(shape_err(format!("{n} input rows but {} target rows", targets.nrows())));
    }
    if !(ridge_scale > 0.0 && ridge_scale.is_finite()) {
        return Err(invalid(format!("ridge scale must be positive, got {ridge_scale}")));
    }
    ensure_finite(&inputs, "least-squares inputs")?;
    ensure_finite(&targets, "least-squares targets")?;
    let k_out = targets.ncols();
    let dim = k_in + 1;

    // Augmented Gram [XᵀX Xᵀ1; 1ᵀX n] and right-hand side [XᵀT; 1ᵀT].
    let mut gram = Array2::<f64>::zeros((dim, dim));
    gram.slice_mut(s![..k_in, ..k_in]).assign(&inputs.t().dot(&inputs));
    let col_sums = inputs.sum_axis(Axis(0));
    gram.slice_mut(s![..k_in, k_in]).assign(&col_sums);
    gram.slice_mut(s![k_in, ..k_in]).assign(&col_sums);
    gram[[k_in, k_in]] = n as f64;

    let mut rhs = Array2::<f64>::zeros((dim, k_out));
    rhs.slice_mut(s![..k_in, ..]).assign(&inputs.t().dot(&targets));
    rhs.slice_mut(s![k_in, ..]).assign(&targets.sum_axis(Axis(0)));

    let trace: f64 = gram.diag().sum();
    let lambda = ridge_scale * trace / dim as f64;
    for i in 0..dim {
        gram[[i, i]] += lambda;
    }

    let solution = solve_spd(&gram, &rhs)?;
    let weights = solution.slice(s![..k_in, ..]).t().to_owned();
    let bias = solution.row(k_in).to_owned();
    LinearMap::new(weights, bias)
}

fn solve_spd(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let dim = a.nrows();
    let am = nalgebra::DMatrix::from_fn(dim, dim, |i, j| a[[i, j]]);
    let bm = nalgebra::DMatrix::from_fn(dim, b.ncols(), |i, j| b[[i, j]]);
    let x = match am.clone().cholesky() {
        Some(ch) => ch.solve(&bm),
        None => am.lu().solve(&bm).ok_or_else(|| Error::Numerical("normal equations are singular".into()))?,
    };
    Ok(Array2::from_shape_fn((dim, b.ncols()), |(i, j)| x[(i, j)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn residual(map: &LinearMap, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
        let pred = map.apply(x.view()).unwrap();
        (&pred - t).mapv(|v| v * v).sum()
    }

    /// Undamped normal equations solved by Gauss–Jordan elimination with
    /// partial pivoting on the explicitly augmented design matrix.
    fn oracle(x: &Array2<f64>, t: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let (n, k) = x.dim();
        let mut a = Array2::<f64>::ones((n, k + 1));
        a.slice_mut(s![.., ..k]).assign(x);
        let g = a.t().dot(&a);
        let r = a.t().dot(t);
        let m = k + 1;
        let cols = t.ncols();
        let mut aug = Array2::<f64>::zeros((m, m + cols));
        aug.slice_mut(s![.., ..m]).assign(&g);
        aug.slice_mut(s![.., m..]).assign(&r);
        for col in 0..m {
            let piv = (col..m).max_by(|&i, &j| aug[[i, col]].abs().partial_cmp(&aug[[j, col]].abs()).unwrap()).unwrap();
            for c in 0..m + cols {
                let tmp = aug[[col, c]];
                aug[[col, c]] = aug[[piv, c]];
                aug[[piv, c]] = tmp;
            }
            let p = aug[[col, col]];
            for c in 0..m + cols {
                aug[[col, c]] /= p;
            }
            for row in 0..m {
                if row != col {
                    let f = aug[[row, col]];
                    for c in 0..m + cols {
                        aug[[row, c]] -= f * aug[[col, c]];
                    }
                }
            }
        }
        let sol = aug.slice(s![.., m..]).to_owned();
        (sol.slice(s![..k, ..]).t().to_owned(), sol.row(k).to_owned())
    }

    #[test]
    fn identity_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((40, 4), |_| rng.random_range(-1.0..1.0));
        let map = least_squares_fit_with(x.view(), x.view(), 1e-14).unwrap();
        let eye = Array2::<f64>::eye(4);
        assert!((&map.weights - &eye).iter().all(|v| v.abs() < 1e-6));
        assert!(map.bias.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn hand_solved_line() {
        // t = 2x + 1 through (0,1), (1,3), (2,5).
        let x = arr2(&[[0.0], [1.0], [2.0]]);
        let t = arr2(&[[1.0], [3.0], [5.0]]);
        let map = least_squares_fit(x.view(), t.view()).unwrap();
        assert!((map.weights[[0, 0]] - 2.0).abs() < 1e-5);
        assert!((map.bias[0] - 1.0).abs() < 1e-5);
        let exact = least_squares_fit_with(x.view(), t.view(), 1e-15).unwrap();
        assert!((exact.weights[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((exact.bias[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_matches_gram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Array2::from_shape_fn((20, 5), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0));
        let map = least_squares_fit(x.view(), t.view()).unwrap();
        let (w, b) = oracle(&x, &t);
        let reference = LinearMap::new(w, b).unwrap();
        let r_fit = residual(&map, &x, &t);
        let r_ref = residual(&reference, &x, &t);
        assert!((r_fit - r_ref).abs() < 1e-8, "{r_fit} vs {r_ref}");
    }

    #[test]
    fn rank_deficient_system_is_damped() {
        // Duplicate columns make the undamped Gram singular.
        let x = arr2(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        let t = arr2(&[[1.0], [0.0], [1.0]]);
        let map = least_squares_fit(x.view(), t.view()).unwrap();
        assert!(map.weights.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_and_zero_ridge_rejected() {
        let x = arr2(&[[f64::NAN], [1.0]]);
        let t = arr2(&[[1.0], [0.0]]);
        assert!(matches!(least_squares_fit(x.view(), t.view()), Err(Error::NonFinite(_))));
        let x = arr2(&[[0.0], [1.0]]);
        assert!(least_squares_fit_with(x.view(), t.view(), 0.0).is_err());
        assert!(least_squares_fit(x.view(), arr2(&[[1.0]]).view()).is_err());
    }

    #[test]
    fn local_optimality_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((30, 4), |_| rng.random_range(-2.0..2.0));
        let t = Array2::from_shape_fn((30, 2), |_| rng.random_range(-1.0..1.0));
        let map = least_squares_fit(x.view(), t.view()).unwrap();
        let base = residual(&map, &x, &t);
        let zero = LinearMap::new(Array2::zeros((2, 4)), Array1::zeros(2)).unwrap();
        assert!(base <= residual(&zero, &x, &t));
        for _ in 0..100 {
            let dw = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1e-3..1e-3));
            let db = Array1::from_shape_fn(2, |_| rng.random_range(-1e-3..1e-3));
            let p = LinearMap::new(&map.weights + &dw, &map.bias + &db).unwrap();
            assert!(base <= residual(&p, &x, &t) + 1e-12);
        }
    }

    #[test]
    fn nested_solves_residual_monotone() {
        // Growing the input set by columns can only lower the fitted residual.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((60, 6), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((60, 2), |_| rng.random_range(-1.0..1.0));
        let mut last = f64::INFINITY;
        for k in 1..=6 {
            let xs = x.slice(s![.., ..k]).to_owned();
            let map = least_squares_fit(xs.view(), t.view()).unwrap();
            let r = residual(&map, &xs, &t);
            assert!(r <= last + 1e-9);
            last = r;
        }
    }
}
