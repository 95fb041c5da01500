//! RBF soft-margin SVM trained by SMO with second-order working-set
//! selection, one-vs-one multiclass voting and simplex-valued class scores.

use std::collections::{HashMap, VecDeque};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::ensure_finite;

/// Full kernel matrices up to this size are precomputed; larger problems
/// fall back to a row cache of the same size.
pub const KERNEL_BUDGET_BYTES: usize = 1_500_000_000;

const TAU: f64 = 1e-12;
const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    /// Box constraint.
    pub c: f64,
    /// RBF width; `None` selects `1 / (d · var(X))` on standardized inputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Tolerance on the maximal KKT violation.
    pub tol: f64,
    /// Iteration cap per binary problem, in multiples of its sample count.
    pub max_passes: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self { c: 1.0, gamma: None, tol: 1e-3, max_passes: 1000 }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(invalid(format!("SVM C must be positive, got {}", self.c)));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(invalid(format!("SVM gamma must be positive, got {g}")));
            }
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(invalid(format!("SVM tolerance must be positive, got {}", self.tol)));
        }
        if self.max_passes == 0 {
            return Err(invalid("SVM max_passes must be at least 1"));
        }
        Ok(())
    }
}

/// Binary classifier between `positive` (decision > 0) and `negative`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairModel {
    pub positive: usize,
    pub negative: usize,
    /// Rows of [`SvmModel::support`] used by this pair.
    pub support_indices: Vec<usize>,
    /// `α_i · y_i` for each support vector.
    pub coef: Vec<f64>,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub class_count: usize,
    pub c: f64,
    pub gamma: f64,
    pub tol: f64,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    /// Standardized support vectors shared by all pairs.
    pub support: Array2<f64>,
    pub pairs: Vec<PairModel>,
}

/// Outcome of one binary SMO solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySolution {
    pub alpha: Vec<f64>,
    /// Decision is `Σ α_i y_i k(x_i, x) + intercept`.
    pub intercept: f64,
    pub iterations: usize,
    /// Largest KKT violation `m(α) − M(α)` at exit.
    pub kkt_gap: f64,
}

impl BinarySolution {
    /// Dual objective `Σα − ½ αᵀQα`.
    pub fn dual_objective(&self, kernel: ArrayView2<'_, f64>, y: &[f64]) -> f64 {
        dual_objective(&self.alpha, kernel, y)
    }
}

pub fn dual_objective(alpha: &[f64], kernel: ArrayView2<'_, f64>, y: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * kernel[[i, j]];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

pub fn rbf(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d).exp()
}

/// `K[i, j] = exp(−γ‖a_i − b_j‖²)`.
pub fn rbf_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, gamma: f64) -> Array2<f64> {
    let an: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let bn: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut k = a.dot(&b.t());
    k.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, mut row)| {
        for (j, v) in row.iter_mut().enumerate() {
            let d = (an[i] + bn[j] - 2.0 * *v).max(0.0);
            *v = (-gamma * d).exp();
        }
    });
    k
}

/// Access to kernel rows of one binary problem.
trait KernelRows {
    fn row(&mut self, i: usize) -> std::rc::Rc<Vec<f64>>;
    fn diag(&self, i: usize) -> f64;
}

struct DenseKernel {
    rows: Vec<std::rc::Rc<Vec<f64>>>,
}

impl DenseKernel {
    fn new(x: ArrayView2<'_, f64>, gamma: f64) -> Self {
        const BLOCK: usize = 256;
        let n = x.nrows();
        let blocks: Vec<Vec<Vec<f64>>> = (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let rows = x.slice(s![b * BLOCK..((b + 1) * BLOCK).min(n), ..]);
                rbf_matrix(rows, x, gamma).rows().into_iter().map(|r| r.to_vec()).collect()
            })
            .collect();
        Self { rows: blocks.into_iter().flatten().map(std::rc::Rc::new).collect() }
    }
}

impl KernelRows for DenseKernel {
    fn row(&mut self, i: usize) -> std::rc::Rc<Vec<f64>> {
        self.rows[i].clone()
    }

    fn diag(&self, i: usize) -> f64 {
        self.rows[i][i]
    }
}

struct CachedKernel<'a> {
    x: ArrayView2<'a, f64>,
    norms: Vec<f64>,
    gamma: f64,
    capacity: usize,
    cache: HashMap<usize, std::rc::Rc<Vec<f64>>>,
    order: VecDeque<usize>,
}

impl<'a> CachedKernel<'a> {
    fn new(x: ArrayView2<'a, f64>, gamma: f64, budget: usize) -> Self {
        let n = x.nrows();
        Self {
            x,
            norms: x.rows().into_iter().map(|r| r.dot(&r)).collect(),
            gamma,
            capacity: (budget / (8 * n.max(1))).max(2),
            cache: HashMap::new(),
            order: VecDeque::new(),
        }
    }
}

impl KernelRows for CachedKernel<'_> {
    fn row(&mut self, i: usize) -> std::rc::Rc<Vec<f64>> {
        if let Some(r) = self.cache.get(&i) {
            let r = r.clone();
            if let Some(pos) = self.order.iter().position(|&k| k == i) {
                self.order.remove(pos);
            }
            self.order.push_back(i);
            return r;
        }
        let xi = self.x.row(i);
        let dots = self.x.dot(&xi);
        let ni = self.norms[i];
        let row: Vec<f64> = dots.iter().zip(&self.norms).map(|(&d, &nj)| (-self.gamma * (ni + nj - 2.0 * d).max(0.0)).exp()).collect();
        let row = std::rc::Rc::new(row);
        if self.cache.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.cache.remove(&old);
            }
        }
        self.cache.insert(i, row.clone());
        self.order.push_back(i);
        row
    }

    fn diag(&self, _i: usize) -> f64 {
        1.0
    }
}

/// Solves the binary C-SVM dual for labels `y ∈ {+1, −1}` on rows of `x`.
pub fn solve_binary(x: ArrayView2<'_, f64>, y: &[f64], c: f64, gamma: f64, tol: f64, max_iter: usize) -> Result<BinarySolution> {
    let n = x.nrows();
    if y.len() != n {
        return Err(shape_err(format!("{n} samples but {} labels", y.len())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(invalid("binary labels must be +1 or −1"));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::Degenerate("binary SVM needs both classes".into()));
    }
    if n.saturating_mul(n).saturating_mul(8) <= KERNEL_BUDGET_BYTES {
        smo(&mut DenseKernel::new(x, gamma), y, c, tol, max_iter)
    } else {
        smo(&mut CachedKernel::new(x, gamma, KERNEL_BUDGET_BYTES), y, c, tol, max_iter)
    }
}

/// Solves the binary dual for an explicit kernel matrix.
pub fn solve_binary_kernel(kernel: ArrayView2<'_, f64>, y: &[f64], c: f64, tol: f64, max_iter: usize) -> Result<BinarySolution> {
    let mut k = DenseKernel { rows: kernel.rows().into_iter().map(|r| std::rc::Rc::new(r.to_vec())).collect() };
    smo(&mut k, y, c, tol, max_iter)
}

fn in_up(a: f64, y: f64, c: f64) -> bool {
    (y > 0.0 && a < c) || (y < 0.0 && a > 0.0)
}

fn in_low(a: f64, y: f64, c: f64) -> bool {
    (y > 0.0 && a > 0.0) || (y < 0.0 && a < c)
}

fn smo<K: KernelRows>(k: &mut K, y: &[f64], c: f64, tol: f64, max_iter: usize) -> Result<BinarySolution> {
    let n = y.len();
    let mut alpha = vec![0.0f64; n];
    // Gradient of ½αᵀQα − eᵀα.
    let mut grad = vec![-1.0f64; n];
    let mut iterations = 0;
    let mut gap;
    loop {
        // i maximises −y_t ∇_t over I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t], c) && v > gmax {
                gmax = v;
                i = t;
            }
            if in_low(alpha[t], y[t], c) && v < gmin {
                gmin = v;
            }
        }
        gap = gmax - gmin;
        if i == usize::MAX || gap <= tol || iterations >= max_iter {
            break;
        }
        let ki = k.row(i);
        let kii = k.diag(i);
        // j minimises the second-order decrease −b²/a over I_low.
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !in_low(alpha[t], y[t], c) {
                continue;
            }
            let v = -y[t] * grad[t];
            let b = gmax - v;
            if b > 0.0 {
                let a = (kii + k.diag(t) - 2.0 * ki[t]).max(TAU);
                let score = -(b * b) / a;
                if score < best {
                    best = score;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            break;
        }
        let kj = k.row(j);
        let kjj = k.diag(j);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (kii + kjj - 2.0 * ki[j]).max(TAU);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
        iterations += 1;
    }
    if iterations >= max_iter && gap > tol {
        log::warn!("SMO stopped after {iterations} iterations with KKT gap {gap:.3e}");
    }
    let intercept = -rho(&alpha, &grad, y, c);
    Ok(BinarySolution { alpha, intercept, iterations, kkt_gap: gap.max(0.0) })
}

fn rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut free = 0usize;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    if free > 0 {
        sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// Per-feature standardization statistics; constant features get scale 1.
fn standardizer(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let scale = x.var_axis(Axis(0), 0.0).mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    (mean, scale)
}

fn standardize(x: ArrayView2<'_, f64>, mean: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    (&x - &mean.view().insert_axis(Axis(0))) / scale.view().insert_axis(Axis(0))
}

pub fn fit_svm(x: ArrayView2<'_, f64>, labels: &[usize], class_count: usize, params: &SvmParams) -> Result<SvmModel> {
    params.validate()?;
    let (n, d) = x.dim();
    if labels.len() != n {
        return Err(shape_err(format!("{n} samples but {} labels", labels.len())));
    }
    if d == 0 {
        return Err(Error::Degenerate("SVM on zero-dimensional features".into()));
    }
    ensure_finite(&x, "SVM features")?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(invalid(format!("label {bad} with {class_count} classes")));
    }
    let mut members = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let present: Vec<usize> = (0..class_count).filter(|&c| !members[c].is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::Degenerate(format!("SVM needs at least 2 classes, found {}", present.len())));
    }
    let (mean, scale) = standardizer(x);
    let xs = standardize(x, &mean, &scale);
    let gamma = match params.gamma {
        Some(g) => g,
        None => {
            let var = xs.var(0.0);
            if var > 0.0 {
                1.0 / (d as f64 * var)
            } else {
                1.0 / d as f64
            }
        }
    };

    let mut used: Vec<Option<usize>> = vec![None; n];
    let mut support_rows: Vec<usize> = Vec::new();
    let mut pairs = Vec::new();
    for (pi, &a) in present.iter().enumerate() {
        for &b in &present[pi + 1..] {
            let mut idx: Vec<usize> = members[a].iter().chain(&members[b]).copied().collect();
            idx.sort_unstable();
            let sub = xs.select(Axis(0), &idx);
            let y: Vec<f64> = idx.iter().map(|&i| if labels[i] == a { 1.0 } else { -1.0 }).collect();
            let max_iter = params.max_passes.saturating_mul(idx.len().max(100));
            let sol = solve_binary(sub.view(), &y, params.c, gamma, params.tol, max_iter)?;
            let mut support_indices = Vec::new();
            let mut coef = Vec::new();
            for (t, &al) in sol.alpha.iter().enumerate() {
                if al > 0.0 {
                    let g = idx[t];
                    let slot = *used[g].get_or_insert_with(|| {
                        support_rows.push(g);
                        support_rows.len() - 1
                    });
                    support_indices.push(slot);
                    coef.push(al * y[t]);
                }
            }
            log::debug!("SVM pair ({a},{b}): {} samples, {} SVs, {} iterations", idx.len(), coef.len(), sol.iterations);
            pairs.push(PairModel { positive: a, negative: b, support_indices, coef, intercept: sol.intercept });
        }
    }
    let support = xs.select(Axis(0), &support_rows);
    Ok(SvmModel { class_count, c: params.c, gamma, tol: params.tol, mean, scale, support, pairs })
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Classes that took part in training.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.pairs.iter().flat_map(|p| [p.positive, p.negative]).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Pairwise decision values, `n × pairs`.
    pub fn pair_decisions(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(shape_err(format!("{}-dim inputs into a {}-dim SVM", x.ncols(), self.dim())));
        }
        ensure_finite(&x, "SVM inputs")?;
        let n = x.nrows();
        let mut out = Array2::<f64>::zeros((n, self.pairs.len()));
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let xs = standardize(x.slice(s![start..end, ..]), &self.mean, &self.scale);
            let k = rbf_matrix(xs.view(), self.support.view(), self.gamma);
            for (p, pair) in self.pairs.iter().enumerate() {
                for (r, krow) in k.rows().into_iter().enumerate() {
                    let mut f = pair.intercept;
                    for (&sv, &cf) in pair.support_indices.iter().zip(&pair.coef) {
                        f += cf * krow[sv];
                    }
                    out[[start + r, p]] = f;
                }
            }
        }
        Ok(out)
    }

    /// Votes and mean oriented margin per class for one sample.
    fn tally(&self, f: ArrayView1<'_, f64>) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let c = self.class_count;
        let mut votes = vec![0.0; c];
        let mut margin = vec![0.0; c];
        let mut involved = vec![0usize; c];
        for (pair, &v) in self.pairs.iter().zip(f.iter()) {
            if v > 0.0 {
                votes[pair.positive] += 1.0;
            } else {
                votes[pair.negative] += 1.0;
            }
            margin[pair.positive] += v;
            margin[pair.negative] -= v;
            involved[pair.positive] += 1;
            involved[pair.negative] += 1;
        }
        (votes, margin, involved)
    }

    /// One-vs-one vote; ties go to the larger summed margin, then to the
    /// lowest class index.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let f = self.pair_decisions(x)?;
        Ok(f.rows()
            .into_iter()
            .map(|row| {
                let (votes, margin, involved) = self.tally(row);
                let mut best = usize::MAX;
                for c in 0..self.class_count {
                    if involved[c] == 0 {
                        continue;
                    }
                    if best == usize::MAX || votes[c] > votes[best] || (votes[c] == votes[best] && margin[c] > margin[best]) {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Class scores on the probability simplex: votes plus `10⁻³·σ(mean
    /// margin)`, normalized. With two classes the scores are `σ(f)` and
    /// `1 − σ(f)`.
    pub fn decision_scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let f = self.pair_decisions(x)?;
        let mut out = Array2::<f64>::zeros((x.nrows(), self.class_count));
        for (row, mut dst) in f.rows().into_iter().zip(out.rows_mut()) {
            if self.pairs.len() == 1 {
                let p = &self.pairs[0];
                let s = sigmoid(row[0]);
                dst[p.positive] = s;
                dst[p.negative] = 1.0 - s;
                continue;
            }
            let (votes, margin, involved) = self.tally(row);
            let mut total = 0.0;
            for c in 0..self.class_count {
                if involved[c] > 0 {
                    dst[c] = votes[c] + 1e-3 * sigmoid(margin[c] / involved[c] as f64);
                    total += dst[c];
                }
            }
            dst.mapv_inplace(|v| v / total);
        }
        Ok(out)
    }
}

pub fn predict_svm(model: &SvmModel, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    model.predict(x)
}

pub fn decision_scores(model: &SvmModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    model.decision_scores(x)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
