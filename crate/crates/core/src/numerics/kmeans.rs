use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{ensure_finite, rng_from_seed};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { max_iter: 300, tol: 1e-4 }
    }
}

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    /// `k × d`
    pub centroids: Array2<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances from each sample to its assigned centroid.
    pub inertia: f64,
    /// Inertia after each assignment step, first to last.
    pub inertia_trace: Vec<f64>,
}

pub fn kmeans(samples: ArrayView2<'_, f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<Clustering> {
    kmeans_with(samples, k, seed, KMeansOptions { max_iter, tol })
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are refilled with
/// the point of the currently largest cluster that lies farthest from its
/// centroid.
pub fn kmeans_with(samples: ArrayView2<'_, f64>, k: usize, seed: u64, opts: KMeansOptions) -> Result<Clustering> {
    let (n, d) = samples.dim();
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} with {n} samples")));
    }
    if opts.max_iter == 0 {
        return Err(invalid("k-means needs at least one iteration"));
    }
    ensure_finite(&samples, "k-means samples")?;

    let norms: Array1<f64> = samples.map_axis(Axis(1), |r| r.dot(&r));
    let mut centroids = plus_plus_init(samples, k, seed);
    let mut assignment = vec![0usize; n];
    let mut trace: Vec<f64> = Vec::new();

    for iter in 0..opts.max_iter {
        assign(samples, &norms, &centroids, &mut assignment);
        refill_empty(samples, &mut centroids, &mut assignment);
        let inertia = inertia_of(samples, &centroids, &assignment);
        let prev = trace.last().copied();
        trace.push(inertia);
        if let Some(prev) = prev {
            if prev - inertia <= opts.tol * prev {
                break;
            }
        }
        if iter + 1 == opts.max_iter {
            break;
        }
        let updated = update_centroids(samples, &assignment, k, d);
        // A pure update step cannot increase inertia; keep the old centres if
        // roundoff says otherwise so the trace stays monotone.
        if inertia_of(samples, &updated, &assignment) <= inertia {
            centroids = updated;
        } else {
            break;
        }
    }

    let inertia = *trace.last().expect("at least one iteration");
    Ok(Clustering { k, centroids, assignment, inertia, inertia_trace: trace })
}

fn plus_plus_init(samples: ArrayView2<'_, f64>, k: usize, seed: u64) -> Array2<f64> {
    let (n, d) = samples.dim();
    let mut rng = rng_from_seed(seed);
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&samples.row(first));
    let mut best: Vec<f64> = samples.rows().into_iter().map(|r| row_sq_dist(r, samples.row(first))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining points coincide with chosen centres.
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&samples.row(pick));
        let centre = samples.row(pick);
        for (i, r) in samples.rows().into_iter().enumerate() {
            let dist = row_sq_dist(r, centre);
            if dist < best[i] {
                best[i] = dist;
            }
        }
    }
    centroids
}

fn row_sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(samples: ArrayView2<'_, f64>, norms: &Array1<f64>, centroids: &Array2<f64>, assignment: &mut [usize]) {
    let cnorms: Array1<f64> = centroids.map_axis(Axis(1), |r| r.dot(&r));
    let cross = samples.dot(&centroids.t());
    for (i, row) in cross.rows().into_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, &xc) in row.iter().enumerate() {
            let dist = norms[i] - 2.0 * xc + cnorms[j];
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        assignment[i] = best;
    }
}

fn refill_empty(samples: ArrayView2<'_, f64>, centroids: &mut Array2<f64>, assignment: &mut [usize]) {
    let k = centroids.nrows();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |b, j| if counts[j] > counts[b] { j } else { b });
        if counts[largest] < 2 {
            return;
        }
        let mut far = usize::MAX;
        let mut far_d = -1.0;
        for (i, &a) in assignment.iter().enumerate() {
            if a == largest {
                let dist = row_sq_dist(samples.row(i), centroids.row(largest));
                if dist > far_d {
                    far_d = dist;
                    far = i;
                }
            }
        }
        assignment[far] = empty;
        centroids.row_mut(empty).assign(&samples.row(far));
    }
}

fn inertia_of(samples: ArrayView2<'_, f64>, centroids: &Array2<f64>, assignment: &[usize]) -> f64 {
    samples.rows().into_iter().zip(assignment).map(|(r, &a)| row_sq_dist(r, centroids.row(a))).sum()
}

fn update_centroids(samples: ArrayView2<'_, f64>, assignment: &[usize], k: usize, d: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (r, &a) in samples.rows().into_iter().zip(assignment) {
        let mut s = sums.row_mut(a);
        s += &r;
        counts[a] += 1;
    }
    for (mut s, &c) in sums.rows_mut().into_iter().zip(&counts) {
        if c > 0 {
            s /= c as f64;
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn blobs() -> Array2<f64> {
        arr2(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [100.0, 100.0], [101.0, 100.0], [100.0, 101.0], [101.0, 101.0]])
    }

    fn partition_cost(x: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
        let mut cost = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..x.nrows()).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = Array1::<f64>::zeros(x.ncols());
            for &i in &members {
                mean += &x.row(i);
            }
            mean /= members.len() as f64;
            for &i in &members {
                cost += row_sq_dist(x.row(i), mean.view());
            }
        }
        cost
    }

    /// Exhaustive minimum-inertia 2-partition.
    fn brute_force_two(x: &Array2<f64>) -> (f64, Vec<usize>) {
        let n = x.nrows();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let cost = partition_cost(x, &labels, 2);
            if cost < best.0 {
                best = (cost, labels);
            }
        }
        best
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let x = blobs();
        let c = kmeans(x.view(), 1, 3, 300, 1e-4).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        assert!(row_sq_dist(c.centroids.row(0), mean.view()) < 1e-20);
    }

    #[test]
    fn two_blobs_match_brute_force() {
        let x = blobs();
        let (best_cost, best_labels) = brute_force_two(&x);
        for seed in 0..5 {
            let c = kmeans(x.view(), 2, seed, 300, 1e-4).unwrap();
            assert!((c.inertia - best_cost).abs() < 1e-9);
            // Same partition up to label permutation.
            let same = (0..8).all(|i| (c.assignment[i] == c.assignment[0]) == (best_labels[i] == best_labels[0]));
            assert!(same);
        }
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let x = blobs();
        let c = kmeans(x.view(), 8, 11, 300, 1e-4).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut seen = c.assignment.clone();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_k() {
        let x = blobs();
        assert!(kmeans(x.view(), 0, 0, 10, 1e-4).is_err());
        assert!(kmeans(x.view(), 9, 0, 10, 1e-4).is_err());
    }

    #[test]
    fn duplicate_points_keep_every_cluster_populated() {
        let x = arr2(&[[0.0], [0.0], [0.0], [0.0], [5.0]]);
        let c = kmeans(x.view(), 3, 1, 50, 1e-4).unwrap();
        for j in 0..3 {
            assert!(c.assignment.contains(&j));
        }
    }

    proptest! {
        #[test]
        fn deterministic_and_monotone(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..40),
            k in 1usize..4,
            seed in 0u64..1000,
        ) {
            prop_assume!(k <= pts.len());
            let x = Array2::from_shape_fn((pts.len(), 2), |(i, j)| if j == 0 { pts[i].0 } else { pts[i].1 });
            let a = kmeans(x.view(), k, seed, 300, 1e-4).unwrap();
            let b = kmeans(x.view(), k, seed, 300, 1e-4).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            prop_assert!(a.assignment.iter().all(|&j| j < k));
            let recomputed = inertia_of(x.view(), &a.centroids, &a.assignment);
            prop_assert!((recomputed - a.inertia).abs() <= 1e-9 * a.inertia.max(1.0));
        }
    }
}
