//! Lloyd's k-means with k-means++ seeding, plus the two cluster-quality
//! metrics used in reports: adjusted Rand index against a reference
//! partition and the mean silhouette coefficient.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    /// K x dim, row-major.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, k: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for c in 0..k {
        let d = sq_dist(x, &centroids[c * dim..(c + 1) * dim]);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centroid uniform, each next one drawn with
/// probability proportional to squared distance from the chosen set.
fn plus_plus_init(e: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * e.dim);
    let first = rng.gen_range(0..e.rows);
    centroids.extend_from_slice(e.row(first));
    let mut d2: Vec<f64> = (0..e.rows).map(|i| sq_dist(e.row(i), e.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = e.rows - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining mass at distance zero: duplicates of the
            // chosen set. Any point works; stay deterministic.
            rng.gen_range(0..e.rows)
        };
        centroids.extend_from_slice(e.row(pick));
        for i in 0..e.rows {
            let d = sq_dist(e.row(i), e.row(pick));
            if d < d2[i] {
                d2[i] = d;
            }
        }
        let _ = c;
    }
    centroids
}

/// Runs k-means until assignments stabilize or `max_iter` passes.
/// Ties go to the smallest centroid id; empty clusters are repaired by
/// seizing the point farthest from its own centroid.
pub fn kmeans(e: &EmbeddingMatrix, k: usize, seed: u64, max_iter: usize) -> Result<KmeansResult> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if k > e.rows {
        return Err(Error::config(format!("K = {k} exceeds {} points", e.rows)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(e, k, &mut rng);
    let mut assignments = vec![0usize; e.rows];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0usize;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        for i in 0..e.rows {
            let (c, _) = nearest(&centroids, e.dim, k, e.row(i));
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        // Repair empty clusters: each seizes the point currently
        // farthest from its assigned centroid, skipping singleton
        // donors so no new empties appear.
        let mut sizes = vec![0usize; k];
        for &c in &assignments {
            sizes[c] += 1;
        }
        let mut repaired = false;
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..e.rows)
                .filter(|&i| sizes[assignments[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(e.row(a), &centroids[assignments[a] * e.dim..(assignments[a] + 1) * e.dim]);
                    let db = sq_dist(e.row(b), &centroids[assignments[b] * e.dim..(assignments[b] + 1) * e.dim]);
                    da.partial_cmp(&db).unwrap()
                })
                .ok_or_else(|| Error::numeric("cannot repair empty cluster"))?;
            sizes[assignments[far]] -= 1;
            assignments[far] = c;
            sizes[c] = 1;
            repaired = true;
            changed = true;
        }
        let mut sums = vec![0.0f64; k * e.dim];
        for i in 0..e.rows {
            let c = assignments[i];
            for (j, &v) in e.row(i).iter().enumerate() {
                sums[c * e.dim + j] += v;
            }
        }
        for c in 0..k {
            for j in 0..e.dim {
                centroids[c * e.dim + j] = sums[c * e.dim + j] / sizes[c] as f64;
            }
        }
        let inertia: f64 = (0..e.rows)
            .map(|i| sq_dist(e.row(i), &centroids[assignments[i] * e.dim..(assignments[i] + 1) * e.dim]))
            .sum();
        // Lloyd steps cannot raise the objective; a repair is a
        // discrete jump that resets the baseline.
        if !repaired {
            assert!(
                inertia <= prev_inertia + 1e-9 * prev_inertia.max(1.0),
                "inertia rose: {inertia} > {prev_inertia}"
            );
        }
        prev_inertia = inertia;
        if !changed {
            break;
        }
    }
    Ok(KmeansResult { assignments, centroids, dim: e.dim, inertia: prev_inertia, iterations })
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
/// 1 means identical partitions (up to relabeling), 0 is chance level.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let ka = a.iter().max().map_or(0, |&m| m + 1);
    let kb = b.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![0.0f64; ka * kb];
    let mut rows = vec![0.0f64; ka];
    let mut cols = vec![0.0f64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1.0;
        rows[x] += 1.0;
        cols[y] += 1.0;
    }
    let index: f64 = table.iter().map(|&n| choose2(n)).sum();
    let row_sum: f64 = rows.iter().map(|&n| choose2(n)).sum();
    let col_sum: f64 = cols.iter().map(|&n| choose2(n)).sum();
    let total = choose2(a.len() as f64);
    let expected = row_sum * col_sum / total;
    let max_index = 0.5 * (row_sum + col_sum);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max_index - expected)
}

/// Mean silhouette coefficient over all points, Euclidean distance.
/// Points in singleton clusters score 0; a single-cluster labeling
/// scores 0 overall.
pub fn silhouette(e: &EmbeddingMatrix, assignments: &[usize]) -> f64 {
    assert_eq!(assignments.len(), e.rows, "one assignment per row");
    let k = assignments.iter().max().map_or(0, |&m| m + 1);
    if k < 2 || e.rows < 2 {
        return 0.0;
    }
    let mut sizes = vec![0usize; k];
    for &c in assignments {
        sizes[c] += 1;
    }
    let mut total = 0.0;
    for i in 0..e.rows {
        let ci = assignments[i];
        if sizes[ci] <= 1 {
            continue;
        }
        let mut sums = vec![0.0f64; k];
        for j in 0..e.rows {
            if j == i {
                continue;
            }
            sums[assignments[j]] += sq_dist(e.row(i), e.row(j)).sqrt();
        }
        let a = sums[ci] / (sizes[ci] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != ci && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / e.rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::EmbedMethod;
    use crate::util::randn_vec;
    use rand::SeedableRng;

    fn matrix(data: Vec<f64>, dim: usize) -> EmbeddingMatrix {
        let rows = data.len() / dim;
        EmbeddingMatrix { rows, dim, data, method: EmbedMethod::TfIdf }
    }

    fn blobs(per: usize, centers: &[(f64, f64)], std: f64, seed: u64) -> (EmbeddingMatrix, Vec<usize>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for (c, &(x, y)) in centers.iter().enumerate() {
            for _ in 0..per {
                let noise = randn_vec(&mut rng, 2, std);
                data.push(x + noise[0]);
                data.push(y + noise[1]);
                truth.push(c);
            }
        }
        (matrix(data, 2), truth)
    }

    #[test]
    fn k_one_puts_everything_in_cluster_zero() {
        let (e, _) = blobs(20, &[(0.0, 0.0), (5.0, 5.0)], 0.3, 1);
        let r = kmeans(&e, 1, 0, 50).unwrap();
        assert!(r.assignments.iter().all(|&c| c == 0));
        // Inertia of one cluster is the total squared deviation from
        // the mean, computed independently here.
        let n = e.rows as f64;
        let mean: Vec<f64> =
            (0..2).map(|j| (0..e.rows).map(|i| e.row(i)[j]).sum::<f64>() / n).collect();
        let expect: f64 = (0..e.rows)
            .map(|i| e.row(i).iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum();
        assert!((r.inertia - expect).abs() < 1e-9 * expect.max(1.0));
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (e, truth) = blobs(60, &[(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)], 0.2, 7);
        let r = kmeans(&e, 3, 11, 100).unwrap();
        let ari = adjusted_rand_index(&r.assignments, &truth);
        assert!(ari > 0.99, "ARI {ari}");
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let (e, _) = blobs(40, &[(0.0, 0.0), (4.0, 1.0)], 0.5, 3);
        let a = kmeans(&e, 4, 9, 100).unwrap();
        let b = kmeans(&e, 4, 9, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        let (e, _) = blobs(2, &[(0.0, 0.0)], 0.1, 0);
        assert!(kmeans(&e, 3, 0, 10).is_err());
        assert!(kmeans(&e, 0, 0, 10).is_err());
    }

    #[test]
    fn duplicate_heavy_data_still_fills_every_cluster() {
        // 30 copies of one point and two outliers: ++ init lands on
        // duplicates, so repair has to populate the empty clusters.
        let mut data = vec![1.0, 1.0].repeat(30);
        data.extend([8.0, 8.0, -6.0, 3.0]);
        let e = matrix(data, 2);
        let r = kmeans(&e, 3, 2, 50).unwrap();
        let mut sizes = vec![0usize; 3];
        for &c in &r.assignments {
            sizes[c] += 1;
        }
        assert!(sizes.iter().all(|&s| s > 0), "{sizes:?}");
    }

    #[test]
    fn rand_index_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!((v - -0.5).abs() < 1e-12, "{v}");
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]), 1.0);
    }

    #[test]
    fn silhouette_of_tight_far_blobs_is_high() {
        let (e, truth) = blobs(30, &[(0.0, 0.0), (10.0, 0.0)], 0.1, 5);
        let s = silhouette(&e, &truth);
        assert!(s > 0.9, "silhouette {s}");
        let one_cluster = vec![0usize; e.rows];
        assert_eq!(silhouette(&e, &one_cluster), 0.0);
    }

    #[test]
    fn silhouette_penalizes_a_shuffled_labeling() {
        let (e, truth) = blobs(30, &[(0.0, 0.0), (10.0, 0.0)], 0.1, 6);
        let good = silhouette(&e, &truth);
        let bad_labels: Vec<usize> = (0..e.rows).map(|i| i % 2).collect();
        let bad = silhouette(&e, &bad_labels);
        assert!(good > bad + 0.5, "good {good} bad {bad}");
    }
}
