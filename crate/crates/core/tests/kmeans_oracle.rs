//! k-means against an exhaustive search over all partitions of tiny point
//! sets.

use coarse_core::cluster::{kmeans, lloyd, KMeansConfig};
use coarse_core::numerics::{sq_dist, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best partition into exactly `k` nonempty clusters: `(objective, centroids)`.
fn oracle(points: &Matrix, k: usize) -> (f64, Matrix) {
    let n = points.rows();
    let d = points.cols();
    let mut best = (f64::INFINITY, Matrix::zeros(k, d));
    let total = k.pow(n as u32);
    let mut assignment = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for a in assignment.iter_mut() {
            *a = c % k;
            c /= k;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            continue;
        }
        for (p, &cnt) in counts.iter().enumerate() {
            sums.row_mut(p).iter_mut().for_each(|v| *v /= cnt as f64);
        }
        let obj: f64 = assignment
            .iter()
            .enumerate()
            .map(|(i, &a)| sq_dist(points.row(i), sums.row(a)))
            .sum();
        if obj < best.0 {
            best = (obj, sums);
        }
    }
    best
}

#[test]
fn lloyd_never_beats_the_oracle_and_keeps_its_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=3.min(n));
        let d = rng.random_range(1..4);
        let points = Matrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
        let (best, centroids) = oracle(&points, k);
        let tol = 1e-9 * best.max(1.0);

        let (membership, _) = kmeans(&points, &KMeansConfig::new(k, trial), None).unwrap();
        assert!(membership.objective >= best - tol, "trial {trial}: below oracle");

        let run = lloyd(&points, centroids, 100, 0.0).unwrap();
        assert!((run.objective - best).abs() <= tol, "trial {trial}: {} vs {best}", run.objective);

        let mut seeded = ChaCha8Rng::seed_from_u64(trial);
        let init = Matrix::from_fn(k, d, |_, _| seeded.random_range(-3.0..3.0));
        let run = lloyd(&points, init, 100, 0.0).unwrap();
        assert!(run.objective >= best - tol);
        for w in run.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0), "trial {trial}: {:?}", run.history);
        }
    }
}

#[test]
fn within_coarse_clusters_respect_coarse_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let points = Matrix::from_fn(30, 2, |_, _| rng.random_range(-1.0..1.0));
    let (m, _) = kmeans(&points, &KMeansConfig::new(6, 1), Some(&labels)).unwrap();
    assert!(m.within_coarse);
    let mut owner = vec![None; 6];
    for (i, &c) in m.assignment.iter().enumerate() {
        let prev = owner[c].replace(labels[i]);
        assert!(prev.is_none_or(|p| p == labels[i]), "cluster {c} spans coarse classes");
    }
    assert!(m.sizes().iter().all(|&s| s > 0));
}
