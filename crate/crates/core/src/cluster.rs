//! k-means over instance-head columns, producing the membership `μ` and the
//! proxy matrix `W^P` (cluster means of `W^I`).
//!
//! Points are rows of a `Matrix`: row `i` is column `w_i^I` of the instance
//! head. Clustering can run globally or independently inside each coarse
//! class, in which case a global cluster budget is split across classes by
//! largest-remainder apportionment and cluster ids are offset per class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::group_by_label;
use crate::error::{invalid, Error, Result};
use crate::numerics::{l2_normalize, sq_dist, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    /// Cluster id of every instance, in `[0, num_clusters)`.
    pub assignment: Vec<usize>,
    pub num_clusters: usize,
    pub within_coarse: bool,
    /// `Σ_i ‖w_i − mean(cluster(i))‖²`.
    pub objective: f64,
}

impl Membership {
    /// Builds a membership for `points` and computes its objective.
    pub fn from_assignment(
        points: &Matrix,
        assignment: Vec<usize>,
        num_clusters: usize,
        within_coarse: bool,
    ) -> Result<Self> {
        if assignment.len() != points.rows() {
            return Err(invalid(format!(
                "{} assignments for {} points",
                assignment.len(),
                points.rows()
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&a| a >= num_clusters) {
            return Err(invalid(format!("cluster id {bad} >= P = {num_clusters}")));
        }
        let centroids = cluster_means(points, &assignment, num_clusters)?;
        let objective = sse(points, &assignment, &centroids);
        Ok(Self {
            assignment,
            num_clusters,
            within_coarse,
            objective,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_clusters];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

fn cluster_means(points: &Matrix, assignment: &[usize], k: usize) -> Result<Matrix> {
    let d = points.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCluster(empty));
    }
    for (p, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        sums.row_mut(p).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(sums)
}

fn sse(points: &Matrix, assignment: &[usize], centroids: &Matrix) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row(i), centroids.row(a)))
        .sum()
}

/// Proxy columns as cluster means of the instance columns; optionally
/// re-normalized to unit norm.
pub fn update_proxies(w_instance: &Matrix, membership: &Membership, normalize: bool) -> Result<Matrix> {
    if membership.assignment.len() != w_instance.rows() {
        return Err(invalid(format!(
            "membership covers {} instances, W_I has {}",
            membership.assignment.len(),
            w_instance.rows()
        )));
    }
    let mut proxies = cluster_means(w_instance, &membership.assignment, membership.num_clusters)?;
    if normalize {
        for p in 0..proxies.rows() {
            let unit = l2_normalize(proxies.row(p))?;
            proxies.row_mut(p).copy_from_slice(&unit);
        }
    }
    Ok(proxies)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self {
            clusters,
            seed,
            max_iters: 100,
            tol: 1e-6,
            restarts: 4,
        }
    }
}

/// Result of one Lloyd run.
#[derive(Clone, Debug)]
pub struct LloydRun {
    pub assignment: Vec<usize>,
    pub centroids: Matrix,
    pub objective: f64,
    /// Objective after every iteration (non-increasing).
    pub history: Vec<f64>,
}

fn nearest(points: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..points.rows())
        .map(|i| {
            let x = points.row(i);
            let mut best = (f64::INFINITY, 0);
            for c in 0..centroids.rows() {
                let d = sq_dist(x, centroids.row(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect()
}

/// Fills empty clusters by moving in the point farthest from its current
/// centroid, taken only from clusters that keep at least one member.
fn repair_empty(points: &Matrix, centroids: &Matrix, assignment: &mut [usize]) {
    let k = centroids.rows();
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(points.row(i), centroids.row(a));
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        // P ≤ n guarantees a donor exists while some cluster is empty.
        let (_, i) = best.expect("no donor cluster with two or more points");
        sizes[assignment[i]] -= 1;
        assignment[i] = c;
        sizes[c] = 1;
    }
}

/// Lloyd iterations from the given initial centroids.
pub fn lloyd(points: &Matrix, init: Matrix, max_iters: usize, tol: f64) -> Result<LloydRun> {
    let k = init.rows();
    if k == 0 || k > points.rows() {
        return Err(invalid(format!("{k} clusters for {} points", points.rows())));
    }
    if init.cols() != points.cols() {
        return Err(invalid("centroid dimension does not match points"));
    }
    let mut assignment = nearest(points, &init);
    repair_empty(points, &init, &mut assignment);
    let mut centroids = cluster_means(points, &assignment, k)?;
    let mut objective = sse(points, &assignment, &centroids);
    let mut history = vec![objective];
    for _ in 0..max_iters {
        let mut next = nearest(points, &centroids);
        repair_empty(points, &centroids, &mut next);
        let changed = next != assignment;
        assignment = next;
        centroids = cluster_means(points, &assignment, k)?;
        let obj = sse(points, &assignment, &centroids);
        assert!(
            obj <= objective + 1e-12 * objective.max(1.0),
            "Lloyd objective increased: {objective} -> {obj}"
        );
        history.push(obj);
        let improvement = objective - obj;
        objective = obj;
        if !changed || improvement <= tol * objective {
            break;
        }
    }
    Ok(LloydRun {
        assignment,
        centroids,
        objective,
        history,
    })
}

/// k-means++ seeding: first centroid uniform, the rest with probability
/// proportional to the squared distance to the nearest chosen centroid.
pub fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn kmeans_global(points: &Matrix, cfg: &KMeansConfig, stream: u64) -> Result<LloydRun> {
    let mut best: Option<LloydRun> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, stream, r as u64));
        let init = kmeans_plus_plus(points, cfg.clusters, &mut rng);
        let run = lloyd(points, init, cfg.max_iters, cfg.tol)?;
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Splits `total` clusters over groups proportionally to their sizes
/// (largest remainder, ties to the lower index), with every nonempty group
/// getting between 1 and its size.
pub fn apportion(sizes: &[usize], total: usize) -> Result<Vec<usize>> {
    let n: usize = sizes.iter().sum();
    let nonempty = sizes.iter().filter(|&&s| s > 0).count();
    if total > n || total < nonempty {
        return Err(invalid(format!(
            "cannot split {total} clusters over {nonempty} groups with {n} points"
        )));
    }
    let mut budget: Vec<usize> = sizes.iter().map(|&s| total * s / n).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&k| std::cmp::Reverse(total * sizes[k] % n));
    let mut left = total - budget.iter().sum::<usize>();
    for &k in &order {
        if left == 0 {
            break;
        }
        budget[k] += 1;
        left -= 1;
    }
    while let Some(k) = (0..sizes.len()).find(|&k| sizes[k] > 0 && budget[k] == 0) {
        // take from the group most over its exact quota
        let donor = (0..sizes.len())
            .filter(|&j| budget[j] >= 2)
            .max_by(|&a, &b| {
                let over = |j: usize| budget[j] as f64 - (total * sizes[j]) as f64 / n as f64;
                over(a).total_cmp(&over(b)).then(b.cmp(&a))
            })
            .expect("a group with budget >= 2 exists");
        budget[donor] -= 1;
        budget[k] = 1;
    }
    debug_assert!(budget.iter().zip(sizes).all(|(&b, &s)| b <= s));
    debug_assert_eq!(budget.iter().sum::<usize>(), total);
    Ok(budget)
}

/// Clusters the rows of `points` into `cfg.clusters` groups. With
/// `coarse_labels`, clustering runs separately inside each coarse class.
/// Returns the membership and the (unnormalized) cluster means.
pub fn kmeans(
    points: &Matrix,
    cfg: &KMeansConfig,
    coarse_labels: Option<&[usize]>,
) -> Result<(Membership, Matrix)> {
    let n = points.rows();
    if cfg.clusters == 0 || cfg.clusters > n {
        return Err(invalid(format!("P = {} must be in [1, n = {n}]", cfg.clusters)));
    }
    let Some(labels) = coarse_labels else {
        let run = kmeans_global(points, cfg, 0)?;
        let membership = Membership {
            assignment: run.assignment,
            num_clusters: cfg.clusters,
            within_coarse: false,
            objective: run.objective,
        };
        return Ok((membership, run.centroids));
    };
    if labels.len() != n {
        return Err(invalid(format!("{} coarse labels for {n} points", labels.len())));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let groups = group_by_label(labels, num_classes);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let budgets = apportion(&sizes, cfg.clusters)?;

    let mut assignment = vec![0usize; n];
    let mut centroids = Matrix::zeros(cfg.clusters, points.cols());
    let mut objective = 0.0;
    let mut offset = 0;
    for (k, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let sub = points.select_rows(members);
        let sub_cfg = KMeansConfig {
            clusters: budgets[k],
            ..cfg.clone()
        };
        let run = kmeans_global(&sub, &sub_cfg, 1 + k as u64)?;
        for (local, &i) in members.iter().enumerate() {
            assignment[i] = offset + run.assignment[local];
        }
        for c in 0..budgets[k] {
            centroids.row_mut(offset + c).copy_from_slice(run.centroids.row(c));
        }
        objective += run.objective;
        offset += budgets[k];
    }
    let membership = Membership {
        assignment,
        num_clusters: cfg.clusters,
        within_coarse: true,
        objective,
    };
    Ok((membership, centroids))
}
