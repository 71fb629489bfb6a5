//! k-means++ clustering of target embeddings, nearest-center weak labels and
//! distance-based confidence weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EXP_CAP: f64 = 700.0;
pub const WEIGHT_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no center moves farther than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { max_iter: 100, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub inertia: f64,
    pub seed: u64,
    /// Lloyd iterations run after seeding.
    pub iterations: usize,
    /// Inertia after the seeding assignment and after every Lloyd step.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center by squared Euclidean distance; ties go to
/// the lowest index.
pub fn assign_weak_label(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// `1 / (1 + exp(d²))` with the exponent capped at [`EXP_CAP`] and the
/// result floored at [`WEIGHT_FLOOR`].
pub fn weight_from_sq_distance(d2: f64) -> f64 {
    (1.0 / (1.0 + d2.min(EXP_CAP).exp())).max(WEIGHT_FLOOR)
}

pub fn confidence_weight(point: &[f64], center: &[f64]) -> f64 {
    weight_from_sq_distance(squared_distance(point, center))
}

fn validate(points: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("k-means needs K >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::Data(format!("{} points cannot form {k} clusters", points.len())));
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::dim("kmeans", format!("point {i} has {} dims, expected {dim}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("kmeans", format!("point {i} is not finite")));
        }
    }
    Ok(dim)
}

/// k-means++ seeding: the first center is uniform, later ones are drawn with
/// probability proportional to the squared distance to the nearest chosen
/// center.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            while nearest[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // Only duplicates of chosen centers remain.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.push(points[pick].clone());
        let c = centers.last().unwrap();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, c));
        }
    }
    centers
}

fn assign_all(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let l = assign_weak_label(p, centers);
            inertia += squared_distance(p, &centers[l]);
            l
        })
        .collect();
    (labels, inertia)
}

/// New centers as cluster means. An empty cluster is re-seeded at the point
/// currently farthest from its own center.
fn update_centers(points: &[Vec<f64>], labels: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (k, dim) = (old.len(), points[0].len());
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    let mut far: Vec<(f64, usize)> =
        points.iter().zip(labels).enumerate().map(|(i, (p, &l))| (squared_distance(p, &old[l]), i)).collect();
    far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut far = far.into_iter();
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| {
            if c > 0 {
                s.into_iter().map(|v| v / c as f64).collect()
            } else {
                let (_, i) = far.next().expect("more points than clusters");
                points[i].clone()
            }
        })
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations. Stops when the
/// assignment no longer changes, when no center moves more than `tol`, or
/// after `max_iter` steps. Weights are filled with the confidence of each
/// point's assignment.
pub fn kmeans_pp(points: &[Vec<f64>], k: usize, seed: u64, cfg: KMeansConfig) -> Result<ClusterModel> {
    validate(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(points, k, &mut rng);
    let (mut labels, mut inertia) = assign_all(points, &centers);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let next = update_centers(points, &labels, &centers);
        let shift = next.iter().zip(&centers).map(|(a, b)| squared_distance(a, b).sqrt()).fold(0.0, f64::max);
        centers = next;
        let (next_labels, next_inertia) = assign_all(points, &centers);
        trace.push(next_inertia);
        inertia = next_inertia;
        let stable = next_labels == labels;
        labels = next_labels;
        if stable || shift < cfg.tol {
            break;
        }
    }
    let weights = points.iter().zip(&labels).map(|(p, &l)| confidence_weight(p, &centers[l])).collect();
    Ok(ClusterModel { k, centers, labels, weights, inertia, seed, iterations, inertia_trace: trace })
}

/// Clusters the target embeddings and attaches a weak label and weight to
/// every sample.
pub fn relabel_dataset(features: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    kmeans_pp(features, k, seed, KMeansConfig::default())
}

/// Adjusted Rand index between two labelings of the same points; 1.0 for
/// identical partitions up to relabeling.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn identical_points_single_cluster() {
        let p = vec![vec![1.5, -2.0]; 5];
        let m = kmeans_pp(&p, 1, 3, KMeansConfig::default()).unwrap();
        assert_eq!(m.centers, vec![vec![1.5, -2.0]]);
        assert_eq!(m.inertia, 0.0);
        assert!(m.weights.iter().all(|&w| w == 0.5));
    }

    #[test]
    fn one_cluster_per_point() {
        let p = pts(&[0.0, 3.0, -1.0, 7.5]);
        let m = kmeans_pp(&p, 4, 11, KMeansConfig::default()).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut labels = m.labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn two_groups_on_a_line() {
        let p = pts(&[0.0, 0.1, 10.0, 10.1]);
        let m = kmeans_pp(&p, 2, 0, KMeansConfig::default()).unwrap();
        let mut c: Vec<f64> = m.centers.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12 && (c[1] - 10.05).abs() < 1e-12);
        assert!((m.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(kmeans_pp(&pts(&[1.0]), 2, 0, KMeansConfig::default()), Err(Error::Data(_))));
        assert!(matches!(kmeans_pp(&pts(&[1.0, f64::NAN]), 1, 0, KMeansConfig::default()), Err(Error::Numeric { .. })));
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let centers = vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0]];
        assert_eq!(assign_weak_label(&[0.0, 0.0], &centers), 0);
        assert_eq!(assign_weak_label(&[5.0, 5.0], &centers), 2);
    }

    #[test]
    fn weight_values() {
        assert_eq!(weight_from_sq_distance(0.0), 0.5);
        assert!((weight_from_sq_distance(3f64.ln()) - 0.25).abs() < 1e-15);
        let w50 = weight_from_sq_distance(50.0);
        assert!((w50 - 1.0 / (1.0 + 50f64.exp())).abs() < 1e-36);
        assert!(w50 > WEIGHT_FLOOR && (w50 - 1.9287e-22).abs() < 1e-26);
        assert_eq!(weight_from_sq_distance(1e6), WEIGHT_FLOOR);
    }

    #[test]
    fn relabel_is_deterministic() {
        let p: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * 7 % 11) as f64, (i * 3 % 5) as f64]).collect();
        let a = relabel_dataset(&p, 4, 42).unwrap();
        let b = relabel_dataset(&p, 4, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ari_is_permutation_invariant() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }
}
