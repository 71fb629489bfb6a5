//! Property tests against independent brute-force oracles.

use daam::metrics::{rank_and_score, Distance, ItemMeta};
use daam::net::{infer, BackboneConfig, DaamParams, ForwardOptions, Mode};
use daam::weak_labels::{assign_weak_label, kmeans_pp, squared_distance, weight_from_sq_distance, KMeansConfig};
use daam::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---- attention decomposition -------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shared_plus_specific_is_the_feature_map(
        seed in any::<u64>(),
        pixels in prop::collection::vec(0.0f64..1.0, 2 * 16 * 8 * 3),
    ) {
        let params = DaamParams::init(&BackboneConfig::default(), 16, 8, 5, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let batch = Tensor::new(vec![2, 16, 8, 3], pixels).unwrap();
        let (g, v) = infer(&params, &batch, ForwardOptions::full(Mode::Eval)).unwrap();
        let f = g.value(v.feature).data();
        let sh = g.value(v.shared_map).data();
        let sp = g.value(v.specific_map).data();
        for i in 0..f.len() {
            prop_assert!((sh[i] + sp[i] - f[i]).abs() <= 1e-15, "entry {i}: {} + {} vs {}", sh[i], sp[i], f[i]);
        }
        prop_assert!(g.value(v.attention).data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}

// ---- clustering ----------------------------------------------------------

/// Minimum inertia over every assignment of `points` to `k` non-empty
/// groups, each group scored against its own mean.
fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.iter().all(|&u| u) {
            let mut total = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                let d = points[0].len();
                let mean: Vec<f64> =
                    (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
                total += members.iter().map(|p| squared_distance(p, &mean)).sum::<f64>();
            }
            best = best.min(total);
        }
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

fn small_point_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (2usize..=8, 1usize..=3, 1usize..=3).prop_flat_map(|(n, k, d)| {
        (prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n), Just(k.min(n)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kmeans_pp_is_near_the_exhaustive_optimum((points, k) in small_point_sets()) {
        // Single runs may stop in a local optimum; the best of 20 seeded
        // restarts may not.
        let opt = exhaustive_optimum(&points, k);
        let mut best = f64::INFINITY;
        for seed in 0..20 {
            let m = kmeans_pp(&points, k, seed, KMeansConfig::default()).unwrap();
            best = best.min(m.inertia);
            for w in m.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "inertia rose: {:?}", m.inertia_trace);
            }
        }
        prop_assert!(best <= 1.05 * opt + 1e-9, "best of 20 seeds {best} vs optimum {opt}");
    }

    #[test]
    fn labels_are_nearest_centers((points, k) in small_point_sets(), seed in 0u64..1000) {
        let m = kmeans_pp(&points, k, seed, KMeansConfig::default()).unwrap();
        for (p, &l) in points.iter().zip(&m.labels) {
            let own = squared_distance(p, &m.centers[l]);
            for c in &m.centers {
                prop_assert!(own <= squared_distance(p, c));
            }
            prop_assert!(m.weights.iter().all(|&w| w > 0.0 && w <= 0.5));
        }
    }

    #[test]
    fn weak_label_matches_linear_scan(
        point in prop::collection::vec(-3.0f64..3.0, 4),
        centers in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..6),
    ) {
        let d: Vec<f64> = centers.iter().map(|c| squared_distance(&point, c)).collect();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = d.iter().position(|&x| x == min).unwrap();
        prop_assert_eq!(assign_weak_label(&point, &centers), first);
    }

    #[test]
    fn weights_decrease_with_distance(a in 0.0f64..800.0, b in 0.0f64..800.0) {
        let (wa, wb) = (weight_from_sq_distance(a), weight_from_sq_distance(b));
        prop_assert!(wa > 0.0 && wa <= 0.5 && wb > 0.0 && wb <= 0.5);
        // Strict below the point where the formula itself underflows.
        if a < b && b < 60.0 {
            prop_assert!(wa > wb);
        }
        if a <= b {
            prop_assert!(wa >= wb);
        }
    }
}

// ---- retrieval metrics ---------------------------------------------------

struct Oracle {
    map: f64,
    cmc: [f64; 3],
    excluded: usize,
}

/// Scores each query from pairwise distances alone: the rank of a match is
/// one plus the number of valid gallery items strictly closer, plus tied
/// non-matches, plus tied matches of lower gallery index.
fn oracle(q: &[Vec<f64>], qm: &[ItemMeta], g: &[Vec<f64>], gm: &[ItemMeta]) -> Oracle {
    let (mut ap_sum, mut cmc, mut used) = (0.0, [0.0; 3], 0usize);
    for (x, m) in q.iter().zip(qm) {
        let valid: Vec<usize> = (0..g.len()).filter(|&j| !(gm[j].identity == m.identity && gm[j].camera == m.camera)).collect();
        let dist = |j: usize| squared_distance(x, &g[j]).sqrt();
        let hit = |j: usize| gm[j].identity == m.identity;
        let mut ranks: Vec<usize> = valid
            .iter()
            .filter(|&&j| hit(j))
            .map(|&j| {
                let dj = dist(j);
                1 + valid
                    .iter()
                    .filter(|&&o| {
                        let d = dist(o);
                        d < dj || (d == dj && !hit(o)) || (d == dj && hit(o) && o < j)
                    })
                    .count()
            })
            .collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort_unstable();
        used += 1;
        ap_sum += ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64;
        for (c, k) in cmc.iter_mut().zip([1, 5, 10]) {
            if ranks[0] <= k {
                *c += 1.0;
            }
        }
    }
    let n = used.max(1) as f64;
    Oracle { map: ap_sum / n, cmc: cmc.map(|c| c / n), excluded: q.len() - used }
}

type Instance = (Vec<Vec<f64>>, Vec<ItemMeta>, Vec<Vec<f64>>, Vec<ItemMeta>);

/// Features on a coarse grid so distance ties occur.
fn instances() -> impl Strategy<Value = Instance> {
    let item = |d: usize| {
        (prop::collection::vec((0i32..4).prop_map(|v| v as f64 * 0.5), d), 0usize..5, 0usize..3)
    };
    (1usize..4, 1usize..8, 1usize..=50).prop_flat_map(move |(d, nq, ng)| {
        (prop::collection::vec(item(d), nq), prop::collection::vec(item(d), ng)).prop_map(|(q, g)| {
            let split = |v: Vec<(Vec<f64>, usize, usize)>| {
                let meta = v.iter().map(|(_, identity, camera)| ItemMeta { identity: *identity, camera: *camera }).collect();
                (v.into_iter().map(|(f, _, _)| f).collect::<Vec<_>>(), meta)
            };
            let (qf, qm) = split(q);
            let (gf, gm) = split(g);
            (qf, qm, gf, gm)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_brute_force((q, qm, g, gm) in instances()) {
        let o = oracle(&q, &qm, &g, &gm);
        match rank_and_score(&q, &qm, &g, &gm, Distance::Euclidean) {
            Ok((_, r)) => {
                prop_assert!((r.map - o.map).abs() <= 1e-12, "mAP {} vs oracle {}", r.map, o.map);
                for (got, want) in [r.cmc1, r.cmc5, r.cmc10].into_iter().zip(o.cmc) {
                    prop_assert!((got - want).abs() <= 1e-12);
                }
                prop_assert_eq!(r.excluded_queries, o.excluded);
                prop_assert!(r.cmc1 <= r.cmc5 && r.cmc5 <= r.cmc10);
            }
            Err(_) => prop_assert_eq!(o.excluded, q.len()),
        }
    }

    #[test]
    fn gallery_order_does_not_matter((q, qm, g, gm) in instances(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..g.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let g2: Vec<Vec<f64>> = perm.iter().map(|&i| g[i].clone()).collect();
        let gm2: Vec<ItemMeta> = perm.iter().map(|&i| gm[i]).collect();
        if let (Ok((_, a)), Ok((_, b))) = (
            rank_and_score(&q, &qm, &g, &gm, Distance::Euclidean),
            rank_and_score(&q, &qm, &g2, &gm2, Distance::Euclidean),
        ) {
            prop_assert!((a.map - b.map).abs() <= 1e-12);
            prop_assert_eq!((a.cmc1, a.cmc5, a.cmc10), (b.cmc1, b.cmc5, b.cmc10));
        }
    }
}
