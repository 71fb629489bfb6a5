//! Central-difference audits of every tape op, the loss composite and the
//! full network (ε = 1e-6, relative error < 1e-4).

use daam::losses::{total_loss, BatchLossInputs, LossConfig};
use daam::net::{BackboneConfig, DaamParams};
use daam::synthetic::Domain;
use daam::tensor::{grad_check, GradCheckConfig, GradCheckReport};
use daam::trainer::audit_gradients;
use daam::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values of magnitude in [0.2, 1.5] with random sign, away from ReLU and
/// clamp kinks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(random(g.shape(y), -1.0, 1.0, seed ^ 0x5eed));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> GradCheckReport {
    let report = grad_check(|g: &mut Graph, v: &[Var]| { let y = f(g, v)?; project(g, y, 7) }, inputs, GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "max relative error {:e} at {:?}", report.max_rel_error, report.worst());
    assert_eq!(report.entries.len(), inputs.iter().map(Tensor::numel).sum::<usize>());
    report
}

#[test]
fn matmul() {
    check(&[random(&[3, 4], -1.0, 1.0, 1), random(&[4, 2], -1.0, 1.0, 2)], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn conv2d_strides_and_padding() {
    for (stride, padding) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        check(&[random(&[2, 5, 4, 3], -1.0, 1.0, 3), random(&[3, 3, 3, 2], -1.0, 1.0, 4)], |g, v| {
            g.conv2d(v[0], v[1], stride, padding)
        });
    }
}

#[test]
fn broadcasting_arithmetic() {
    let a = random(&[2, 3, 4], -1.0, 1.0, 5);
    let b = random(&[3, 1], 0.5, 1.5, 6);
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(&[a, b], |g, v| g.div(v[0], v[1]));
}

#[test]
fn elementwise() {
    let x = away_from_zero(&[3, 5], 8);
    let pos = random(&[3, 5], 0.3, 2.0, 9);
    check(&[x.clone()], |g, v| g.scale(v[0], -1.7));
    check(&[x.clone()], |g, v| g.relu(v[0]));
    check(&[x.clone()], |g, v| g.sigmoid(v[0]));
    check(&[x.clone()], |g, v| g.exp(v[0]));
    check(&[pos.clone()], |g, v| g.log(v[0]));
    check(&[pos], |g, v| g.sqrt(v[0]));
    check(&[x], |g, v| g.clamp(v[0], -0.1, 0.1));
}

#[test]
fn shapes_and_reductions() {
    let x = random(&[2, 3, 4], -1.0, 1.0, 10);
    let y = random(&[2, 3, 4], -1.0, 1.0, 11);
    check(&[x.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    check(&[x.clone()], |g, v| g.sum(v[0]));
    check(&[x.clone()], |g, v| g.mean(v[0]));
    check(&[x.clone()], |g, v| g.sum_last(v[0]));
    check(&[x.clone()], |g, v| g.l2_norm_sq(v[0]));
    check(&[x, y], |g, v| g.dot(v[0], v[1]));
}

#[test]
fn pooling_and_upsampling() {
    let x = random(&[2, 4, 3, 5], -1.0, 1.0, 12);
    check(&[x.clone()], |g, v| g.global_avg_pool_spatial(v[0]));
    check(&[x], |g, v| g.avg_pool_channels(v[0]));
    check(&[random(&[2, 2, 2, 3], -1.0, 1.0, 13)], |g, v| g.upsample_nearest(v[0], 4, 3));
}

#[test]
fn softmax_gather_select() {
    let x = random(&[4, 5], -2.0, 2.0, 14);
    check(&[x.clone()], |g, v| g.softmax(v[0]));
    check(&[x.clone()], |g, v| g.gather(v[0], &[4, 0, 2, 2]));
    check(&[x], |g, v| g.select_rows(v[0], &[3, 1, 3]));
}

#[test]
fn batchnorm_both_modes() {
    let x = random(&[6, 3], -1.0, 1.0, 15);
    let gamma = random(&[3], 0.5, 1.5, 16);
    let beta = random(&[3], -0.5, 0.5, 17);
    check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| Ok(g.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0));
    let rm = random(&[3], -0.2, 0.2, 18);
    let rv = random(&[3], 0.5, 2.0, 19);
    check(&[x, gamma, beta], |g, v| g.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5));
}

#[test]
fn loss_composite_over_head_outputs() {
    use daam::net::ForwardVars;
    // Head outputs and embeddings fed straight into the composite.
    let n = 4;
    let inputs = BatchLossInputs {
        domains: vec![Domain::Source, Domain::Source, Domain::Target, Domain::Target],
        source_rows: vec![0, 1],
        source_labels: vec![2, 0],
        target_rows: vec![2, 3],
        target_labels: vec![1, 0],
        target_weights: vec![0.5, 0.2],
    };
    let tensors = vec![
        random(&[n], -1.0, 1.0, 20),
        random(&[n, 3], -1.0, 1.0, 21),
        random(&[n, 2], -1.0, 1.0, 22),
        random(&[n, 2], -1.0, 1.0, 23),
        random(&[n, 5], 0.1, 1.0, 24),
        random(&[n, 5], 0.1, 1.0, 25),
    ];
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let occ = g.sigmoid(v[0])?;
        let src = g.softmax(v[1])?;
        let tgt = g.softmax(v[2])?;
        let dom = g.softmax(v[3])?;
        let fv = ForwardVars {
            feature: v[4],
            spatial: None,
            channel: None,
            attention: v[4],
            shared_map: v[4],
            specific_map: v[5],
            f_sh: v[4],
            f_sp: Some(v[5]),
            p_occ: Some(occ),
            p_src_id: Some(src),
            p_tgt_id: Some(tgt),
            p_domain: Some(dom),
            bn_stats: Vec::new(),
        };
        Ok(total_loss(g, &fv, &inputs, &LossConfig::default())?.0)
    };
    let report = grad_check(f, &tensors, GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "max relative error {:e}", report.max_rel_error);
}

#[test]
fn full_network_and_total_loss() {
    let cfg = BackboneConfig { channels: vec![4, 6, 6], embedding_dim: 4, reduction: 2, ..BackboneConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = DaamParams::init(&cfg, 16, 8, 3, 2, &mut rng).unwrap();
    let batch = random(&[4, 16, 8, 3], 0.0, 1.0, 26);
    let inputs = BatchLossInputs {
        domains: vec![Domain::Source, Domain::Source, Domain::Target, Domain::Target],
        source_rows: vec![0, 1],
        source_labels: vec![0, 2],
        target_rows: vec![2, 3],
        target_labels: vec![1, 0],
        target_weights: vec![0.4, 0.1],
    };
    let report = audit_gradients(&params, &batch, &inputs, &LossConfig::default(), true, GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "max relative error {:e} at {:?}", report.max_rel_error, report.worst());
    assert_eq!(report.entries.len(), params.params().map(|(_, t)| t.numel()).sum::<usize>());
}
