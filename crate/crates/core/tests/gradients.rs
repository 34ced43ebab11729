//! Every training loss, and the encoder backward pass behind it, against
//! central finite differences over random models and batches.

use coarse_core::cluster::{update_proxies, Membership};
use coarse_core::losses::{
    coarse_loss, combined_objective, instance_loss_full, instance_loss_within_coarse, instance_proxy_loss,
    BatchLabels, CoarseIndex, InstanceMode, LossValue, ObjectiveWeights,
};
use coarse_core::model::{backward, encode, HeadKind, ModelConfig, ModelParams, ProxyHead};
use coarse_core::numerics::{grad_check, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

/// Every trainable scalar of a model, in a fixed order.
fn flatten(p: &ModelParams) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &p.encoder {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(&l.bias);
    }
    if let Some(h) = &p.mlp_head {
        out.extend_from_slice(h.first.as_slice());
        out.extend_from_slice(h.second.as_slice());
    }
    out.extend_from_slice(p.w_coarse.as_slice());
    out.extend_from_slice(p.w_instance.as_slice());
    if let Some(h) = &p.proxy {
        out.extend_from_slice(h.weights.as_slice());
    }
    out
}

fn unflatten(p: &mut ModelParams, v: &[f64]) {
    let mut at = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&v[at..at + dst.len()]);
        at += dst.len();
    };
    for l in &mut p.encoder {
        take(l.weight.as_mut_slice());
        take(&mut l.bias);
    }
    if let Some(h) = &mut p.mlp_head {
        take(h.first.as_mut_slice());
        take(h.second.as_mut_slice());
    }
    take(p.w_coarse.as_mut_slice());
    take(p.w_instance.as_mut_slice());
    if let Some(h) = &mut p.proxy {
        take(h.weights.as_mut_slice());
    }
}

fn head_block(rows: usize, d: usize, grads: &std::collections::BTreeMap<usize, Vec<f64>>) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for (&c, g) in grads {
        out[c * d..(c + 1) * d].copy_from_slice(g);
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum Loss {
    Instance,
    Coarse,
    Hybrid,
    WithinCoarse,
    Proxy,
    Full,
}

const ALL: [Loss; 6] = [
    Loss::Instance,
    Loss::Coarse,
    Loss::Hybrid,
    Loss::WithinCoarse,
    Loss::Proxy,
    Loss::Full,
];

fn weights(loss: Loss, lambda_i: f64, lambda_p: f64) -> ObjectiveWeights {
    let (coarse, instance, proxy, mode) = match loss {
        Loss::Instance => (0.0, 1.0, 0.0, InstanceMode::Full),
        Loss::Coarse => (1.0, 0.0, 0.0, InstanceMode::Full),
        Loss::Hybrid => (1.0, lambda_i, 0.0, InstanceMode::Full),
        Loss::WithinCoarse => (1.0, lambda_i, 0.0, InstanceMode::WithinCoarse),
        Loss::Proxy => (0.0, 0.0, 1.0, InstanceMode::Full),
        Loss::Full => (1.0, lambda_i, lambda_p, InstanceMode::WithinCoarse),
    };
    ObjectiveWeights {
        coarse,
        instance,
        proxy,
        instance_mode: mode,
    }
}

struct Case {
    params: ModelParams,
    x: Matrix,
    ids: Vec<usize>,
    coarse: Vec<usize>,
    index: CoarseIndex,
    lambda_i: f64,
    lambda_p: f64,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.random_range(2..6);
    let depth = rng.random_range(1..3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..7)).collect();
    let num_coarse = rng.random_range(1..4);
    let n = rng.random_range(num_coarse.max(2)..9);
    let cosine = rng.random_bool(0.5);
    let cfg = ModelConfig {
        input_dim,
        hidden,
        num_coarse,
        num_instances: n,
        cosine,
        temperature: rng.random_range(0.2..1.0),
        mlp_head: rng.random_bool(0.3),
    };
    let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
    for l in &mut params.encoder {
        for b in &mut l.bias {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    // Every coarse class gets at least one instance.
    let coarse_of: Vec<usize> = (0..n)
        .map(|i| if i < num_coarse { i } else { rng.random_range(0..num_coarse) })
        .collect();
    let num_clusters = rng.random_range(1..=n.min(4));
    let assignment: Vec<usize> = (0..n)
        .map(|i| if i < num_clusters { i } else { rng.random_range(0..num_clusters) })
        .collect();
    let membership = Membership::from_assignment(&params.w_instance, assignment, num_clusters, false).unwrap();
    let weights = update_proxies(&params.w_instance, &membership, false).unwrap();
    params.proxy = Some(ProxyHead { weights, membership });

    let batch = rng.random_range(1..5);
    let ids: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
    let coarse: Vec<usize> = ids.iter().map(|&i| coarse_of[i]).collect();
    let x = Matrix::from_fn(batch, input_dim, |_, _| rng.random_range(-1.0..1.0));
    Case {
        params,
        x,
        ids,
        coarse,
        index: CoarseIndex::new(&coarse_of, num_coarse).unwrap(),
        lambda_i: rng.random_range(0.1..2.0),
        lambda_p: rng.random_range(0.1..2.0),
    }
}

fn value(case: &Case, params: &ModelParams, w: &ObjectiveWeights) -> f64 {
    let fwd = encode(params, &case.x).unwrap();
    combined_objective(
        params,
        &fwd.features,
        BatchLabels {
            instance_ids: &case.ids,
            coarse_labels: &case.coarse,
        },
        w,
        Some(&case.index),
    )
    .unwrap()
    .value
}

fn analytic(case: &Case, w: &ObjectiveWeights) -> Vec<f64> {
    let p = &case.params;
    let fwd = encode(p, &case.x).unwrap();
    let obj = combined_objective(
        p,
        &fwd.features,
        BatchLabels {
            instance_ids: &case.ids,
            coarse_labels: &case.coarse,
        },
        w,
        Some(&case.index),
    )
    .unwrap();
    let grads = backward(p, &fwd, &obj.grad_features).unwrap();
    let d = p.embed_dim();
    let mut out = Vec::new();
    for (gw, gb) in &grads.encoder {
        out.extend_from_slice(gw.as_slice());
        out.extend_from_slice(gb);
    }
    if let Some((a, b)) = &grads.mlp_head {
        out.extend_from_slice(a.as_slice());
        out.extend_from_slice(b.as_slice());
    }
    out.extend(head_block(p.w_coarse.rows(), d, &obj.head_grad(HeadKind::Coarse)));
    out.extend(head_block(p.w_instance.rows(), d, &obj.head_grad(HeadKind::Instance)));
    let proxies = p.proxy.as_ref().unwrap().weights.rows();
    out.extend(head_block(proxies, d, &obj.head_grad(HeadKind::Proxy)));
    out
}

#[test]
fn every_objective_through_the_encoder() {
    let mut checked = 0;
    for seed in 0..120 {
        let case = random_case(seed);
        for loss in ALL {
            let w = weights(loss, case.lambda_i, case.lambda_p);
            let point = flatten(&case.params);
            let grad = analytic(&case, &w);
            let mut probe = case.params.clone();
            let err = grad_check(
                |v| {
                    unflatten(&mut probe, v);
                    value(&case, &probe, &w)
                },
                &point,
                &grad,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed} {loss:?}: rel err {err:e}");
            checked += 1;
        }
    }
    assert!(checked >= 600);
}

/// Feature gradient of a single loss against finite differences on the
/// features themselves.
fn check_features(name: &str, feats: &Matrix, f: impl Fn(&Matrix) -> LossValue) {
    let base = f(feats);
    let mut probe = feats.clone();
    let err = grad_check(
        |v| {
            probe.as_mut_slice().copy_from_slice(v);
            f(&probe).value
        },
        feats.as_slice(),
        base.grad_embeddings.as_slice(),
    )
    .unwrap();
    assert!(err < TOL, "{name}: rel err {err:e}");
}

#[test]
fn single_losses_wrt_features() {
    for seed in 200..320 {
        let case = random_case(seed);
        let p = &case.params;
        let feats = encode(p, &case.x).unwrap().features;
        let (fc, fi) = (feats.coarse.clone(), feats.instance.clone());
        check_features("coarse", &fc, |e| coarse_loss(p, e, &case.coarse).unwrap());
        check_features("instance", &fi, |e| instance_loss_full(p, e, &case.ids).unwrap());
        check_features("within-coarse", &fi, |e| {
            instance_loss_within_coarse(p, e, &case.ids, &case.coarse, &case.index).unwrap()
        });
        check_features("proxy", &fi, |e| instance_proxy_loss(p, e, &case.ids).unwrap());
    }
}
