//! The fine-class lower bounds on random matrices and on trained models.

use coarse_core::data::{gen_blob_dataset, BlobConfig};
use coarse_core::numerics::Matrix;
use coarse_core::theory::{alpha_prime, h_factor, verify_lemma1, verify_model, verify_theorem};
use coarse_core::trainer::{train, Objective, TrainConfig};
use coarse_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Problem {
    e: Matrix,
    wc: Matrix,
    wi: Matrix,
    coarse: Vec<usize>,
    fine: Vec<usize>,
}

/// Random embeddings and heads over a random nested label hierarchy with
/// uniform fine-class size. Every softmax has a competing column.
fn random_problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_coarse = rng.random_range(2..5);
    let fine_per = rng.random_range(2..4);
    let z = rng.random_range(1..4);
    let d = rng.random_range(1..6);
    let scale = [0.1, 0.5, 1.0, 2.0][rng.random_range(0..4)];
    let num_fine = num_coarse * fine_per;
    let n = num_fine * z;
    let fine: Vec<usize> = (0..n).map(|i| i / z).collect();
    let coarse: Vec<usize> = fine.iter().map(|&f| f / fine_per).collect();
    let mut m = |rows| Matrix::from_fn(rows, d, |_, _| rng.random_range(-scale..scale));
    Problem {
        e: m(n),
        wc: m(num_coarse),
        wi: m(n),
        coarse,
        fine,
    }
}

#[test]
fn bounds_and_lemma_hold_on_random_matrices() {
    for seed in 0..500 {
        let p = random_problem(seed);
        let lemma = verify_lemma1(&p.e, &p.wi, &p.fine).unwrap();
        assert!(lemma.jensen_all_hold, "seed {seed}: jensen slack {}", lemma.jensen_slack_min);
        assert!(lemma.lemma_all_hold, "seed {seed}: lemma slack {}", lemma.lemma_slack_min);
        for check in &lemma.per_example {
            let rhs = check.lemma_rhs_log.exp();
            let lhs = check.lemma_lhs_log.exp();
            assert!(lhs - rhs >= -1e-9 * rhs);
        }
        for which in [1, 2] {
            let r = verify_theorem(&p.e, &p.wc, &p.wi, &p.coarse, &p.fine, which).unwrap();
            assert!(r.all_hold, "seed {seed} theorem {which}: slack {}", r.slack_min);
        }
    }
}

#[test]
fn bounds_hold_on_a_trained_blob_model() {
    let data = gen_blob_dataset(&BlobConfig::default()).unwrap();
    for objective in [Objective::CoinsImp, Objective::Coins] {
        let cfg = TrainConfig {
            objective,
            epochs: 30,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &data).unwrap();
        for which in [1, 2] {
            let r = verify_model(&out.params, &data, which).unwrap();
            assert!(r.all_hold, "{objective} theorem {which}");
            assert_eq!((r.z, r.num_fine), (10, 20));
            assert_eq!(r.c_prime.is_some() || r.log_c_prime.is_some(), which == 2);
        }
    }
}

#[test]
fn theorem_two_is_never_tighter_than_theorem_one() {
    for seed in 0..100 {
        let p = random_problem(seed);
        let t1 = verify_theorem(&p.e, &p.wc, &p.wi, &p.coarse, &p.fine, 1).unwrap();
        let t2 = verify_theorem(&p.e, &p.wc, &p.wi, &p.coarse, &p.fine, 2).unwrap();
        assert!(t2.log_alpha_prime.unwrap() <= t2.log_alpha + 1e-12);
        assert_eq!(t1.lhs_log, t2.lhs_log);
    }
}

#[test]
fn unequal_fine_classes_are_unsupported() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = |rows| Matrix::from_fn(rows, 2, |_, _| rng.random_range(-1.0..1.0));
    let fine = vec![0, 0, 0, 1, 1, 1, 1];
    let coarse = vec![0; 7];
    let err = verify_theorem(&m(7), &m(1), &m(7), &coarse, &fine, 1).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn h_grows_with_beta_and_alpha(
        c in 0.1f64..3.0,
        a in 0.05f64..1.0,
        b in 0.05f64..1.0,
        alpha in 0.01f64..0.98,
        beta in 0.01f64..0.98,
        step in 0.0f64..0.01,
        z in 1usize..8,
    ) {
        let h = |al: f64, be: f64| h_factor(c, al, be, a, b, z);
        // Skip points where the square roots leave their domain.
        if let (Ok(h0), Ok(h1), Ok(h2)) = (h(alpha, beta), h(alpha, beta + step), h(alpha + step, beta)) {
            prop_assert!(h1 >= h0 * (1.0 - 1e-12));
            prop_assert!(h2 >= h0 * (1.0 - 1e-12));
            prop_assert!(h0 <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn relaxed_alpha_shrinks(alpha in 0.01f64..0.99, beta in 0.01f64..0.99, cpp in 0.0f64..100.0) {
        let ap = alpha_prime(alpha, beta, cpp);
        prop_assert!(ap <= alpha * (1.0 + 1e-15));
        prop_assert!(ap > 0.0);
    }
}

/// Scaling the coarse head sweeps `β`; the bound's `h` must track it.
#[test]
fn beta_sweep_moves_h_monotonically() {
    let p = random_problem(7);
    let mut points = Vec::new();
    for s in [0.0, 0.05, 0.1, 0.2] {
        let mut wc = p.wc.clone();
        wc.scale(s);
        let r = verify_theorem(&p.e, &wc, &p.wi, &p.coarse, &p.fine, 1).unwrap();
        points.push((r.c, r.log_beta, r.log_b, r.log_h));
    }
    // c must stay fixed for the comparison to be about β alone.
    assert!(points.iter().all(|q| q.0 == points[0].0));
    for w in points.windows(2) {
        let ((_, lb0, lbb0, lh0), (_, lb1, lbb1, lh1)) = (w[0], w[1]);
        if lb1 + lbb1 >= lb0 + lbb0 {
            assert!(lh1 >= lh0 - 1e-12);
        }
    }
}
