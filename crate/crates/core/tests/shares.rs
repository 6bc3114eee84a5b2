mod common;

use common::*;
use hdblp::shares::*;
use proptest::prelude::*;

#[test]
fn quadrature_shares_match_simulated_consumers() {
    let (y, p, sigma) = ([0.3, -0.1], [1.0, 2.0], 0.7);
    let s = compute_shares(&y, &p, sigma, &QuadratureRule::default()).unwrap();
    let mut r = rng(2024);
    let n = 1_000_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let b = sigma * normal(&mut r);
        let u = [
            gumbel(&mut r),
            y[0] + p[0] * b + gumbel(&mut r),
            y[1] + p[1] * b + gumbel(&mut r),
        ];
        let best = (0..3).max_by(|&a, &c| u[a].total_cmp(&u[c])).unwrap();
        counts[best] += 1;
    }
    for j in 0..2 {
        let freq = counts[j + 1] as f64 / n as f64;
        let se = (freq * (1.0 - freq) / n as f64).sqrt();
        assert!(
            (freq - s.as_slice()[j]).abs() < 3.0 * se,
            "product {j}: simulated {freq}, quadrature {}",
            s.as_slice()[j]
        );
    }
}

#[test]
fn reference_share_values() {
    let q = QuadratureRule::default();
    let s = compute_shares(&[0.0], &[1.0], 0.0, &q).unwrap();
    assert!((s.as_slice()[0] - 0.5).abs() < 1e-15);
    let s = compute_shares(&[0.0, 0.0], &[1.0, 2.0], 0.0, &q).unwrap();
    for v in s.as_slice() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let inv = invert_shares(
        &ShareVector::new(vec![0.2, 0.3]).unwrap(),
        &[1.0, 1.0],
        0.0,
        &q,
        &InversionOptions::default(),
    )
    .unwrap();
    assert!((inv.y.as_slice()[0] - 0.4f64.ln()).abs() < 1e-12);
    assert!((inv.y.as_slice()[1] - 0.6f64.ln()).abs() < 1e-12);
}

#[test]
fn jacobian_matches_central_differences() {
    let q = QuadratureRule::default();
    let mut r = rng(7);
    for _ in 0..50 {
        let (y, p, sigma) = random_instance(&mut r);
        let jac = share_jacobian_y(&y, &p, sigma, &q).unwrap();
        for j in 0..4 {
            let h = 1e-6;
            let mut up = y.clone();
            let mut dn = y.clone();
            up[j] += h;
            dn[j] -= h;
            let su = compute_shares(&up, &p, sigma, &q).unwrap();
            let sd = compute_shares(&dn, &p, sigma, &q).unwrap();
            for i in 0..4 {
                let fd = (su.as_slice()[i] - sd.as_slice()[i]) / (2.0 * h);
                assert!((jac[(i, j)] - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
            }
        }
        let s = compute_shares(&y, &p, sigma, &q).unwrap();
        for i in 0..4 {
            let row: f64 = (0..4).map(|j| jac[(i, j)]).sum();
            assert!(row > 0.0 && row < s.as_slice()[i]);
        }
    }
}

#[test]
fn dy_dsigma_matches_differenced_inversion() {
    let q = QuadratureRule::default();
    let opts = InversionOptions::default();
    let mut r = rng(8);
    for case in 0..20 {
        let (y, mut p, mut sigma) = random_instance(&mut r);
        if case % 2 == 0 {
            // all-equal prices
            p = vec![1.5; 4];
        }
        if case == 1 {
            sigma = 0.0;
        }
        let s = compute_shares(&y, &p, sigma, &q).unwrap();
        let analytic = dy_dsigma(&s, &p, sigma, &q, &opts).unwrap();
        let h = 1e-5;
        let lo = (sigma - h).abs();
        let yu = invert_shares(&s, &p, sigma + h, &q, &opts).unwrap();
        let yd = invert_shares(&s, &p, lo, &q, &opts).unwrap();
        for j in 0..4 {
            let fd = if sigma == 0.0 {
                // y is even in sigma, so the symmetric difference is zero
                0.0
            } else {
                (yu.y.as_slice()[j] - yd.y.as_slice()[j]) / (2.0 * h)
            };
            assert!(
                (analytic[j] - fd).abs() <= 1e-5 * fd.abs().max(1e-2),
                "case {case} product {j}: {} vs {fd}",
                analytic[j]
            );
        }
    }
    let single = dy_dsigma(&ShareVector::new(vec![0.4]).unwrap(), &[0.0], 1.3, &q, &opts).unwrap();
    assert_eq!(single, vec![0.0]);
}

#[test]
fn contraction_is_strict_on_random_pairs() {
    let q = QuadratureRule::default();
    let mut r = rng(9);
    for _ in 0..100 {
        let (y, p, sigma) = random_instance(&mut r);
        let s = compute_shares(&y, &p, sigma, &q).unwrap();
        let m = 3.0;
        let a: Vec<f64> = y.iter().map(|v| v + uniform(&mut r, -m, m)).collect();
        let b: Vec<f64> = y.iter().map(|v| v + uniform(&mut r, -m, m)).collect();
        let ta = contraction_step(&a, &s, &p, sigma, &q).unwrap();
        let tb = contraction_step(&b, &s, &p, sigma, &q).unwrap();
        let before = a.iter().zip(&b).map(|(x, w)| (x - w).abs()).fold(0.0, f64::max);
        let after = ta.iter().zip(&tb).map(|(x, w)| (x - w).abs()).fold(0.0, f64::max);
        assert!(after < before);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inversion_round_trips(
        y in proptest::collection::vec(-2.0f64..2.0, 4),
        p in proptest::collection::vec(0.2f64..3.0, 4),
        sigma in 0.0f64..2.5,
    ) {
        let q = QuadratureRule::default();
        let s = compute_shares(&y, &p, sigma, &q).unwrap();
        let inv = invert_shares(&s, &p, sigma, &q, &InversionOptions::default()).unwrap();
        prop_assert!(inv.residual <= 1e-12);
        for (a, b) in inv.y.as_slice().iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn own_share_increases_with_own_utility(
        y in proptest::collection::vec(-2.0f64..2.0, 3),
        p in proptest::collection::vec(0.2f64..3.0, 3),
        sigma in 0.0f64..2.0,
        j in 0usize..3,
    ) {
        let q = QuadratureRule::default();
        let s = compute_shares(&y, &p, sigma, &q).unwrap();
        let mut bumped = y.clone();
        bumped[j] += 0.05;
        let s2 = compute_shares(&bumped, &p, sigma, &q).unwrap();
        prop_assert!(s2.as_slice()[j] > s.as_slice()[j]);
    }

    #[test]
    fn shares_are_deterministic(
        y in proptest::collection::vec(-3.0f64..3.0, 4),
        sigma in 0.0f64..3.0,
    ) {
        let q = QuadratureRule::default();
        let p = [1.0, 2.0, 0.5, 1.5];
        let a = compute_shares(&y, &p, sigma, &q).unwrap();
        let b = compute_shares(&y, &p, sigma, &q).unwrap();
        prop_assert_eq!(a, b);
    }
}
