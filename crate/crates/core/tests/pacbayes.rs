use kronflow::pacbayes::{
    bernoulli_kl, catoni_bound, invert_bernoulli_kl, mcallester_bound, optimal_catoni_beta, pinsker_bound,
    union_bound_prior_penalty, BoundInputs, PRIOR_GRID_B, PRIOR_GRID_C,
};
use proptest::prelude::*;

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    while b - a > 1e-11 * (1.0 + a.abs()) {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    0.5 * (a + b)
}

fn catoni_at(q: f64, kl: f64, m: usize, delta: f64, beta: f64) -> f64 {
    (q + beta / m as f64 * (kl + (1.0 / delta).ln())) / (1.0 - 1.0 / (2.0 * beta))
}

#[test]
fn optimal_beta_matches_numeric_minimizer() {
    let numeric = golden_section(|b| catoni_at(0.05, 1000.0, 60_000, 0.025, b), 0.5 + 1e-9, 1e4);
    let closed = optimal_catoni_beta(0.05, 1000.0, 60_000, 0.025).unwrap();
    assert!((numeric - closed).abs() < 1e-6, "{numeric} vs {closed}");
}

#[test]
fn catoni_is_convex_in_beta() {
    let h = 0.01;
    let grid: Vec<f64> = (1..2000).map(|i| 0.5 + h * i as f64).collect();
    for w in grid.windows(3) {
        let f: Vec<f64> = w.iter().map(|&b| catoni_at(0.05, 1000.0, 60_000, 0.025, b)).collect();
        assert!(f[0] - 2.0 * f[1] + f[2] >= -1e-12);
    }
}

#[test]
fn prior_penalty_grows_as_variance_shrinks() {
    let start = PRIOR_GRID_C * (-1.0 / PRIOR_GRID_B).exp();
    let mut prev = union_bound_prior_penalty(start, PRIOR_GRID_B, PRIOR_GRID_C, 0.1)
        .unwrap()
        .0;
    for i in 1..50 {
        let lam = start * 0.8f64.powi(i);
        let p = union_bound_prior_penalty(lam, PRIOR_GRID_B, PRIOR_GRID_C, 0.1)
            .unwrap()
            .0;
        assert!(p > prev);
        prev = p;
    }
}

fn tuple() -> impl Strategy<Value = (f64, f64, usize, f64)> {
    (0.0f64..1.0, 0.0f64..5000.0, 2usize..100_000, 0.001f64..0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mcallester_is_tighter_than_pinsker((q, kl, m, delta) in tuple()) {
        let inputs = BoundInputs::new(q, kl, m, delta);
        let mc = mcallester_bound(&inputs).unwrap().value;
        let pin = pinsker_bound(&inputs).unwrap();
        prop_assert!(mc <= pin.value.min(1.0) + 1e-12 || pin.clamped);
        prop_assert!(mc >= q);
    }

    #[test]
    fn inversion_is_exact_and_monotone(q in 0.0f64..0.99, b1 in 0.0f64..2.0, b2 in 0.0f64..2.0) {
        let (lo, hi) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
        let p1 = invert_bernoulli_kl(q, lo);
        let p2 = invert_bernoulli_kl(q, hi);
        prop_assert!(p1 <= p2);
        if p2 < 1.0 - 1e-4 {
            prop_assert!((bernoulli_kl(q, p2) - hi).abs() < 1e-10);
        }
    }

    #[test]
    fn optimal_beta_exceeds_one_and_minimizes((q, kl, m, delta) in tuple()) {
        prop_assume!(q > 0.0);
        let beta = optimal_catoni_beta(q, kl, m, delta).unwrap();
        prop_assert!(beta > 1.0);
        let best = catoni_at(q, kl, m, delta, beta);
        for b in [0.51, 0.75, 1.0, 1.5, 2.0, 5.0, 20.0, 100.0] {
            prop_assert!(best <= catoni_at(q, kl, m, delta, b) * (1.0 + 1e-12));
        }
        let inputs = BoundInputs::new(q, kl, m, delta).with_beta(beta);
        let r = catoni_bound(&inputs).unwrap();
        prop_assert_eq!(r.value, best.min(1.0));
    }

    #[test]
    fn bounds_are_monotone_in_kl((q, kl, m, delta) in tuple(), extra in 0.0f64..100.0) {
        let a = mcallester_bound(&BoundInputs::new(q, kl, m, delta)).unwrap().value;
        let b = mcallester_bound(&BoundInputs::new(q, kl + extra, m, delta)).unwrap().value;
        prop_assert!(a <= b);
    }

    #[test]
    fn reports_replay_bit_exactly((q, kl, m, delta) in tuple()) {
        let r = mcallester_bound(&BoundInputs::new(q, kl, m, delta)).unwrap();
        prop_assert_eq!(r.recompute().unwrap().to_bits(), r.value.to_bits());
    }
}
