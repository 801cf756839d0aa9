use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use dv_semigroup::feynman_kac::{estimate_lambda, log_mean_exp};
use dv_semigroup::generator::{carre_du_champ, gamma_sandwich_check, Generator, Potential};
use dv_semigroup::measure::ProbMeasure;
use dv_semigroup::multiparticle::{kronecker_sum, marginal, marginal_coordinate, permutations, separable_potential, symmetrize_measure};
use dv_semigroup::rate_function::{rate_i, relative_entropy, RateOptions};
use dv_semigroup::semigroup::{evolve, expm, sandwich_check, SchrodingerOperator};
use dv_semigroup::spectral::{doob_transform, principal_eigen};

fn generator_from(d: usize, rates: &[f64]) -> Generator {
    let mut raw = DMatrix::from_fn(d, d, |i, j| if i == j { 0.0 } else { rates[i * d + j] });
    for i in 0..d.saturating_sub(1) {
        raw[(i, i + 1)] = raw[(i, i + 1)].max(0.1);
        raw[(i + 1, i)] = raw[(i + 1, i)].max(0.1);
    }
    for i in 0..d {
        raw[(i, i)] = -raw.row(i).sum();
    }
    Generator::new(raw).unwrap()
}

fn rate_entry() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 0.1f64..2.0]
}

/// `(Q, V)` on `d ∈ [2, 5]` states.
fn instance() -> impl Strategy<Value = (Generator, Potential)> {
    (2usize..=5).prop_flat_map(|d| {
        (prop::collection::vec(rate_entry(), d * d), prop::collection::vec(-2.0f64..2.0, d))
            .prop_map(move |(r, v)| (generator_from(d, &r), Potential::from_slice(&v).unwrap()))
    })
}

fn vector(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(lo..hi, d).prop_map(DVector::from_vec)
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = (b.nrows(), b.ncols());
    DMatrix::from_fn(a.nrows() * m, a.ncols() * n, |i, j| a[(i / m, j / n)] * b[(i % m, j % n)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn semigroup_law(((q, v), s, t, seed) in (instance(), 0.0f64..2.0, 0.0f64..2.0, any::<u64>())) {
        let op = SchrodingerOperator::new(&q, &v).unwrap();
        let f = DVector::from_fn(q.dim(), |i, _| ((seed >> (i % 60)) & 7) as f64 - 3.0);
        let joint = evolve(&op, s + t, &f).unwrap();
        let split = evolve(&op, s, &evolve(&op, t, &f).unwrap()).unwrap();
        let scale = op.scale() * joint.amax().max(1.0);
        prop_assert!((joint - split).amax() <= 1e-10 * scale);
    }

    #[test]
    fn markov_semigroup_conserves_mass(((q, _), t) in (instance(), 0.0f64..100.0)) {
        let ones = DVector::from_element(q.dim(), 1.0);
        let out = evolve(&SchrodingerOperator::markov(&q), t, &ones).unwrap();
        prop_assert!((out - ones).amax() <= 1e-12);
    }

    #[test]
    fn carre_du_champ_nonnegative(((q, v), scale) in (instance(), 0.1f64..10.0)) {
        let g = v.values() * scale;
        prop_assert!(carre_du_champ(&q, &g).unwrap().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn gamma_sandwich(((q, v), g_seed) in (instance(), vector(5, -3.0, 3.0))) {
        let g = g_seed.rows(0, q.dim()).into_owned();
        prop_assert!(gamma_sandwich_check(&q, v.values(), &g).unwrap());
    }

    #[test]
    fn sandwich_bounds(((q, v), t, f_seed) in (instance(), 0.0f64..5.0, vector(5, 0.0, 4.0))) {
        let op = SchrodingerOperator::new(&q, &v).unwrap();
        let f = f_seed.rows(0, q.dim()).into_owned();
        prop_assert!(sandwich_check(&op, t, &f).unwrap());
    }

    #[test]
    fn eigenvalue_shift_covariance(((q, v), c) in (instance(), -5.0f64..5.0)) {
        let a = principal_eigen(&q, &v).unwrap();
        let b = principal_eigen(&q, &v.shifted(c)).unwrap();
        prop_assert!((b.lambda - a.lambda - c).abs() <= 1e-10);
        prop_assert!((&b.psi - &a.psi).amax() <= 1e-9);
        prop_assert!(a.lambda >= v.min() && a.lambda <= v.max());
    }

    #[test]
    fn doob_transform_is_generator_with_invariant_mu((q, v) in instance()) {
        let gd = principal_eigen(&q, &v).unwrap();
        let d = doob_transform(&q, &v, &gd).unwrap();
        prop_assert!(d.rates().tr_mul(gd.mu.weights()).amax() <= 1e-9);
    }

    #[test]
    fn rate_function_convex(((q, _), a, b) in (instance(), vector(5, 0.05, 1.0), vector(5, 0.05, 1.0))) {
        let d = q.dim();
        let m1 = ProbMeasure::normalized(a.rows(0, d).into_owned()).unwrap();
        let m2 = ProbMeasure::normalized(b.rows(0, d).into_owned()).unwrap();
        let mid = ProbMeasure::normalized((m1.weights() + m2.weights()) * 0.5).unwrap();
        let opts = RateOptions::default();
        let i = |m: &ProbMeasure| rate_i(&q, m, &opts).unwrap().value;
        prop_assert!(i(&mid) <= 0.5 * i(&m1) + 0.5 * i(&m2) + 1e-10);
        prop_assert!(i(&m1) >= -1e-12);
    }

    #[test]
    fn relative_entropy_nonnegative((a, b) in (vector(4, 0.0, 1.0), vector(4, 0.01, 1.0))) {
        prop_assume!(a.sum() > 0.0);
        let mu = ProbMeasure::normalized(a).unwrap();
        let pi = ProbMeasure::normalized(b).unwrap();
        prop_assert!(relative_entropy(&mu, &pi) >= 0.0);
    }

    #[test]
    fn log_mean_exp_shift((xs, c) in (prop::collection::vec(-50.0f64..50.0, 1..40), -500.0f64..500.0)) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let (a, _) = log_mean_exp(&xs);
        let (b, _) = log_mean_exp(&shifted);
        prop_assert!((b - a - c).abs() <= 1e-12 * (1.0 + c.abs() + a.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kronecker_sum_exponentiates_to_tensor_product(
        (d, rates, t) in (2usize..=3).prop_flat_map(|d| (Just(d), prop::collection::vec(rate_entry(), d * d), prop_oneof![Just(0.3), Just(1.0)]))
    ) {
        let q1 = generator_from(d, &rates);
        let p1 = expm(&(q1.rates() * t)).unwrap();
        let two = kronecker_sum(&q1, 2).unwrap();
        let p2 = expm(&(two.generator().rates() * t)).unwrap();
        prop_assert!((&p2 - kron(&p1, &p1)).amax() <= 1e-10);
        let three = kronecker_sum(&q1, 3).unwrap();
        let p3 = expm(&(three.generator().rates() * t)).unwrap();
        prop_assert!((p3 - kron(&kron(&p1, &p1), &p1)).amax() <= 1e-10);
    }

    #[test]
    fn symmetrized_marginal_averages_coordinates(
        (d, rates, w) in (2usize..=3).prop_flat_map(|d| (Just(d), prop::collection::vec(rate_entry(), d * d), prop::collection::vec(0.01f64..1.0, d * d * d)))
    ) {
        let sys = kronecker_sum(&generator_from(d, &rates), 3).unwrap();
        let mu = ProbMeasure::normalized(DVector::from_vec(w)).unwrap();
        let sym = marginal(&symmetrize_measure(&mu, &sys).unwrap(), &sys).unwrap();
        let mut avg = DVector::zeros(d);
        for k in 0..3 {
            avg += marginal_coordinate(&mu, &sys, k).unwrap().weights() / 3.0;
        }
        prop_assert!((sym.weights() - avg).amax() <= 1e-12);
    }

    #[test]
    fn symmetric_semigroup_commutes_with_permutations(
        (d, rates, v, f, t) in (2usize..=3).prop_flat_map(|d| (
            Just(d),
            prop::collection::vec(rate_entry(), d * d),
            prop::collection::vec(-1.0f64..1.0, d),
            prop::collection::vec(-1.0f64..1.0, d * d * d),
            0.0f64..2.0,
        ))
    ) {
        let sys = kronecker_sum(&generator_from(d, &rates), 3).unwrap();
        let big_v = separable_potential(&Potential::from_slice(&v).unwrap(), 3).unwrap();
        let op = SchrodingerOperator::new(sys.generator(), &big_v).unwrap();
        let f = DVector::from_vec(f);
        let pf = evolve(&op, t, &f).unwrap();
        for sigma in permutations(3) {
            let lhs = sys.permute(&pf, &sigma).unwrap();
            let rhs = evolve(&op, t, &sys.permute(&f, &sigma).unwrap()).unwrap();
            prop_assert!((lhs - rhs).amax() <= 1e-10);
        }
    }

    #[test]
    fn monte_carlo_shift_is_exact(((q, v), c, seed) in (instance(), -3.0f64..3.0, any::<u64>())) {
        let a = estimate_lambda(&q, &v, 2.0, 64, seed).unwrap();
        let b = estimate_lambda(&q, &v.shifted(c), 2.0, 64, seed).unwrap();
        prop_assert!((b.estimate - a.estimate - c).abs() <= 1e-9);
    }
}
