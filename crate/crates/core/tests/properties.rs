//! Cross-module invariants on randomized instances, plus a couple of
//! proptest-driven structural properties.

use azopg::bench::{mass_spring_damper, random_test_case};
use azopg::engine::delay_bound;
use azopg::lqr::{optimal_policy, value_certificate, Policy};
use azopg::trace::{Trace, TraceRow};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn gradient_matches_finite_differences_on_random_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = 1e-6;
    for case in 0..20 {
        let states = rng.random_range(2..=8);
        let inputs = rng.random_range(1..=states);
        let (sys, policy) = random_test_case::<f64, _>(states, inputs, &mut rng);
        let cert = value_certificate(&sys, &policy).unwrap();
        let mut fd = DMatrix::<f64>::zeros(inputs, states);
        for i in 0..inputs {
            for j in 0..states {
                let mut plus = policy.gain().clone();
                plus[(i, j)] += h;
                let mut minus = policy.gain().clone();
                minus[(i, j)] -= h;
                let fp = value_certificate(&sys, &Policy::new(plus)).unwrap().cost;
                let fm = value_certificate(&sys, &Policy::new(minus)).unwrap().cost;
                fd[(i, j)] = (fp - fm) / (2.0 * h);
            }
        }
        let rel = (&cert.grad - &fd).norm() / cert.grad.norm();
        assert!(rel <= 1e-5, "case {case}: FD relative error {rel:.3e}");
    }
}

#[test]
fn certificates_are_symmetric_to_machine_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let states = rng.random_range(1..=8);
        let inputs = rng.random_range(1..=states);
        let (sys, policy) = random_test_case::<f64, _>(states, inputs, &mut rng);
        let cert = value_certificate(&sys, &policy).unwrap();
        assert!((&cert.p - cert.p.transpose()).norm() <= 1e-12);
        assert!((&cert.x - cert.x.transpose()).norm() <= 1e-12);
        assert!(cert.cost >= 0.0);
    }
}

#[test]
fn optimum_lower_bounds_sampled_costs_on_the_benchmark_chain() {
    let sys = mass_spring_damper::<f64>(4).unwrap();
    let seed = Policy::zeros(4, 8);
    let (k_star, f_star) = optimal_policy(&sys, &seed).unwrap();
    assert!(value_certificate(&sys, &k_star).unwrap().grad.norm() <= 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut accepted = 0;
    while accepted < 100 {
        let gain = DMatrix::from_fn(4, 8, |_, _| 0.4 * rng.sample::<f64, _>(StandardNormal));
        let policy = Policy::new(gain);
        if !azopg::is_stabilizing(&sys, &policy).unwrap() {
            continue;
        }
        let cost = value_certificate(&sys, &policy).unwrap().cost;
        assert!(
            cost >= f_star - 1e-9,
            "sampled cost {cost} beats the optimum {f_star}"
        );
        accepted += 1;
    }
}

#[test]
fn optimum_lower_bounds_costs_on_random_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..10 {
        let states = rng.random_range(2..=6);
        let inputs = rng.random_range(1..=states);
        let (sys, policy) = random_test_case::<f64, _>(states, inputs, &mut rng);
        let (_, f_star) = optimal_policy(&sys, &policy).unwrap();
        for _ in 0..10 {
            let (_, other) = {
                // Fresh gain on the same plant via the rejection helper.
                let gain = DMatrix::from_fn(inputs, states, |_, _| {
                    0.3 * rng.sample::<f64, _>(StandardNormal)
                });
                let candidate = Policy::new(gain);
                if !azopg::is_stabilizing(&sys, &candidate).unwrap() {
                    continue;
                }
                (0, value_certificate(&sys, &candidate).unwrap().cost)
            };
            assert!(other >= f_star - 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn trace_rows_round_trip_through_csv(
        iteration in 0u64..1_000_000,
        time_s in 0.0f64..1e6,
        rollouts_total in 0u64..u64::MAX / 2,
        rel_error in proptest::num::f64::POSITIVE | proptest::num::f64::ZERO,
        grad_norm in proptest::num::f64::POSITIVE | proptest::num::f64::ZERO,
        max_delay in 0u64..1_000,
    ) {
        let mut trace = Trace::new(1);
        trace.rows.push(TraceRow {
            iteration,
            time_s,
            rollouts_total,
            rel_error,
            grad_norm,
            max_delay,
        });
        let text = trace.to_csv_string().unwrap();
        let back = Trace::read_csv(text.as_bytes()).unwrap();
        prop_assert_eq!(back.rows, trace.rows);
    }

    #[test]
    fn delay_bound_structure(
        t_lo in 1e-3f64..10.0,
        stretch in 1.0f64..20.0,
        m in 1usize..64,
        n in 1usize..64,
    ) {
        let t_hi = t_lo * stretch;
        let bound = delay_bound(t_lo, t_hi, m, n).unwrap();
        prop_assert!(bound >= 1);
        if m == 1 {
            prop_assert_eq!(bound, 1);
        }
        // Monotone in the number of workers and in the interval stretch.
        let more_workers = delay_bound(t_lo, t_hi, m + 1, n).unwrap();
        prop_assert!(more_workers >= bound);
        let wider = delay_bound(t_lo, t_hi * 2.0, m, n).unwrap();
        prop_assert!(wider >= bound);
        // Batching dilutes staleness.
        let bigger_batch = delay_bound(t_lo, t_hi, m, n + 1).unwrap();
        prop_assert!(bigger_batch <= bound);
    }
}
