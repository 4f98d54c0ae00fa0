use gvdp_core::aggregation::{flatten_upper, psd_projection, unflatten};
use gvdp_core::blb::{multinomial_weights, partition, Dataset};
use gvdp_core::coinpress::{project_to_ball, step_budgets, MeanBall};
use gvdp_core::linalg::min_eigenvalue;
use gvdp_core::privacy::{compose_budgets, PrivacyBudget};
use gvdp_core::stream;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn symmetric(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |i, j| entries[i * d + j]);
    (&m + m.transpose()) * 0.5
}

proptest! {
    #[test]
    fn psd_projection_dominates_and_is_idempotent(
        d in 1usize..6,
        entries in prop::collection::vec(-10.0f64..10.0, 36),
    ) {
        let m = symmetric(d, &entries);
        let p = psd_projection(&m, 0.0).unwrap();
        prop_assert!(min_eigenvalue(&p) >= -1e-10);
        prop_assert!(min_eigenvalue(&(&p - &m)) >= -1e-10);
        let pp = psd_projection(&p, 0.0).unwrap();
        prop_assert!((pp - &p).amax() <= 1e-10);
    }

    #[test]
    fn ball_projection_lands_inside(
        point in prop::collection::vec(-1e3f64..1e3, 4),
        center in prop::collection::vec(-10.0f64..10.0, 4),
        radius in 1e-3f64..100.0,
    ) {
        let ball = MeanBall::new(DVector::from_vec(center), radius).unwrap();
        let x = DVector::from_vec(point);
        let p = project_to_ball(&x, &ball);
        prop_assert!((&p - &ball.center).norm() <= radius * (1.0 + 1e-12));
        if (&x - &ball.center).norm() <= radius {
            prop_assert_eq!(p, x);
        }
    }

    #[test]
    fn step_budgets_sum_exactly(rho in 1e-6f64..10.0, t in 1usize..20) {
        let total = PrivacyBudget::new(rho).unwrap();
        let parts = step_budgets(total, t).unwrap();
        prop_assert_eq!(parts.len(), t);
        prop_assert!(parts.iter().all(|p| p.rho() > 0.0));
        prop_assert_eq!(compose_budgets(&parts), total);
    }

    #[test]
    fn flatten_round_trip(d in 1usize..7, entries in prop::collection::vec(-5.0f64..5.0, 49)) {
        let m = symmetric(d, &entries);
        let flat = flatten_upper(&m).unwrap();
        prop_assert_eq!(flat.len(), d * (d + 1) / 2);
        prop_assert_eq!(unflatten(&flat).unwrap(), m);
    }

    #[test]
    fn multinomial_weights_sum_to_n(b in 1usize..300, n in 1u64..100_000, seed in any::<u64>()) {
        prop_assume!(b as u64 <= n);
        let mut rng = stream::from_seed(seed);
        let w = multinomial_weights(b, n, &mut rng).unwrap();
        prop_assert_eq!(w.len(), b);
        prop_assert_eq!(w.iter().sum::<u64>(), n);
    }

    #[test]
    fn partition_sizes_differ_by_at_most_one(n in 2usize..500, k in 1usize..50, seed in any::<u64>()) {
        prop_assume!(2 * k <= n);
        let data = Dataset::new((0..n).map(|i| i as f64).collect(), 1, None).unwrap();
        let mut rng = stream::from_seed(seed);
        let parts = partition(&data, k, &mut rng).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.nrows()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen: Vec<f64> = parts.iter().flat_map(|p| p.column(0)).collect();
        seen.sort_by(f64::total_cmp);
        prop_assert_eq!(seen, (0..n).map(|i| i as f64).collect::<Vec<_>>());
    }
}
