use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tiltflow::costmodel::{batch_weights, skl_loss_values};
use tiltflow::field2d::{self, Geometry, GridField, GridPmf};
use tiltflow::guide;
use tiltflow::rng;
use tiltflow::schedule::Schedule;

fn geom() -> Geometry {
    Geometry::square(3.5, 6)
}

fn pmf_strategy() -> impl Strategy<Value = GridPmf> {
    prop::collection::vec(0.01f64..5.0, 36).prop_map(|w| GridPmf::from_weights(geom(), w).unwrap())
}

fn field_strategy() -> impl Strategy<Value = GridField> {
    prop::collection::vec(-3.0f64..3.0, 36).prop_map(|v| GridField::new(geom(), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tilt_is_a_semigroup(p in pmf_strategy(), c in field_strategy(), l1 in 0.0f64..4.0, l2 in 0.0f64..4.0) {
        let once = field2d::tilt(&p, &c, l1 + l2).unwrap();
        let twice = field2d::tilt(&field2d::tilt(&p, &c, l1).unwrap(), &c, l2).unwrap();
        for (a, b) in once.mass.iter().zip(&twice.mass) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!((once.total() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_skl_symmetric(a in pmf_strategy(), b in pmf_strategy()) {
        prop_assert!(field2d::kl(&a, &b).unwrap() >= 0.0);
        prop_assert!(field2d::kl(&a, &a).unwrap().abs() <= 1e-15);
        prop_assert_eq!(field2d::skl(&a, &b).unwrap(), field2d::skl(&b, &a).unwrap());
    }

    #[test]
    fn histogram_is_a_pmf(pts in prop::collection::vec((-6.0f64..6.0, -6.0f64..6.0), 1..50)) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let h = field2d::histogram(&pts, geom()).unwrap();
        prop_assert!((h.total() - 1.0).abs() <= 1e-12);
        prop_assert!(h.mass.iter().all(|m| *m >= 0.0));
    }

    #[test]
    fn batch_weights_average_one(v in prop::collection::vec(-50.0f64..50.0, 2..40), shift in -100.0f64..100.0) {
        let w = batch_weights(&v);
        prop_assert!((w.iter().sum::<f64>() / v.len() as f64 - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        for (a, b) in w.iter().zip(batch_weights(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        }
    }

    #[test]
    fn skl_loss_is_nonnegative(pred in prop::collection::vec(-5.0f64..5.0, 2..20), seed in 0u64..1000) {
        let mut r = rng::substream(seed, "prop/skl", 0);
        let target: Vec<f64> = pred.iter().map(|p| p + rng::normal_vec(&mut r, 1)[0]).collect();
        let (l, _) = skl_loss_values(&pred, &target, false).unwrap();
        prop_assert!(l >= -1e-12);
    }

    #[test]
    fn posterior_mean_round_trips(x in prop::collection::vec(-4.0f64..4.0, 3), mu in prop::collection::vec(-4.0f64..4.0, 3), t in 0.01f64..0.99) {
        let s = Schedule::default();
        let v = s.velocity_from_mean(&x, &mu, t);
        let back = s.posterior_mean(&x, &v, t);
        for (a, b) in back.iter().zip(&mu) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn antithetic_draws_cancel(d in 1usize..6, pairs in 1usize..20, seed in 0u64..1000) {
        let e: DMatrix<f64> = guide::standard_normals(d, 2 * pairs, true, &mut rng::substream(seed, "prop/anti", 0));
        let sum: DVector<f64> = e.column_sum();
        prop_assert!(sum.iter().all(|v| *v == 0.0));
    }
}
