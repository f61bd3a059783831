use ndarray::Array3;
use proptest::prelude::*;
use wdaseg_nn::losses::{counting_consistency_value, lambda_c, pixel_entropy, select_pseudo_labels};

proptest! {
    #[test]
    fn hinge_is_zero_inside_the_margin(t in 0.0f64..50.0, d in -1.0f64..1.0, eps in 0.1f64..5.0) {
        prop_assert_eq!(counting_consistency_value(t + d * eps, t, eps), 0.0);
    }

    #[test]
    fn hinge_grows_linearly_outside(t in 0.0f64..50.0, d in 0.0f64..20.0, eps in 0.1f64..5.0) {
        let above = counting_consistency_value(t + eps + d, t, eps);
        let below = counting_consistency_value(t - eps - d, t, eps);
        prop_assert!((above - d).abs() < 1e-9 && (below - d).abs() < 1e-9);
    }

    #[test]
    fn entropy_is_symmetric_and_bounded(p in 0.0f64..=1.0) {
        let a = pixel_entropy(&[p, 1.0 - p]).unwrap();
        let b = pixel_entropy(&[1.0 - p, p]).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&a));
    }

    #[test]
    fn counting_weight_decays(z_max in 1usize..5000, z in 0usize..5000) {
        let z = z.min(z_max);
        let l = lambda_c(z, z_max);
        prop_assert!((0.0..=1.0).contains(&l));
        if z < z_max {
            prop_assert!(lambda_c(z + 1, z_max) < l);
        }
    }

    #[test]
    fn selection_covers_the_decile(
        probs in prop::collection::vec(0.0f32..=1.0, 4..64),
        k in 1usize..=9,
    ) {
        let n = probs.len();
        let p = Array3::from_shape_fn((2, 1, n), |(l, _, i)| if l == 1 { probs[i] } else { 1.0 - probs[i] });
        let sel = select_pseudo_labels(&p, k).unwrap();
        let n_fg = probs.iter().filter(|&&v| v > 0.5).count();
        for (cls, n_l) in [(0u8, n - n_fg), (1u8, n_fg)] {
            // Ties at the cutoff can add pixels; the nearest-rank count is a lower bound.
            prop_assert!(sel.num_selected_of(cls) >= (k * n_l).div_ceil(10));
        }
    }
}
