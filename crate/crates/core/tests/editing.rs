use proptest::prelude::*;
use styleres::editops::{interp_edit, invert_edit, ReverseMode};
use tch::Tensor;

fn tensor(v: &[f64]) -> Tensor {
    Tensor::from_slice(v).view([1, 2, 3])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn invert_undoes_interp(
        w in prop::collection::vec(-3.0f64..3.0, 6),
        r in prop::collection::vec(-3.0f64..3.0, 6),
        alpha in 0.0f64..9.5,
    ) {
        let (w, r) = (tensor(&w), tensor(&r));
        let back = invert_edit(&interp_edit(&w, &r, alpha).unwrap(), &r, alpha, ReverseMode::Exact).unwrap();
        let err = f64::try_from((&back - &w).norm()).unwrap();
        let scale = f64::try_from(w.norm()).unwrap().max(1e-12);
        prop_assert!(err / scale < 1e-6, "relative error {}", err / scale);
    }

    #[test]
    fn interp_is_affine_in_alpha(
        w in prop::collection::vec(-3.0f64..3.0, 6),
        r in prop::collection::vec(-3.0f64..3.0, 6),
        alpha in 0.0f64..10.0,
    ) {
        let (w, r) = (tensor(&w), tensor(&r));
        let e = interp_edit(&w, &r, alpha).unwrap();
        let expect = &w + (&r - &w) * (alpha / 10.0);
        prop_assert!(e.allclose(&expect, 1e-12, 1e-12, false));
    }
}
