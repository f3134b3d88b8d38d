//! Group-law and matrix-equivalence properties of the warp algebra,
//! exercised over randomly drawn parameter vectors.

use proptest::prelude::*;

use warpalign::warp::{
    canonical_corners, compose_jacobians, fit_warp_to_points, WarpFamily, WarpParams,
};

fn affine_strategy() -> impl Strategy<Value = WarpParams> {
    proptest::collection::vec(-0.25f64..0.25, 6)
        .prop_map(|p| WarpParams::new(WarpFamily::Affine, p).unwrap())
}

/// Perspective entries kept small enough that denominators stay well away
/// from zero even after composing three draws.
fn homography_strategy() -> impl Strategy<Value = WarpParams> {
    (
        proptest::collection::vec(-0.25f64..0.25, 6),
        proptest::collection::vec(-0.08f64..0.08, 2),
    )
        .prop_map(|(mut p, tail)| {
            p.extend(tail);
            WarpParams::new(WarpFamily::Homography, p).unwrap()
        })
}

fn max_param_diff(a: &WarpParams, b: &WarpParams) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    // Round-tripping 1 + p through the matrix entries costs one rounding
    // step, so identity composition of a random warp is only eps-close.
    #[test]
    fn identity_absorbs_affine(p in affine_strategy()) {
        let id = WarpParams::identity(WarpFamily::Affine);
        prop_assert!(max_param_diff(&p.compose(&id).unwrap(), &p) < 1e-12);
        prop_assert!(max_param_diff(&id.compose(&p).unwrap(), &p) < 1e-12);
    }

    #[test]
    fn identity_absorbs_homography(p in homography_strategy()) {
        let id = WarpParams::identity(WarpFamily::Homography);
        prop_assert!(max_param_diff(&p.compose(&id).unwrap(), &p) < 1e-12);
        prop_assert!(max_param_diff(&id.compose(&p).unwrap(), &p) < 1e-12);
    }

    #[test]
    fn composition_is_associative(
        a in affine_strategy(),
        b in affine_strategy(),
        c in affine_strategy(),
    ) {
        let left = a.compose(&b).unwrap().compose(&c).unwrap();
        let right = a.compose(&b.compose(&c).unwrap()).unwrap();
        prop_assert!(max_param_diff(&left, &right) < 1e-9);
    }

    #[test]
    fn composition_is_associative_homography(
        a in homography_strategy(),
        b in homography_strategy(),
        c in homography_strategy(),
    ) {
        let left = a.compose(&b).unwrap().compose(&c).unwrap();
        let right = a.compose(&b.compose(&c).unwrap()).unwrap();
        prop_assert!(max_param_diff(&left, &right) < 1e-9);
    }

    #[test]
    fn inverse_round_trips(p in affine_strategy()) {
        let id = WarpParams::identity(WarpFamily::Affine);
        let round = p.compose(&p.invert().unwrap()).unwrap();
        prop_assert!(max_param_diff(&round, &id) < 1e-10);
        let twice = p.invert().unwrap().invert().unwrap();
        prop_assert!(max_param_diff(&twice, &p) < 1e-10);
    }

    #[test]
    fn inverse_round_trips_homography(p in homography_strategy()) {
        let id = WarpParams::identity(WarpFamily::Homography);
        let round = p.compose(&p.invert().unwrap()).unwrap();
        prop_assert!(max_param_diff(&round, &id) < 1e-10);
    }

    #[test]
    fn parameter_compose_equals_matrix_product_affine(
        p in affine_strategy(),
        dp in affine_strategy(),
    ) {
        let via_params = p.compose(&dp).unwrap().to_matrix();
        let via_matrices = dp.to_matrix() * p.to_matrix();
        prop_assert!((via_params - via_matrices).abs().max() < 1e-12);
    }

    #[test]
    fn parameter_compose_equals_matrix_product_homography(
        p in homography_strategy(),
        dp in homography_strategy(),
    ) {
        let via_params = p.compose(&dp).unwrap().to_matrix();
        let mut via_matrices = dp.to_matrix() * p.to_matrix();
        via_matrices /= via_matrices[(2, 2)];
        prop_assert!((via_params - via_matrices).abs().max() < 1e-9);
    }

    /// The affine input Jacobian minus the identity carries exactly the
    /// twelve entries of the update's linear part, independent of the input
    /// parameters.
    #[test]
    fn affine_input_jacobian_structure(
        p1 in affine_strategy(),
        p2 in affine_strategy(),
        dp in affine_strategy(),
    ) {
        let (d_in_1, _) = compose_jacobians(&p1, &dp).unwrap();
        let (d_in_2, _) = compose_jacobians(&p2, &dp).unwrap();
        prop_assert_eq!(&d_in_1, &d_in_2);

        let d = dp.as_slice();
        for r in 0..6 {
            for c in 0..6 {
                let expected = match (r % 3 == c % 3, r < 3, c < 3) {
                    (true, true, true) => d[0],
                    (true, true, false) => d[1],
                    (true, false, true) => d[3],
                    (true, false, false) => d[4],
                    _ => 0.0,
                } + if r == c { 1.0 } else { 0.0 };
                prop_assert_eq!(d_in_1[(r, c)], expected);
            }
        }
    }

    #[test]
    fn corner_fit_round_trips(p in affine_strategy()) {
        let corners = p.warp_corners().unwrap();
        let fitted = fit_warp_to_points(WarpFamily::Affine, &canonical_corners(), &corners).unwrap();
        prop_assert!(max_param_diff(&fitted, &p) < 1e-9);
    }

    #[test]
    fn corner_fit_round_trips_homography(p in homography_strategy()) {
        let corners = p.warp_corners().unwrap();
        let fitted =
            fit_warp_to_points(WarpFamily::Homography, &canonical_corners(), &corners).unwrap();
        prop_assert!(max_param_diff(&fitted, &p) < 1e-9);
    }
}

#[test]
fn composing_identities_is_exactly_zero() {
    for family in [WarpFamily::Affine, WarpFamily::Homography] {
        let id = WarpParams::identity(family);
        let out = id.compose(&id).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }
}
