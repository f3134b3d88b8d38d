//! Geometry preservation versus the boundary effect.
//!
//! Zooming out from a crop can either be done by composing warp parameters
//! and resampling the original source (which reaches real pixels outside
//! the crop window) or by resampling the already-cropped image (which has
//! nothing to show there and zero-fills). These tests pin both behaviors.

use warpalign::sampler::{bilinear_sample, make_grid, FrameSpec};
use warpalign::synth::procedural_photo;
use warpalign::warp::{WarpFamily, WarpParams};

fn zoom(scale: f64) -> WarpParams {
    WarpParams::new(
        WarpFamily::Affine,
        vec![scale - 1.0, 0.0, 0.0, 0.0, scale - 1.0, 0.0],
    )
    .unwrap()
}

fn zero_fraction(data: &[f64]) -> f64 {
    // The synthetic photo is clamped to [0.05, 0.95], so exact zeros can
    // only come from out-of-bounds fill.
    data.iter().filter(|&&v| v == 0.0).count() as f64 / data.len() as f64
}

#[test]
fn parameter_path_keeps_content_the_chained_path_discards() {
    let photo = procedural_photo(100, 100, 99);
    let window = FrameSpec::window(100, 100, 49.5, 49.5, 24.5, 24.5).unwrap();
    let half = (1.5f64).sqrt();

    // Parameter path: compose two half zooms, sample the ORIGINAL source
    // once. The window plus a 1.5x reach stays inside the 100x100 photo.
    let composed = zoom(half).compose(&zoom(half)).unwrap();
    let grid = make_grid(&composed, (50, 50), &window).unwrap();
    let via_params = bilinear_sample(&photo, &grid).unwrap();
    assert!(
        zero_fraction(via_params.data()) < 0.01,
        "parameter path lost {:.1}% of pixels",
        100.0 * zero_fraction(via_params.data())
    );

    // It matches one direct sample at the full zoom.
    let direct_grid = make_grid(&zoom(1.5), (50, 50), &window).unwrap();
    let direct = bilinear_sample(&photo, &direct_grid).unwrap();
    assert!(via_params.max_abs_diff(&direct) <= 0.02);

    // Chained path: crop first, then resample the crop twice. Everything
    // outside the crop is gone, so the final image is mostly fill.
    let crop_grid = make_grid(
        &WarpParams::identity(WarpFamily::Affine),
        (50, 50),
        &window,
    )
    .unwrap();
    let crop = bilinear_sample(&photo, &crop_grid).unwrap();
    let crop_frame = FrameSpec::full(50, 50).unwrap();
    let step1 = bilinear_sample(&crop, &make_grid(&zoom(half), (50, 50), &crop_frame).unwrap())
        .unwrap();
    let step2 = bilinear_sample(&step1, &make_grid(&zoom(half), (50, 50), &crop_frame).unwrap())
        .unwrap();
    assert!(
        zero_fraction(step2.data()) > 0.20,
        "chained path kept too much: {:.1}% zeros",
        100.0 * zero_fraction(step2.data())
    );
}

#[test]
fn interior_content_agrees_between_paths() {
    // Where the chained path still has data (its central region), both
    // paths show the same scene, just with extra interpolation blur on the
    // chained one.
    let photo = procedural_photo(100, 100, 99);
    let window = FrameSpec::window(100, 100, 49.5, 49.5, 24.5, 24.5).unwrap();

    let direct_grid = make_grid(&zoom(1.5), (50, 50), &window).unwrap();
    let direct = bilinear_sample(&photo, &direct_grid).unwrap();

    let crop_grid = make_grid(
        &WarpParams::identity(WarpFamily::Affine),
        (50, 50),
        &window,
    )
    .unwrap();
    let crop = bilinear_sample(&photo, &crop_grid).unwrap();
    let crop_frame = FrameSpec::full(50, 50).unwrap();
    let chained =
        bilinear_sample(&crop, &make_grid(&zoom(1.5), (50, 50), &crop_frame).unwrap()).unwrap();

    // Central 20x20 block: canonical reach 1.5 * 0.4 < 1, inside the crop.
    let mut worst: f64 = 0.0;
    for row in 15..35 {
        for col in 15..35 {
            let i = row * 50 + col;
            worst = worst.max((direct.data()[i] - chained.data()[i]).abs());
        }
    }
    assert!(worst < 0.05, "interior disagreement {worst}");
    assert!(worst > 0.0);
}
