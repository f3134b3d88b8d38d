//! Timings for the sampling hot path at the planar-experiment shapes.
//! Training cost is dominated by these three calls; check here first when
//! an experiment slows down.

use std::time::Instant;
use warpalign::sampler::{bilinear_backward, bilinear_grad_p, bilinear_sample, make_grid, FrameSpec};
use warpalign::synth::procedural_photo;
use warpalign::warp::{WarpFamily, WarpParams};

fn timed<T>(label: &str, reps: usize, mut f: impl FnMut() -> T) {
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    println!("{label:\u{20}<16} {:8.1} ns/call", t0.elapsed().as_nanos() as f64 / reps as f64);
}

fn main() {
    let photo = procedural_photo(160, 160, 7);
    let frame = FrameSpec::window(160, 160, 79.5, 79.5, 24.5, 24.5).unwrap();
    let p = WarpParams::new(
        WarpFamily::Affine,
        vec![0.05, -0.02, 0.1, 0.03, -0.04, -0.08],
    )
    .unwrap();
    let reps = 20_000;

    timed("make_grid", reps, || make_grid(&p, (50, 50), &frame).unwrap());
    let grid = make_grid(&p, (50, 50), &frame).unwrap();
    timed("bilinear_sample", reps, || bilinear_sample(&photo, &grid).unwrap());
    let out = bilinear_sample(&photo, &grid).unwrap();
    timed("bilinear_bwd", reps, || {
        bilinear_backward(&out, &photo, &grid, &p).unwrap()
    });
    timed("bilinear_grad_p", reps, || {
        bilinear_grad_p(&out, &photo, &grid, &p).unwrap()
    });
}
