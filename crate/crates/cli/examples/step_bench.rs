//! Per-phase timing of one planar training iteration (IC-STN-4, batch 100).
//! The suite-level runtime bound lives in the acceptance tests; this exists
//! to localize a regression when that bound starts failing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use warpalign::arch::{NetworkSpec, Variant};
use warpalign::data::{PerturbConfig, PlanarStream};
use warpalign::optim::sgd_step_group;
use warpalign::pipeline::AlignmentPipeline;
use warpalign::sampler::FrameSpec;
use warpalign::synth::procedural_photo;
use warpalign::tensor::Tensor;
use warpalign::warp::WarpFamily;

fn main() {
    let photo = procedural_photo(160, 160, 7);
    let frame = FrameSpec::window(160, 160, 79.5, 79.5, 24.5, 24.5).unwrap();
    let spec =
        NetworkSpec::build("[FC(6)]x4", Variant::Icstn, WarpFamily::Affine, (1, 50, 50)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pipe = AlignmentPipeline::new(spec, &mut rng);
    let cfg = PerturbConfig::new(WarpFamily::Affine, 7.5, 7.5).unwrap();
    let mut stream = PlanarStream::new(photo.clone(), frame, (50, 50), cfg, 2).unwrap();
    let n = 100;

    let reps = 100;
    let (mut t_data, mut t_fwd, mut t_bwd, mut t_sgd) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..reps {
        let t0 = Instant::now();
        let batch = stream.next_batch(n).unwrap();
        t_data += t0.elapsed().as_secs_f64();

        let sources: Vec<&Tensor> = (0..n).map(|_| &photo).collect();
        let ps: Vec<_> = batch.iter().map(|s| s.perturbation.clone()).collect();
        let t0 = Instant::now();
        let (final_p, cache) = pipe.cstn_align(&sources, &frame, &ps).unwrap();
        t_fwd += t0.elapsed().as_secs_f64();

        let grads: Vec<Vec<f64>> = final_p
            .iter()
            .map(|p| p.as_slice().iter().map(|v| v / n as f64).collect())
            .collect();
        let t0 = Instant::now();
        pipe.cstn_backward(&cache, &sources, None, Some(&grads)).unwrap();
        t_bwd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        for stack in pipe.predictors_mut() {
            sgd_step_group(stack, 3e-4);
        }
        t_sgd += t0.elapsed().as_secs_f64();
    }
    let scale = 1e3 / reps as f64;
    println!("data {:7.2} ms/iter", t_data * scale);
    println!("fwd  {:7.2} ms/iter", t_fwd * scale);
    println!("bwd  {:7.2} ms/iter", t_bwd * scale);
    println!("sgd  {:7.2} ms/iter", t_sgd * scale);
}
