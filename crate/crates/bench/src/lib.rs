//! Inputs shared by the benchmarks.

use rfadet::data::{generate_dataset, Sample, SceneSpec};
use rfadet::gradcheck::random_tensor;
use rfadet::metrics::{BBox, Detection};
use rfadet::{Rng64, Tensor};

/// Uniform `[-1, 1]` activations.
pub fn activations(extents: &[usize], seed: u64) -> Tensor<f32> {
    random_tensor(&mut Rng64::new(seed), extents, 1.0)
}

/// Synthetic training images at the reference resolution.
pub fn samples(n: usize) -> Vec<Sample> {
    generate_dataset(&SceneSpec::with_seed(7, 64), n, 0).expect("valid spec").0
}

/// Clustered detections over a few images and classes, as produced before NMS.
pub fn raw_detections(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = Rng64::new(seed);
    (0..n)
        .map(|_| {
            let (cx, cy) = (rng.range(8.0, 56.0), rng.range(8.0, 56.0));
            Detection {
                bbox: BBox::from_center(cx, cy, rng.range(4.0, 24.0), rng.range(4.0, 24.0)),
                class_id: rng.below(3) as usize,
                score: rng.uniform(),
                image_id: rng.below(4) as usize,
            }
        })
        .collect()
}
