//! Shared fixtures for the benchmarks.

use crossfusion::geometry::{Box3D, BoxSize, Point3};
use crossfusion::scene_synth::{generate_scene, SceneSample, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scene(index: u64) -> SceneSample {
    generate_scene(&SynthConfig::default(), index).expect("default synthetic scene")
}

/// Dense `rows × cols` cost matrix with entries in `[0, 1)`.
pub fn cost_matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random::<f64>()).collect())
        .collect()
}

pub fn random_boxes(n: usize, seed: u64) -> Vec<Box3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c = Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0);
            let size = BoxSize {
                w: rng.random_range(0.5..3.0),
                l: rng.random_range(0.5..6.0),
                h: 1.5,
            };
            Box3D::new(c, size, rng.random_range(-3.0..3.0), 0)
        })
        .collect()
}
