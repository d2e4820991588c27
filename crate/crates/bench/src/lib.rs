//! Shared fixtures for the criterion benches.

use rjepa::cells::RgcWeights;
use rjepa::{Matrix, Rng};

/// Diagonal RGC with gate entries `N(0, 0.5²)` and a random input stream.
pub fn fixture(n: usize, t: usize, seed: u64) -> (RgcWeights, Vec<Vec<f64>>) {
    let mut rng = Rng::new(seed);
    let w: [Matrix; 4] = std::array::from_fn(|_| Matrix::diag(&rng.normal_vec(n, 0.5)));
    let w = RgcWeights::new(w, true, Default::default()).expect("diagonal weights are valid");
    let xs = (0..t).map(|_| rng.normal_vec(n, 1.0)).collect();
    (w, xs)
}
