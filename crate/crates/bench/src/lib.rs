//! Shared instance builders for the benchmark suite.

use ndarray::{Array1, Array2};
use postsel::rng::{RngHub, Substream};
use postsel::Dataset;
use rand_distr::Distribution;

/// Gaussian regression instance with a planted signal on the first
/// `sparsity` columns.
pub fn gaussian_instance(n: usize, p: usize, sparsity: usize, seed: u64) -> Dataset {
    let hub = RngHub::new(seed);
    let mut rng = hub.stream(Substream::Data, 0);
    let mut x = Array2::zeros((n, p));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        for j in 0..p {
            x[[i, j]] = rand_distr::StandardNormal.sample(&mut rng);
        }
        let mut mu = 0.0;
        for j in 0..sparsity {
            mu += 2.5 * x[[i, j]];
        }
        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
        y[i] = mu + z;
    }
    Dataset::new(x, y).unwrap()
}

/// Random vector for the projection benchmarks.
pub fn random_vector(len: usize, seed: u64) -> Array1<f64> {
    let hub = RngHub::new(seed);
    let mut rng = hub.stream(Substream::Data, 1);
    Array1::from_iter((0..len).map(|_| {
        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
        z
    }))
}
