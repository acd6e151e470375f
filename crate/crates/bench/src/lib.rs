//! Fixtures shared by the benchmarks.

use minsharp::data::synthetic_blobs;
use minsharp::{Dataset, Mlp, Rng};

/// A He-initialized network over `dims` with `n` blob samples to match.
pub fn fixture(dims: &[usize], n: usize, seed: u64) -> (Mlp, Dataset) {
    let mut rng = Rng::seed_from_u64(seed);
    let net = Mlp::init(dims, &mut rng).expect("valid dims");
    let k = *dims.last().expect("dims nonempty");
    let data = synthetic_blobs(n.max(k), dims[0], k, 1.0, &mut rng).expect("valid blob parameters");
    (net, data.range(0..n).expect("n samples available"))
}
