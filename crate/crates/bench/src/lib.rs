//! Shared fixtures for the criterion benchmarks.

use pdmr_core::nn::{NetworkSpec, WeightStore};
use pdmr_core::quant::{quantize_weights, QuantizedWeightStore};
use pdmr_core::sim::{simulate_slice, PhantomKind, SimParams, SimulatedSlice};

/// A noisy R = 4 slice with the given size and coil count.
pub fn slice(n: usize, n_coils: usize) -> SimulatedSlice<f32> {
    simulate_slice(&SimParams {
        n_pe: n,
        n_ro: n,
        n_coils,
        rate: 4,
        offset: 0,
        sigma: 0.03,
        seed: 1,
        phantom: PhantomKind::Random,
    })
    .expect("valid benchmark geometry")
}

/// Seeded float network and its int8 version calibrated on the slice's
/// ground truth.
pub fn networks(spec: NetworkSpec, s: &SimulatedSlice<f32>) -> (WeightStore<f32>, QuantizedWeightStore) {
    let w = WeightStore::init_uniform(spec, 3);
    let (q, _) = quantize_weights(&w, std::slice::from_ref(&s.ground_truth)).expect("calibration");
    (w, q)
}
