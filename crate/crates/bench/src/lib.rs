//! Fixtures shared by the benchmarks.

use mmtr::sim::{gen_mmtr, MmtrScenario};
use mmtr::{ModelParams, TraceDataset};

/// Case-1 sized dataset (`P = Q = 5 x 5`) with its truth.
pub fn case1(n: usize, m: usize, seed: u64) -> (TraceDataset, ModelParams) {
    let (d, truth) = gen_mmtr(&MmtrScenario::case1(n, m, seed)).expect("valid scenario");
    (d, truth.params)
}

/// Case-2 sized dataset (`P = Q = 10 x 10`) with its truth.
pub fn case2(n: usize, m: usize, seed: u64) -> (TraceDataset, ModelParams) {
    let (d, truth) = gen_mmtr(&MmtrScenario::case2(n, m, seed)).expect("valid scenario");
    (d, truth.params)
}
