//! Wall-clock timing of the fused selective scan for both kernels.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use udmamba_core::selective_scan::{S6Params, ScanKernel};
use udmamba_core::{Graph, Tensor};

use crate::error::CliResult;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub sequential_ns: u128,
    pub parallel_ns: u128,
}

/// Median over `reps` timed runs (after one warm-up) of a `[1, L, C]`
/// scan with `N` states. Repetitions cycle through all lengths so that a
/// transient slowdown lands on every length rather than on one.
pub fn bench_scan(lengths: &[usize], channels: usize, state: usize, reps: usize, seed: u64) -> CliResult<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = S6Params::init(channels, state, true, &mut rng);
    let d = params.d.clone().expect("direct term");
    let inputs: Vec<[Tensor; 4]> = lengths
        .iter()
        .map(|&len| {
            [
                Tensor::uniform(&[1, len, channels], -1.0, 1.0, &mut rng),
                Tensor::uniform(&[1, len, channels], 0.001, 0.1, &mut rng),
                Tensor::uniform(&[1, len, state], -1.0, 1.0, &mut rng),
                Tensor::uniform(&[1, len, state], -1.0, 1.0, &mut rng),
            ]
        })
        .collect();
    let kernels = [ScanKernel::Sequential, ScanKernel::Parallel];
    let mut samples = vec![[Vec::with_capacity(reps), Vec::with_capacity(reps)]; lengths.len()];
    for rep in 0..=reps {
        for ([x, delta, b, c], per_len) in inputs.iter().zip(&mut samples) {
            for (kernel, out) in kernels.into_iter().zip(per_len.iter_mut()) {
                let mut g = Graph::new();
                let x = g.constant(x.clone())?;
                let delta = g.constant(delta.clone())?;
                let a = g.constant(params.a())?;
                let b = g.constant(b.clone())?;
                let c = g.constant(c.clone())?;
                let d = g.constant(d.clone())?;
                let start = Instant::now();
                g.s6_scan(x, delta, a, b, c, Some(d), kernel)?;
                let ns = start.elapsed().as_nanos();
                if rep > 0 {
                    out.push(ns);
                }
            }
        }
    }
    let median = |v: &mut Vec<u128>| {
        v.sort_unstable();
        v[v.len() / 2]
    };
    Ok(lengths
        .iter()
        .zip(&mut samples)
        .map(|(&len, [s, p])| BenchRow { len, sequential_ns: median(s), parallel_ns: median(p) })
        .collect())
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("L,sequential_ns,parallel_ns\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.len, r.sequential_ns, r.parallel_ns);
    }
    s
}
