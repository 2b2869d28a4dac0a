//! Scale shift against a dense kernel-5 circulant scale convolution that
//! produces the same routing.

use std::time::Instant;

use anyhow::{ensure, Result};
use rcnet_core::csn::{self, ShiftPlan};
use rcnet_core::{NeckConfig, Tape, Tensor};
use serde::Serialize;

use crate::checks::{CheckFn, Ctx, Outcome};

pub const WARMUP: usize = 3;
pub const MIN_REPS: usize = 10;
/// Repetitions of the short run compared against the main run.
pub const STABILITY_REPS: usize = 10;

pub(crate) const CHECKS: &[(&str, CheckFn)] = &[
    ("bench.equality", equality),
    ("bench.ratio", ratio),
    ("bench.reps", reps),
    ("bench.stability", stability),
];

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    /// `[N, d, n, h, w]` of the benchmarked stack.
    pub shape: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub shift_median_ns: u64,
    pub dense_median_ns: u64,
    /// `dense / shift`; above 1 when the shift is cheaper.
    pub ratio: f64,
    pub max_abs_diff: f64,
}

/// Per output channel: source channel and five circulant taps for offsets -2..=2.
pub struct DenseKernel {
    pub source: Vec<usize>,
    pub taps: Vec<[f64; 5]>,
}

impl DenseKernel {
    /// One-hot taps that reproduce the shift routing of `d` channels at ratio `r`.
    pub fn routing(d: usize, r: usize) -> Self {
        let block = d / (4 * r);
        let offsets = [-2isize, -1, 1, 2];
        let mut source: Vec<usize> = (0..d).collect();
        let mut taps = vec![[0.0, 0.0, 1.0, 0.0, 0.0]; d];
        for j in 0..4 * block {
            let mut t = [0.0; 5];
            t[(offsets[j / block] + 2) as usize] = 1.0;
            source.push(j);
            taps.push(t);
        }
        Self { source, taps }
    }

    /// Every tap is evaluated, zero or not.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (nb, d, n, hw) = (s[0], s[1], s[2], s[3] * s[4]);
        let co = self.source.len();
        let mut out = vec![0.0; nb * co * n * hw];
        for b in 0..nb {
            for (c, (&src, taps)) in self.source.iter().zip(&self.taps).enumerate() {
                for i in 0..n {
                    let dst = &mut out[((b * co + c) * n + i) * hw..][..hw];
                    for (t, &w) in taps.iter().enumerate() {
                        let k = (i + n + t - 2) % n;
                        let from = &x.data()[((b * d + src) * n + k) * hw..][..hw];
                        for (o, v) in dst.iter_mut().zip(from) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
        Tensor::new(&[nb, co, n, s[3], s[4]], out).unwrap()
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

pub fn bench_shift(cfg: &NeckConfig, reps: usize) -> Result<BenchResult> {
    ensure!(
        reps >= MIN_REPS,
        "bench needs at least {MIN_REPS} repetitions, got {reps}"
    );
    let plan = ShiftPlan::from_config(cfg)?;
    let (h, w) = cfg.resolution(cfg.reference_level);
    let shape = [cfg.batch, cfg.channels, cfg.n_levels(), h, w];
    let stack = rcnet_core::rng::normal(
        &mut rcnet_core::rng::stream(cfg.seed, "bench.stack"),
        &shape,
        1.0,
    );
    let kernel = DenseKernel::routing(cfg.channels, cfg.shift_ratio);

    let mut shift_ns = Vec::with_capacity(reps);
    let mut shifted = None;
    for i in 0..WARMUP + reps {
        let mut tape = Tape::new();
        let v = tape.constant(stack.clone());
        let start = Instant::now();
        let out = csn::scale_shift(&mut tape, v, &plan)?;
        let ns = start.elapsed().as_nanos() as u64;
        if i >= WARMUP {
            shift_ns.push(ns);
        }
        shifted = Some(tape.value(out).clone());
    }

    let mut dense_ns = Vec::with_capacity(reps);
    let mut dense = None;
    for i in 0..WARMUP + reps {
        let start = Instant::now();
        let out = std::hint::black_box(kernel.apply(std::hint::black_box(&stack)));
        let ns = start.elapsed().as_nanos() as u64;
        if i >= WARMUP {
            dense_ns.push(ns);
        }
        dense = Some(out);
    }

    let (shift_median_ns, dense_median_ns) = (median(shift_ns), median(dense_ns));
    Ok(BenchResult {
        shape: shape.to_vec(),
        reps,
        warmup: WARMUP,
        shift_median_ns,
        dense_median_ns,
        ratio: dense_median_ns as f64 / shift_median_ns.max(1) as f64,
        max_abs_diff: shifted.unwrap().max_abs_diff(&dense.unwrap()),
    })
}

fn equality(ctx: &Ctx) -> Result<Outcome> {
    Ok(Outcome::at_most(ctx.bench()?.max_abs_diff, 1e-12))
}

fn ratio(ctx: &Ctx) -> Result<Outcome> {
    let r = ctx.bench()?.ratio;
    Ok(Outcome {
        pass: r > 1.0,
        ..Outcome::at_least(r, 1.0)
    })
}

fn reps(ctx: &Ctx) -> Result<Outcome> {
    Ok(Outcome::at_least(ctx.bench()?.reps as f64, MIN_REPS as f64))
}

/// Medians of a short run stay within 50% of the main run.
fn stability(ctx: &Ctx) -> Result<Outcome> {
    let main = ctx.bench()?;
    let short = bench_shift(&ctx.cfg, STABILITY_REPS)?;
    let rel = |a: u64, b: u64| (a as f64 - b as f64).abs() / b.max(1) as f64;
    let dev = rel(short.shift_median_ns, main.shift_median_ns)
        .max(rel(short.dense_median_ns, main.dense_median_ns));
    Ok(Outcome::at_most(dev, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_kernel_matches_shift_on_small_stack() {
        let cfg = NeckConfig::tiny();
        let x =
            rcnet_core::rng::normal(&mut rcnet_core::rng::stream(1, "x"), &[1, 8, 5, 2, 3], 1.0);
        let plan = ShiftPlan::from_config(&cfg).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = csn::scale_shift(&mut tape, v, &plan).unwrap();
        let dense = DenseKernel::routing(8, cfg.shift_ratio).apply(&x);
        assert!(tape.value(y).max_abs_diff(&dense) == 0.0);
    }

    #[test]
    fn too_few_reps_rejected() {
        assert!(bench_shift(&NeckConfig::tiny(), 3).is_err());
    }
}
