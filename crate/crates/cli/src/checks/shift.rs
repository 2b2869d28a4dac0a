//! Scale-shift routing, circulant structure and the kernel-5 reduction.

use std::time::{Duration, Instant};

use anyhow::Result;
use rcnet_core::csn::{self, ShiftPlan};
use rcnet_core::{Tape, Tensor};

use super::{randn, CheckFn, Ctx, Outcome};
use crate::oracle;

pub(super) const CHECKS: &[(&str, CheckFn)] = &[
    ("shift.kernel5_oracle", kernel5_oracle),
    ("shift.kernel5_runtime", kernel5_runtime),
    ("shift.routing_table", routing_table),
    ("shift.equivariance", equivariance),
    ("shift.bijection", bijection),
    ("shift.empty_plan", empty_plan),
];

pub const ORACLE_STACKS: usize = 50;
pub const ORACLE_BUDGET: Duration = Duration::from_secs(5);

/// Runs the production shift on a stack tiled four times, so that every
/// offset block carries a full copy, then collapses it with a scalar-weight
/// 1x1 conv. Returns the worst difference against the brute-force circulant
/// scale convolution over `ORACLE_STACKS` random stacks.
pub fn kernel5_max_diff(seed: u64) -> Result<f64> {
    let (d, n, h, w) = (16, 5, 8, 8);
    let plan = ShiftPlan::new(4 * d, n, 1)?;
    let mut worst: f64 = 0.0;
    for trial in 0..ORACLE_STACKS {
        let s = randn(seed, &format!("kernel5.stack{trial}"), &[1, d, n, h, w]);
        let t = randn(seed, &format!("kernel5.taps{trial}"), &[5]);
        let taps: [f64; 5] = t.data().try_into().unwrap();

        // Output channel c reads copy 0 for offset 0 and block b for OFFSETS[b].
        let mut weight = Tensor::zeros(&[d, 8 * d, 1, 1]);
        for c in 0..d {
            weight.set(&[c, c, 0, 0], taps[2]);
            for (b, o) in csn::OFFSETS.iter().enumerate() {
                weight.set(&[c, 4 * d + b * d + c, 0, 0], taps[(o + 2) as usize]);
            }
        }

        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let tiled = tape.concat(&[sv, sv, sv, sv], 1)?;
        let shifted = csn::scale_shift(&mut tape, tiled, &plan)?;
        let flat = tape.reshape(shifted, &[1, 8 * d, n, h * w])?;
        let wv = tape.constant(weight);
        let y = tape.conv2d(flat, wv, None, 1, 0)?;
        let y = tape.reshape(y, &[1, d, n, h, w])?;

        let want = oracle::circulant_scale_conv(&s, &taps);
        worst = worst.max(tape.value(y).max_abs_diff(&want));
    }
    Ok(worst)
}

fn kernel5_oracle(ctx: &Ctx) -> Result<Outcome> {
    Ok(Outcome::at_most(kernel5_max_diff(ctx.cfg.seed)?, 1e-12))
}

fn kernel5_runtime(ctx: &Ctx) -> Result<Outcome> {
    let start = Instant::now();
    kernel5_max_diff(ctx.cfg.seed)?;
    Ok(Outcome::at_most(
        start.elapsed().as_secs_f64(),
        ORACLE_BUDGET.as_secs_f64(),
    ))
}

/// Source levels of the four shifted blocks at level 6 for levels 3-7, in
/// weight order `W1, W2, W4, W5` of the worked example.
pub const LEVEL6_SOURCES: [usize; 4] = [4, 5, 7, 3];

/// Block-identity probe: every element of the stack encodes its level and
/// channel, so the output names where it was read from.
pub fn routing_violations(d: usize, ratio: usize) -> Result<usize> {
    let (l_min, n) = (3, 5);
    let plan = ShiftPlan::new(d, n, ratio)?;
    let code = |level: usize, c: usize| (1000 * level + c) as f64;
    let stack = Tensor::from_fn(&[1, d, n, 1, 1], |i| code(l_min + i % n, i / n));
    let mut tape = Tape::new();
    let sv = tape.constant(stack);
    let out = csn::scale_shift(&mut tape, sv, &plan)?;
    let out = tape.value(out);

    let block = d / (4 * ratio);
    let offsets = [-2isize, -1, 1, 2];
    let mut bad = 0;
    for s in 0..n {
        for c in 0..out.shape()[1] {
            let want = if c < d {
                code(l_min + s, c)
            } else {
                let j = c - d;
                let src = (s as isize + offsets[j / block]).rem_euclid(n as isize) as usize;
                code(l_min + src, j)
            };
            bad += usize::from(out.at(&[0, c, s, 0, 0]) != want);
        }
    }
    let level6: Vec<usize> = (0..4)
        .map(|b| out.at(&[0, d + b * block, 6 - l_min, 0, 0]) as usize / 1000)
        .collect();
    bad += usize::from(level6 != LEVEL6_SOURCES);
    bad += usize::from(out.at(&[0, 0, 6 - l_min, 0, 0]) as usize / 1000 != 6);
    Ok(bad)
}

fn routing_table(ctx: &Ctx) -> Result<Outcome> {
    Ok(Outcome::violations(routing_violations(
        ctx.cfg.channels,
        ctx.cfg.shift_ratio,
    )?))
}

fn shift(stack: &Tensor, plan: &ShiftPlan) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(stack.clone());
    let out = csn::scale_shift(&mut tape, v, plan)?;
    Ok(tape.value(out).clone())
}

fn equivariance(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let plan = ShiftPlan::from_config(cfg)?;
    let n = cfg.n_levels();
    let s = ctx.randn("equivariance", &[cfg.batch, cfg.channels, n, 3, 2]);
    let base = shift(&s, &plan)?;
    let mut bad = 0;
    for t in 0..n {
        let a = shift(&oracle::roll_scale(&s, t), &plan)?;
        bad += usize::from(!a.bit_eq(&oracle::roll_scale(&base, t)));
    }
    Ok(Outcome::violations(bad))
}

/// Every element of the shifted channels (`0..d/r`) appears exactly once in
/// the shifted-in output channels.
fn bijection(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let plan = ShiftPlan::from_config(cfg)?;
    let (d, n, hw) = (cfg.channels, cfg.n_levels(), 3 * 2);
    let shape = [cfg.batch, d, n, 3, 2];
    let ids = Tensor::from_fn(&shape, |i| i as f64);
    let out = shift(&ids, &plan)?;
    let per_channel = n * hw;
    let co = plan.out_channels();
    let mut seen = vec![0usize; ids.numel()];
    for b in 0..cfg.batch {
        for c in d..co {
            let start = (b * co + c) * per_channel;
            for &v in &out.data()[start..start + per_channel] {
                seen[v as usize] += 1;
            }
        }
    }
    let shifted = plan.shifted();
    let mut bad = 0;
    for (i, &k) in seen.iter().enumerate() {
        let channel = (i / per_channel) % d;
        let want = usize::from(channel < shifted);
        bad += usize::from(k != want);
    }
    // The unshifted part is the input itself.
    for b in 0..cfg.batch {
        let o = (b * co) * per_channel;
        let i = (b * d) * per_channel;
        bad +=
            usize::from(out.data()[o..o + d * per_channel] != ids.data()[i..i + d * per_channel]);
    }
    Ok(Outcome::violations(bad))
}

fn empty_plan(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let s = ctx.randn(
        "empty_plan",
        &[cfg.batch, cfg.channels, cfg.n_levels(), 2, 2],
    );
    let out = shift(&s, &ShiftPlan::none(cfg.channels, cfg.n_levels()))?;
    Ok(Outcome::violations(usize::from(!out.bit_eq(&s))))
}
