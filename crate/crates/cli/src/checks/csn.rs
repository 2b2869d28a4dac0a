//! Gather, shift aggregation, dual global context and scatter, stage by stage.

use anyhow::Result;
use rcnet_core::csn::{self, ShiftPlan};
use rcnet_core::ops::DEFAULT_EPS;
use rcnet_core::params::ConvInit;
use rcnet_core::{FeaturePyramid, ParamStore, Pyramid, Tape, Tensor, Var};

use super::{CheckFn, Ctx, Outcome};
use crate::oracle;

pub(super) const CHECKS: &[(&str, CheckFn)] = &[
    ("csn.gather_copy", gather_copy),
    ("csn.gather_constant", gather_constant),
    ("csn.gather_oracle", gather_oracle),
    ("csn.aggregate_identity", aggregate_identity),
    ("csn.aggregate_oracle", aggregate_oracle),
    ("csn.context_identity", context_identity),
    ("csn.context_uniform", context_uniform),
    ("csn.context_unit_mean", context_unit_mean),
    ("csn.context_oracle", context_oracle),
    ("csn.scatter_zero", scatter_zero),
    ("csn.scatter_reference", scatter_reference),
    ("csn.scatter_oracle", scatter_oracle),
    ("csn.init_roundtrip", init_roundtrip),
    ("csn.reach", reach),
];

pub const STAGE_TOLERANCE: f64 = 1e-10;

fn gather(p: &FeaturePyramid, k: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = p.record_constant(&mut tape);
    let s = csn::gather_to_reference(&mut tape, &vars, k)?;
    Ok(tape.value(s).clone())
}

/// Scale slice `s` of a stack as an `[N, d, h, w]` map.
fn slice(stack: &Tensor, s: usize) -> Tensor {
    let sh = stack.shape();
    let (nd, n, hw) = (sh[0] * sh[1], sh[2], sh[3] * sh[4]);
    let mut data = Vec::with_capacity(nd * hw);
    for i in 0..nd {
        let start = (i * n + s) * hw;
        data.extend_from_slice(&stack.data()[start..start + hw]);
    }
    Tensor::new(&[sh[0], sh[1], sh[3], sh[4]], data).unwrap()
}

fn gather_copy(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let p = ctx.random_pyramid("gather");
    let stack = gather(&p, cfg.reference_level)?;
    let k = slice(&stack, cfg.reference_level - cfg.l_min);
    Ok(Outcome::violations(usize::from(
        !k.bit_eq(p.get(cfg.reference_level)?),
    )))
}

fn gather_constant(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let p = ctx.random_pyramid("gather").map(|_, t| t.map(|_| -0.75));
    let stack = gather(&p, cfg.reference_level)?;
    Ok(Outcome::at_most(
        stack
            .data()
            .iter()
            .map(|v| (v + 0.75).abs())
            .fold(0.0, f64::max),
        0.0,
    ))
}

fn gather_oracle(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let p = ctx.random_pyramid("gather");
    let stack = gather(&p, cfg.reference_level)?;
    let mut worst: f64 = 0.0;
    for (s, (l, t)) in p.iter().enumerate() {
        let want = oracle::resize(t, l, cfg.reference_level);
        worst = worst.max(slice(&stack, s).max_abs_diff(&want));
    }
    Ok(Outcome::at_most(worst, 1e-12))
}

fn random_stack(ctx: &Ctx, name: &str) -> Tensor {
    let cfg = &ctx.cfg;
    let (h, w) = cfg.resolution(cfg.reference_level);
    ctx.randn(name, &[cfg.batch, cfg.channels, cfg.n_levels(), h, w])
}

/// Production `scale_shift` then `shift_aggregate`; returns `(shifted, output)`.
fn aggregate(ctx: &Ctx, store: &ParamStore, stack: &Tensor) -> Result<(Tensor, Tensor)> {
    let plan = ShiftPlan::from_config(&ctx.cfg)?;
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let s = tape.constant(stack.clone());
    let (shifted, y) = tape.scoped(csn::SCOPE, |t| {
        let shifted = csn::scale_shift(t, s, &plan)?;
        Ok((shifted, csn::shift_aggregate(t, &params, shifted, s)?))
    })?;
    Ok((tape.value(shifted).clone(), tape.value(y).clone()))
}

fn aggregate_identity(ctx: &Ctx) -> Result<Outcome> {
    let store = csn::init_params(&ctx.cfg, ConvInit::DEFAULT, true);
    let stack = random_stack(ctx, "aggregate");
    let (_, y) = aggregate(ctx, &store, &stack)?;
    Ok(Outcome::violations(usize::from(!y.bit_eq(&stack))))
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store
        .get(&format!("{}.{name}", csn::SCOPE))
        .unwrap_or_else(|| panic!("missing {name}"))
}

fn aggregate_oracle(ctx: &Ctx) -> Result<Outcome> {
    let store = csn::init_params(&ctx.cfg, ConvInit::GENERIC, false);
    let stack = random_stack(ctx, "aggregate");
    let (shifted, y) = aggregate(ctx, &store, &stack)?;
    let r = oracle::pointwise(
        &shifted,
        p(&store, "aggregate.reduce.weight"),
        p(&store, "aggregate.reduce.bias"),
    );
    let r = oracle::norm(
        &r,
        p(&store, "aggregate.norm.gamma"),
        p(&store, "aggregate.norm.beta"),
        DEFAULT_EPS,
    )
    .map(|v| v.max(0.0));
    let e = oracle::pointwise(
        &r,
        p(&store, "aggregate.expand.weight"),
        p(&store, "aggregate.expand.bias"),
    );
    let want = Tensor::from_fn(e.shape(), |i| e.data()[i] + stack.data()[i]);
    Ok(Outcome::at_most(y.max_abs_diff(&want), STAGE_TOLERANCE))
}

/// Production context step; returns `(output, scale weight, spatial weight)`.
fn context(store: &ParamStore, y: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let v = tape.constant(y.clone());
    let tr = tape.scoped(csn::SCOPE, |t| {
        csn::dual_global_context_traced(t, &params, v)
    })?;
    let get = |x: Var| tape.value(x).clone();
    Ok((get(tr.output), get(tr.scale_weight), get(tr.spatial_weight)))
}

fn context_identity(ctx: &Ctx) -> Result<Outcome> {
    let store = csn::init_params(&ctx.cfg, ConvInit::DEFAULT, true);
    let y = random_stack(ctx, "context");
    let (out, _, _) = context(&store, &y)?;
    Ok(Outcome::violations(usize::from(!out.bit_eq(&y))))
}

/// Constant stacks give uniform weights of exactly one, so the reweighted
/// branches see the constant unchanged.
fn context_uniform(ctx: &Ctx) -> Result<Outcome> {
    let store = csn::init_params(&ctx.cfg, ConvInit::GENERIC, false);
    let y = random_stack(ctx, "context").map(|_| 1.25);
    let (_, a, b) = context(&store, &y)?;
    let dev = a
        .data()
        .iter()
        .chain(b.data())
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(Outcome::at_most(dev, 1e-12))
}

/// Largest deviation from 1 of the mean weight along each normalized axis.
fn context_unit_mean(ctx: &Ctx) -> Result<Outcome> {
    let store = csn::init_params(&ctx.cfg, ConvInit::GENERIC, false);
    let y = random_stack(ctx, "context");
    let (_, a, b) = context(&store, &y)?;
    let n = a.shape()[2];
    let hw = b.shape()[3] * b.shape()[4];
    let mean_dev = |t: &Tensor, len: usize| {
        t.data()
            .chunks(len)
            .map(|c| (c.iter().sum::<f64>() / len as f64 - 1.0).abs())
            .fold(0.0, f64::max)
    };
    Ok(Outcome::at_most(
        mean_dev(&a, n).max(mean_dev(&b, hw)),
        1e-12,
    ))
}

fn context_oracle(ctx: &Ctx) -> Result<Outcome> {
    let store = csn::init_params(&ctx.cfg, ConvInit::GENERIC, false);
    let y = random_stack(ctx, "context");
    let (out, _, _) = context(&store, &y)?;
    let lin = |name: &str| {
        (
            p(&store, &format!("context.{name}.weight")),
            p(&store, &format!("context.{name}.bias")),
        )
    };
    let want = oracle::dual_context(
        &y,
        (lin("scale.mix"), lin("scale.out")),
        (lin("spatial.mix"), lin("spatial.out")),
    );
    Ok(Outcome::at_most(out.max_abs_diff(&want), STAGE_TOLERANCE))
}

fn scatter(ctx: &Ctx, stack: &Tensor, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let s = tape.constant(stack.clone());
    let vars: Pyramid<Var> = pyr.record_constant(&mut tape);
    Ok(csn::scatter_and_combine(&mut tape, s, &vars, ctx.cfg.reference_level)?.values(&tape))
}

fn scatter_zero(ctx: &Ctx) -> Result<Outcome> {
    let pyr = ctx.random_pyramid("scatter");
    let zeros = random_stack(ctx, "scatter.stack").map(|_| 0.0);
    Ok(Outcome::violations(usize::from(
        !scatter(ctx, &zeros, &pyr)?.bit_eq(&pyr),
    )))
}

fn scatter_reference(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let (pyr, stack) = (
        ctx.random_pyramid("scatter"),
        random_stack(ctx, "scatter.stack"),
    );
    let out = scatter(ctx, &stack, &pyr)?;
    let k = cfg.reference_level;
    let s = slice(&stack, k - cfg.l_min);
    let pk = pyr.get(k)?;
    let want = Tensor::from_fn(pk.shape(), |i| pk.data()[i] + s.data()[i]);
    Ok(Outcome::violations(usize::from(!out.get(k)?.bit_eq(&want))))
}

fn scatter_oracle(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let (pyr, stack) = (
        ctx.random_pyramid("scatter"),
        random_stack(ctx, "scatter.stack"),
    );
    let out = scatter(ctx, &stack, &pyr)?;
    let mut worst: f64 = 0.0;
    for (s, (l, pl)) in pyr.iter().enumerate() {
        let r = oracle::resize(&slice(&stack, s), cfg.reference_level, l);
        let want = Tensor::from_fn(pl.shape(), |i| pl.data()[i] + r.data()[i]);
        worst = worst.max(out.get(l)?.max_abs_diff(&want));
    }
    Ok(Outcome::at_most(worst, 1e-12))
}

/// `P + resize(resize(P, l -> k), k -> l)` per level, by the oracle resizers.
pub fn roundtrip_oracle(pyr: &FeaturePyramid, k: usize) -> FeaturePyramid {
    pyr.map(|l, t| {
        let r = oracle::resize(&oracle::resize(t, l, k), k, l);
        Tensor::from_fn(t.shape(), |i| t.data()[i] + r.data()[i])
    })
}

/// With both zero-initialized tails the network is `P` plus its resize round trip.
pub fn init_roundtrip_error(ctx: &Ctx) -> Result<f64> {
    let cfg = &ctx.cfg;
    let store = csn::init_params(cfg, ConvInit::DEFAULT, true);
    let pyr = ctx.random_pyramid("init");
    let out = csn::csn_forward(&pyr, &store, cfg)?;
    Ok(out.max_abs_diff(&roundtrip_oracle(&pyr, cfg.reference_level)))
}

fn init_roundtrip(ctx: &Ctx) -> Result<Outcome> {
    Ok(Outcome::at_most(init_roundtrip_error(ctx)?, 1e-12))
}

/// Perturbing the top input level moves the bottom output level.
fn reach(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let store = csn::init_params(cfg, ConvInit::GENERIC, false);
    let pyr = ctx.random_pyramid("reach");
    let mut moved = pyr.clone();
    let top = moved.get_mut(cfg.l_max)?;
    let noise = ctx.randn("reach.noise", top.shape());
    for (v, e) in top.data_mut().iter_mut().zip(noise.data()) {
        *v += 0.5 * e;
    }
    let a = csn::csn_forward(&pyr, &store, cfg)?;
    let b = csn::csn_forward(&moved, &store, cfg)?;
    Ok(Outcome::at_least(
        a.get(cfg.l_min)?.max_abs_diff(b.get(cfg.l_min)?),
        f64::MIN_POSITIVE,
    ))
}
