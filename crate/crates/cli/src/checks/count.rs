//! Parameter and MAC accounting against closed forms.

use anyhow::Result;
use rcnet_core::count::CountReport;
use rcnet_core::fixtures::synth_backbone;
use rcnet_core::rcnet::{self, InitMode, Model};
use rcnet_core::{Tape, Tensor};

use super::{CheckFn, Ctx, Outcome};
use crate::oracle::params as closed;

pub(super) const CHECKS: &[(&str, CheckFn)] = &[
    ("count.scale_shift_zero", scale_shift_zero),
    ("count.pointwise_conv", pointwise_conv),
    ("count.fpn_params", fpn_params),
    ("count.revfp_params", revfp_params),
    ("count.csn_params", csn_params),
    ("count.fpn_macs", fpn_macs),
    ("count.totals", totals),
];

fn scale_shift_zero(ctx: &Ctx) -> Result<Outcome> {
    let r = ctx.counts()?;
    let row = r.row("csn.scale_shift").cloned().unwrap_or_default();
    // The row must exist: one recorded gather.
    let missing = usize::from(row.ops != 1);
    Ok(Outcome::at_most(
        (row.params + row.macs) as f64 + missing as f64,
        0.0,
    ))
}

fn pointwise_conv(ctx: &Ctx) -> Result<Outcome> {
    let d = ctx.cfg.channels;
    let (h, w) = ctx.cfg.resolution(ctx.cfg.reference_level);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, d, h, w]));
    let wt = tape.param(Tensor::ones(&[d, d, 1, 1]));
    let b = tape.param(Tensor::ones(&[d]));
    tape.scoped("probe", |t| t.conv2d(x, wt, Some(b), 1, 0))?;
    let r = CountReport::from_tape(&tape);
    let row = r.row("probe").cloned().unwrap_or_default();
    let off = row.params.abs_diff((d * d + d) as u64) + row.macs.abs_diff((h * w * d * d) as u64);
    Ok(Outcome::at_most(off as f64, 0.0))
}

fn exact(counted: u64, want: usize) -> Outcome {
    Outcome::at_most(counted.abs_diff(want as u64) as f64, 0.0)
}

fn fpn_params(ctx: &Ctx) -> Result<Outcome> {
    Ok(exact(
        ctx.counts()?.total("fpn").params,
        closed::fpn(&ctx.cfg),
    ))
}

fn revfp_params(ctx: &Ctx) -> Result<Outcome> {
    Ok(exact(
        ctx.counts()?.total("revfp").params,
        closed::revfp(&ctx.cfg),
    ))
}

fn csn_params(ctx: &Ctx) -> Result<Outcome> {
    Ok(exact(
        ctx.counts()?.total("csn").params,
        closed::csn(&ctx.cfg),
    ))
}

fn fpn_macs(ctx: &Ctx) -> Result<Outcome> {
    Ok(exact(
        ctx.counts()?.total("fpn").macs,
        closed::fpn_macs(&ctx.cfg),
    ))
}

/// Module totals equal the sum of their rows, and no row is outside a module.
fn totals(ctx: &Ctx) -> Result<Outcome> {
    let r = ctx.counts()?;
    let mut bad = 0;
    for (module, t) in &r.totals {
        let rows = r
            .rows
            .iter()
            .filter(|(s, _)| s.split('.').next() == Some(module.as_str()));
        let (p, m, o) = rows.fold((0, 0, 0), |(p, m, o), (_, row)| {
            (p + row.params, m + row.macs, o + row.ops)
        });
        bad += usize::from((p, m, o) != (t.params, t.macs, t.ops));
    }
    bad += r
        .totals
        .keys()
        .filter(|k| !["fpn", "revfp", "csn"].contains(&k.as_str()))
        .count();

    // Every recorded operator lands in exactly one row.
    let cfg = &ctx.cfg;
    let backbone = synth_backbone(cfg)?;
    let store = rcnet::init_params(Model::Rcnet, cfg, InitMode::Default);
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let vars = backbone.record_constant(&mut tape);
    rcnet::model_on_tape(&mut tape, Model::Rcnet, &params, cfg, &vars)?;
    let ops = tape.nodes().filter(|n| n.kind != "leaf").count() as u64;
    bad += usize::from(
        CountReport::from_tape(&tape)
            .rows
            .values()
            .map(|r| r.ops)
            .sum::<u64>()
            != ops,
    );
    Ok(Outcome::violations(bad))
}
