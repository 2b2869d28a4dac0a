//! Feature-guided upsampling, dynamic weighted fusion and information flow.

use anyhow::Result;
use rcnet_core::fixtures::{extend_stem, synth_backbone};
use rcnet_core::fpn;
use rcnet_core::ops::DEFAULT_EPS;
use rcnet_core::params::{ConvInit, Init};
use rcnet_core::revfp::{self, Site, Trace};
use rcnet_core::{csn, FeaturePyramid, NeckConfig, ParamStore, Tape, Tensor};

use super::{CheckFn, Ctx, Outcome};
use crate::oracle;

pub(super) const CHECKS: &[(&str, CheckFn)] = &[
    ("fgu.unit_mean", fgu_unit_mean),
    ("fgu.zero_logits", fgu_zero_logits),
    ("fgu.temperature_oracle", fgu_temperature_oracle),
    ("fusion.weight_zero_head", weight_zero_head),
    ("fusion.weight_saturation", weight_saturation),
    ("fusion.weight_oracle", weight_oracle),
    ("fusion.convex_envelope", convex_envelope),
    ("fusion.forced_endpoints", forced_endpoints),
    ("fusion.boundary_rules", boundary_rules),
    ("fusion.pre_fuse_oracle", pre_fuse_oracle),
    ("fusion.post_fuse_oracle", post_fuse_oracle),
    ("flow.fpn_unidirectional", fpn_unidirectional),
    ("flow.revfp_bidirectional", revfp_bidirectional),
    ("flow.revfp_locality", revfp_locality),
    ("flow.rcnet_top_to_bottom", rcnet_top_to_bottom),
    ("shapes.models", model_shapes),
];

pub const FGU_TRIALS: usize = 100;

fn fgu_store(seed: u64, d: usize, temperature: f64) -> ParamStore {
    let mut store = ParamStore::new(seed);
    store.conv("fgu.logits", 2 * d, 1, 3, ConvInit::GENERIC);
    store.init("fgu.temperature", &[1], Init::Const(temperature), 0);
    store
}

/// Production FGU on constants; returns `(guided, w)`.
fn run_fgu(store: &ParamStore, current: &Tensor, next: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let (c, n) = (tape.constant(current.clone()), tape.constant(next.clone()));
    let (g, w) = tape.scoped("fgu", |t| revfp::feature_guided_upsample(t, &params, c, n))?;
    Ok((tape.value(g).clone(), tape.value(w).clone()))
}

fn level_inputs(ctx: &Ctx, name: &str, l: usize) -> (Tensor, Tensor) {
    let cfg = &ctx.cfg;
    let (h, w) = cfg.resolution(l);
    let cur = ctx.randn(&format!("{name}.cur"), &[cfg.batch, cfg.channels, h, w]);
    let next = ctx.randn(
        &format!("{name}.next"),
        &[cfg.batch, cfg.channels, h / 2, w / 2],
    );
    (cur, next)
}

/// Largest `|mean(w) - 1|` per sample over `FGU_TRIALS` random inputs and
/// parameter draws at every level that has a level above.
pub fn fgu_mean_error(ctx: &Ctx) -> Result<f64> {
    let cfg = &ctx.cfg;
    let mut worst: f64 = 0.0;
    for l in cfg.l_min..cfg.l_max {
        for trial in 0..FGU_TRIALS {
            let name = format!("fgu.l{l}.t{trial}");
            let temperature = 0.25 + 4.0 * (trial as f64 / FGU_TRIALS as f64);
            let store = fgu_store(
                rcnet_core::rng::fnv1a64(name.as_bytes()),
                cfg.channels,
                temperature,
            );
            let (cur, next) = level_inputs(ctx, &name, l);
            let (_, w) = run_fgu(&store, &cur, &next)?;
            let hw = w.shape()[2] * w.shape()[3];
            for chunk in w.data().chunks(hw) {
                let mean = chunk.iter().sum::<f64>() / hw as f64;
                worst = worst.max((mean - 1.0).abs());
            }
        }
    }
    Ok(worst)
}

fn fgu_unit_mean(ctx: &Ctx) -> Result<Outcome> {
    Ok(Outcome::at_most(fgu_mean_error(ctx)?, 1e-12))
}

fn fgu_zero_logits(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let mut store = fgu_store(cfg.seed, cfg.channels, 1.7);
    store.set(
        "fgu.logits.weight",
        Tensor::zeros(&[1, 2 * cfg.channels, 3, 3]),
    )?;
    let (cur, next) = level_inputs(ctx, "fgu.zero", cfg.l_min);
    let (g, w) = run_fgu(&store, &cur, &next)?;
    let ones = w.data().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    Ok(Outcome::at_most(
        g.max_abs_diff(&oracle::upsample(&next)).max(ones),
        1e-12,
    ))
}

/// Production FGU at `T = 2` against the explicit formula, and against the
/// same formula at `T = 1` with logits pre-scaled by doubling the conv.
fn fgu_temperature_oracle(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let store = fgu_store(cfg.seed, cfg.channels, 2.0);
    let (cur, next) = level_inputs(ctx, "fgu.temperature", cfg.l_min + 1);
    let (g, w) = run_fgu(&store, &cur, &next)?;
    let (lw, lb) = (
        store.get("fgu.logits.weight").unwrap(),
        store.get("fgu.logits.bias").unwrap(),
    );
    let (og, ow) = oracle::fgu(&cur, &next, lw, lb, 2.0);
    let (pg, pw) = oracle::fgu(&cur, &next, &lw.map(|v| 2.0 * v), &lb.map(|v| 2.0 * v), 1.0);
    let diff = [
        g.max_abs_diff(&og),
        w.max_abs_diff(&ow),
        g.max_abs_diff(&pg),
        w.max_abs_diff(&pw),
    ];
    Ok(Outcome::at_most(
        diff.into_iter().fold(0.0, f64::max),
        1e-12,
    ))
}

fn run_weight(ctx: &Ctx, weight: Tensor, bias: f64) -> Result<(Vec<f64>, Tensor, Tensor)> {
    let cfg = &ctx.cfg;
    let (h, w) = cfg.resolution(cfg.l_min + 1);
    let shape = [cfg.batch.max(2), cfg.channels, h, w];
    let (a, b) = (ctx.randn("weight.a", &shape), ctx.randn("weight.b", &shape));
    let mut store = ParamStore::new(cfg.seed);
    store.conv("head", 2 * cfg.channels, 1, 1, ConvInit::ZERO);
    store.set("head.weight", weight)?;
    store.set("head.bias", Tensor::full(&[1], bias))?;
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = revfp::dynamic_weight(&mut tape, &params, "head", av, bv)?;
    Ok((tape.value(out).data().to_vec(), a, b))
}

fn weight_zero_head(ctx: &Ctx) -> Result<Outcome> {
    let (w, _, _) = run_weight(ctx, Tensor::zeros(&[1, 2 * ctx.cfg.channels, 1, 1]), 0.0)?;
    Ok(Outcome::at_most(
        w.iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max),
        0.0,
    ))
}

fn weight_saturation(ctx: &Ctx) -> Result<Outcome> {
    let (w, _, _) = run_weight(ctx, Tensor::zeros(&[1, 2 * ctx.cfg.channels, 1, 1]), 10.0)?;
    Ok(Outcome::at_least(
        w.iter().cloned().fold(f64::INFINITY, f64::min),
        0.999,
    ))
}

fn weight_oracle(ctx: &Ctx) -> Result<Outcome> {
    let head = ctx.randn("weight.head", &[1, 2 * ctx.cfg.channels, 1, 1]);
    let (w, a, b) = run_weight(ctx, head.clone(), 0.3)?;
    let want = oracle::dynamic_weight(&a, &b, &head, 0.3);
    let diff = w
        .iter()
        .zip(&want)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(Outcome::at_most(diff, 1e-12))
}

/// Neck input (stem applied) and generic RevFP parameters for `cfg`.
fn revfp_setup(cfg: &NeckConfig) -> Result<(FeaturePyramid, ParamStore)> {
    let store = revfp::init_params(cfg, ConvInit::GENERIC);
    let c = extend_stem(&synth_backbone(cfg)?, &store, revfp::SCOPE, cfg)?;
    Ok((c, store))
}

fn trace(c: &FeaturePyramid, store: &ParamStore, cfg: &NeckConfig) -> Result<(Tape, Trace)> {
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let vars = c.record_constant(&mut tape);
    let tr = tape.scoped(revfp::SCOPE, |t| {
        revfp::revfp_on_tape(t, &params, cfg, &vars)
    })?;
    Ok((tape, tr))
}

/// Largest amount by which `blend` leaves the elementwise `[min, max]` of `a` and `b`.
fn envelope_excess(a: &Tensor, b: &Tensor, blend: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .zip(blend.data())
        .map(|((&x, &y), &v)| (x.min(y) - v).max(v - x.max(y)).max(0.0))
        .fold(0.0, f64::max)
}

pub const ENVELOPE_SEEDS: [u64; 3] = [0, 1, 2];

fn convex_envelope(ctx: &Ctx) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for s in ENVELOPE_SEEDS {
        let cfg = NeckConfig {
            seed: ctx.cfg.seed.wrapping_add(s),
            ..ctx.cfg.clone()
        };
        let (c, store) = revfp_setup(&cfg)?;
        let (tape, tr) = trace(&c, &store, &cfg)?;
        let v = |x| tape.value(x);
        for (l, &(_, blend)) in tr.pre_blend.iter() {
            let (own, guided) = (*tr.lateral.get(l)?, *tr.guided.get(l)?);
            worst = worst.max(envelope_excess(v(own), v(guided), v(blend)));
        }
        for (l, &(_, blend)) in tr.post_blend.iter() {
            let (pre, pooled) = (*tr.pre.get(l)?, *tr.pooled.get(l)?);
            worst = worst.max(envelope_excess(v(pre), v(pooled), v(blend)));
        }
    }
    Ok(Outcome::at_most(worst, 0.0))
}

/// Saturated weight heads make the blends hit their endpoints bitwise.
fn forced_endpoints(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let (c, base) = revfp_setup(cfg)?;
    let mut bad = 0;
    for (site, value) in [
        (Site::Pre, true),
        (Site::Pre, false),
        (Site::Post, true),
        (Site::Post, false),
    ] {
        let mut store = base.clone();
        revfp::force_weight(&mut store, cfg, site, value)?;
        let (tape, tr) = trace(&c, &store, cfg)?;
        let v = |x| tape.value(x);
        let (blends, own, other) = match site {
            Site::Pre => (&tr.pre_blend, &tr.lateral, &tr.guided),
            Site::Post => (&tr.post_blend, &tr.pre, &tr.pooled),
        };
        for (l, &(_, blend)) in blends.iter() {
            let want = if value { *own.get(l)? } else { *other.get(l)? };
            bad += usize::from(!v(blend).bit_eq(v(want)));
        }
    }
    Ok(Outcome::violations(bad))
}

/// `P_{l_min}` is `P'_{l_min}` and `P'_{l_max}` is the lateral of `C_{l_max}`, bitwise.
fn boundary_rules(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let (c, store) = revfp_setup(cfg)?;
    let (tape, tr) = trace(&c, &store, cfg)?;
    let v = |x| tape.value(x);
    let mut bad = usize::from(!v(*tr.output.get(cfg.l_min)?).bit_eq(v(*tr.pre.get(cfg.l_min)?)));

    let mut t2 = Tape::new();
    let x = t2.constant(c.get(cfg.l_max)?.clone());
    let name = format!("{}.l{}.lateral", revfp::SCOPE, cfg.l_max);
    let w = t2.constant(store.get(&format!("{name}.weight")).unwrap().clone());
    let b = t2.constant(store.get(&format!("{name}.bias")).unwrap().clone());
    let lat = t2.conv2d(x, w, Some(b), 1, 0)?;
    bad += usize::from(!v(*tr.pre.get(cfg.l_max)?).bit_eq(t2.value(lat)));
    Ok(Outcome::violations(bad))
}

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

/// Weighted blend, 3x3 conv and norm, recomputed by the oracle from `own`
/// and `other` with the fusion parameters under `prefix`.
fn fuse_oracle(store: &ParamStore, prefix: &str, own: &Tensor, other: &Tensor) -> Tensor {
    let head = param(store, &format!("{prefix}.weight.weight"));
    let bias = param(store, &format!("{prefix}.weight.bias")).data()[0];
    let w = oracle::dynamic_weight(own, other, head, bias);
    let blend = oracle::blend(&w, own, other);
    let y = oracle::conv(
        &blend,
        param(store, &format!("{prefix}.conv.weight")),
        param(store, &format!("{prefix}.conv.bias")),
        1,
        1,
    );
    oracle::norm(
        &y,
        param(store, &format!("{prefix}.norm.gamma")),
        param(store, &format!("{prefix}.norm.beta")),
        DEFAULT_EPS,
    )
}

pub const FUSION_TOLERANCE: f64 = 1e-10;

fn pre_fuse_oracle(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let (c, store) = revfp_setup(cfg)?;
    let (tape, tr) = trace(&c, &store, cfg)?;
    let mut worst: f64 = 0.0;
    for l in cfg.levels() {
        let p = format!("{}.l{l}", revfp::SCOPE);
        let lat = oracle::conv(
            c.get(l)?,
            param(&store, &format!("{p}.lateral.weight")),
            param(&store, &format!("{p}.lateral.bias")),
            1,
            0,
        );
        worst = worst.max(lat.max_abs_diff(tape.value(*tr.lateral.get(l)?)));
        if l == cfg.l_max {
            continue;
        }
        let own = tape.value(*tr.lateral.get(l)?);
        let next = tape.value(*tr.lateral.get(l + 1)?);
        let temperature = param(&store, &format!("{p}.fgu.temperature")).data()[0];
        let (guided, _) = oracle::fgu(
            own,
            next,
            param(&store, &format!("{p}.fgu.logits.weight")),
            param(&store, &format!("{p}.fgu.logits.bias")),
            temperature,
        );
        worst = worst.max(guided.max_abs_diff(tape.value(*tr.guided.get(l)?)));
        let want = fuse_oracle(&store, &format!("{p}.pre_fuse"), own, &guided);
        worst = worst.max(want.max_abs_diff(tape.value(*tr.pre.get(l)?)));
    }
    Ok(Outcome::at_most(worst, FUSION_TOLERANCE))
}

fn post_fuse_oracle(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let (c, store) = revfp_setup(cfg)?;
    let (tape, tr) = trace(&c, &store, cfg)?;
    let mut worst: f64 = 0.0;
    for l in cfg.l_min + 1..=cfg.l_max {
        let pooled = oracle::maxpool(tape.value(*tr.output.get(l - 1)?));
        let pre = tape.value(*tr.pre.get(l)?);
        let want = fuse_oracle(
            &store,
            &format!("{}.l{l}.post_fuse", revfp::SCOPE),
            pre,
            &pooled,
        );
        worst = worst.max(want.max_abs_diff(tape.value(*tr.output.get(l)?)));
    }
    Ok(Outcome::at_most(worst, FUSION_TOLERANCE))
}

/// `c` with level `j` shifted by seeded noise.
fn perturbed(c: &FeaturePyramid, j: usize, seed: u64) -> Result<FeaturePyramid> {
    let mut out = c.clone();
    let t = out.get_mut(j)?;
    let noise = super::randn(seed, &format!("perturb.l{j}"), t.shape());
    for (x, e) in t.data_mut().iter_mut().zip(noise.data()) {
        *x += 0.5 * e;
    }
    Ok(out)
}

/// `changed[j][i]`: whether perturbing input level `j` changes output level `i`.
pub fn influence(
    c: &FeaturePyramid,
    seed: u64,
    forward: impl Fn(&FeaturePyramid) -> Result<FeaturePyramid>,
) -> Result<Vec<(usize, usize, bool)>> {
    let base = forward(c)?;
    let mut out = Vec::new();
    for j in c.levels() {
        let p = forward(&perturbed(c, j, seed)?)?;
        for (i, t) in p.iter() {
            out.push((j, i, !t.bit_eq(base.get(i)?)));
        }
    }
    Ok(out)
}

pub fn fpn_influence(cfg: &NeckConfig) -> Result<Vec<(usize, usize, bool)>> {
    let store = fpn::init_params(cfg, ConvInit::GENERIC);
    let c = extend_stem(&synth_backbone(cfg)?, &store, fpn::SCOPE, cfg)?;
    influence(&c, cfg.seed, |x| Ok(fpn::fpn_forward(x, &store, cfg)?))
}

pub fn revfp_influence(cfg: &NeckConfig, sever_post: bool) -> Result<Vec<(usize, usize, bool)>> {
    let (c, mut store) = revfp_setup(cfg)?;
    if sever_post {
        revfp::force_weight(&mut store, cfg, Site::Post, true)?;
    }
    influence(&c, cfg.seed, |x| Ok(revfp::revfp_forward(x, &store, cfg)?))
}

/// Perturbing `C_j` changes `P_i` exactly when `i <= j`.
fn fpn_unidirectional(ctx: &Ctx) -> Result<Outcome> {
    let probes = fpn_influence(&ctx.cfg)?;
    Ok(Outcome::violations(
        probes.iter().filter(|&&(j, i, ch)| ch != (i <= j)).count(),
    ))
}

/// Bottom-to-top reach (`C_{l_min}` to `P_{l_max}`) plus top-down input at
/// every level (`C_{i+1}` to `P_i`).
fn revfp_bidirectional(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let probes = revfp_influence(cfg, false)?;
    let changed = |j, i| probes.iter().any(|&(pj, pi, ch)| pj == j && pi == i && ch);
    let mut bad = usize::from(!changed(cfg.l_min, cfg.l_max));
    for i in cfg.l_min..cfg.l_max {
        bad += usize::from(!changed(i + 1, i));
    }
    Ok(Outcome::violations(bad))
}

/// With post-fusion saturated on its own input, `C_j` reaches only `P_{j-1}` and `P_j`.
fn revfp_locality(ctx: &Ctx) -> Result<Outcome> {
    let probes = revfp_influence(&ctx.cfg, true)?;
    Ok(Outcome::violations(
        probes
            .iter()
            .filter(|&&(j, i, ch)| ch != (i + 1 == j || i == j))
            .count(),
    ))
}

/// RevFP followed by CSN carries the top input level to the bottom output.
fn rcnet_top_to_bottom(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let (c, store) = revfp_setup(cfg)?;
    let csn_store = csn::init_params(cfg, ConvInit::GENERIC, false);
    let run = |x: &FeaturePyramid| -> Result<FeaturePyramid> {
        let p = revfp::revfp_forward(x, &store, cfg)?;
        Ok(csn::csn_forward(&p, &csn_store, cfg)?)
    };
    let base = run(&c)?;
    let moved = run(&perturbed(&c, cfg.l_max, cfg.seed)?)?;
    let diff = moved.get(cfg.l_min)?.max_abs_diff(base.get(cfg.l_min)?);
    Ok(Outcome::at_least(diff, f64::MIN_POSITIVE))
}

fn model_shapes(ctx: &Ctx) -> Result<Outcome> {
    use rcnet_core::rcnet::{self, InitMode, Model};
    let cfg = &ctx.cfg;
    let backbone = synth_backbone(cfg)?;
    let mut bad = 0;
    for m in Model::ALL {
        let store = rcnet::init_params(m, cfg, InitMode::Default);
        let out = rcnet::forward(m, &backbone, &store, cfg)?;
        bad += usize::from(
            out.check_shapes(cfg, cfg.levels(), |_| cfg.channels)
                .is_err(),
        );
        bad += out.iter().filter(|(_, t)| !t.all_finite()).count();
    }
    Ok(Outcome::violations(bad))
}
