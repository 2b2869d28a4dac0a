//! Reverse feature pyramid: one bottom-up pass with local top-down input.
//!
//! For every level below the top, the level above is upsampled under a
//! learned spatial attention (feature-guided upsampling) and blended into the
//! current lateral (pre-fusion). The result is then blended with the
//! max-pooled output of the level below (post-fusion). Blend weights come
//! from small global-pooling heads. The top level skips pre-fusion and the
//! bottom level skips post-fusion.

use crate::config::NeckConfig;
use crate::error::{Error, Result};
use crate::fixtures;
use crate::params::{Bound, ConvInit, Init, ParamStore};
use crate::pyramid::{FeaturePyramid, Pyramid};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SCOPE: &str = "revfp";

/// Bias that saturates a weight head to exactly 0 or 1.
pub const SATURATING_BIAS: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Pre,
    Post,
}

impl Site {
    fn scope(self) -> &'static str {
        match self {
            Site::Pre => "pre_fuse",
            Site::Post => "post_fuse",
        }
    }
}

pub fn init_params(cfg: &NeckConfig, init: ConvInit) -> ParamStore {
    let d = cfg.channels;
    let mut store = ParamStore::new(cfg.seed);
    for l in cfg.levels() {
        let p = format!("{SCOPE}.l{l}");
        store.conv(&format!("{p}.lateral"), cfg.input_channels(l), d, 1, init);
        if l < cfg.l_max {
            store.conv(&format!("{p}.fgu.logits"), 2 * d, 1, 3, init);
            store.init(&format!("{p}.fgu.temperature"), &[1], Init::Const(1.0), 0);
            init_fusion(&mut store, &format!("{p}.pre_fuse"), d, init);
        }
        if l > cfg.l_min {
            init_fusion(&mut store, &format!("{p}.post_fuse"), d, init);
        }
    }
    fixtures::init_stem(&mut store, SCOPE, cfg, init);
    store
}

fn init_fusion(store: &mut ParamStore, prefix: &str, d: usize, init: ConvInit) {
    store.conv(&format!("{prefix}.weight"), 2 * d, 1, 1, init);
    store.conv(&format!("{prefix}.conv"), d, d, 3, init);
    store.norm(&format!("{prefix}.norm"), d);
}

/// Forces the weight head of every `site` to emit exactly `value` (0 or 1).
pub fn force_weight(
    store: &mut ParamStore,
    cfg: &NeckConfig,
    site: Site,
    value: bool,
) -> Result<()> {
    let levels: Vec<usize> = match site {
        Site::Pre => (cfg.l_min..cfg.l_max).collect(),
        Site::Post => (cfg.l_min + 1..=cfg.l_max).collect(),
    };
    let bias = if value {
        SATURATING_BIAS
    } else {
        -SATURATING_BIAS
    };
    for l in levels {
        let name = format!("{SCOPE}.l{l}.{}.weight", site.scope());
        store.set(
            &format!("{name}.weight"),
            Tensor::zeros(&[1, 2 * cfg.channels, 1, 1]),
        )?;
        store.set(&format!("{name}.bias"), Tensor::full(&[1], bias))?;
    }
    Ok(())
}

/// Intermediate values recorded by [`revfp_on_tape`].
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub lateral: Pyramid<Var>,
    /// Guided upsample of the level above, per level below the top.
    pub guided: Pyramid<Var>,
    /// Spatial attention `w` (mean 1), per level below the top.
    pub fgu_weight: Pyramid<Var>,
    /// `(weight, blend)` of pre-fusion, per level below the top.
    pub pre_blend: Pyramid<(Var, Var)>,
    /// Pre-fusion output `P'`.
    pub pre: Pyramid<Var>,
    /// Max-pooled output of the level below, per level above the bottom.
    pub pooled: Pyramid<Var>,
    /// `(weight, blend)` of post-fusion, per level above the bottom.
    pub post_blend: Pyramid<(Var, Var)>,
    pub output: Pyramid<Var>,
}

/// Feature-guided upsampling of `next` onto the grid of `current`, in the
/// current scope. Returns `(guided, w)`.
pub fn feature_guided_upsample(
    tape: &mut Tape,
    params: &Bound,
    current: Var,
    next: Var,
) -> Result<(Var, Var)> {
    let u = tape.upsample_bilinear_x2(next)?;
    let (cs, us) = (tape.shape(current).to_vec(), tape.shape(u).to_vec());
    if cs != us {
        return Err(Error::shape(
            "fgu",
            format!("current {cs:?} vs upsampled {us:?}"),
        ));
    }
    let d = cs[1] as f64;
    let hw = (cs[2] * cs[3]) as f64;
    let joint = tape.concat(&[current, u], 1)?;
    let logits = params.conv(tape, "logits", joint, 1, 1)?;
    let temperature = params.local(tape, "temperature")?;
    let logits = tape.mul(logits, temperature)?;
    let logits = tape.scale(logits, 1.0 / d.sqrt())?;
    let w = tape.softmax(logits, &[2, 3])?;
    let w = tape.scale(w, hw)?;
    Ok((tape.mul(u, w)?, w))
}

/// `sigmoid(conv1x1(gap(concat(a, b))))`, one scalar per sample. The head is
/// the conv named `local` in the current scope.
pub fn dynamic_weight(tape: &mut Tape, params: &Bound, local: &str, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "dynamic_weight",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    let joint = tape.concat(&[a, b], 1)?;
    let pooled = tape.global_avg_pool(joint)?;
    let logit = params.conv(tape, local, pooled, 1, 0)?;
    tape.sigmoid(logit)
}

/// Weighted blend of `own` and `other`, then conv and norm. Returns
/// `(output, weight, blend)`.
fn fuse(tape: &mut Tape, params: &Bound, own: Var, other: Var) -> Result<(Var, Var, Var)> {
    let w = dynamic_weight(tape, params, "weight", own, other)?;
    let blend = tape.blend(w, own, other)?;
    let y = params.conv(tape, "conv", blend, 1, 1)?;
    Ok((params.norm(tape, "norm", y)?, w, blend))
}

/// Bottom-up pass over a full input pyramid `c` (stem already applied), in
/// the current scope.
pub fn revfp_on_tape(
    tape: &mut Tape,
    params: &Bound,
    cfg: &NeckConfig,
    c: &Pyramid<Var>,
) -> Result<Trace> {
    c.require(cfg.levels())?;
    let mut tr = Trace::default();
    for l in cfg.levels() {
        let lat = tape.scoped(&format!("l{l}"), |t| {
            params.conv(t, "lateral", *c.get(l)?, 1, 0)
        })?;
        tr.lateral.insert(l, lat);
    }
    for l in cfg.levels() {
        tape.scoped(&format!("l{l}"), |t| {
            let own = *tr.lateral.get(l)?;
            let pre = if l < cfg.l_max {
                let next = *tr.lateral.get(l + 1)?;
                let (guided, w) =
                    t.scoped("fgu", |t| feature_guided_upsample(t, params, own, next))?;
                tr.guided.insert(l, guided);
                tr.fgu_weight.insert(l, w);
                let (p, w, blend) = t.scoped("pre_fuse", |t| fuse(t, params, own, guided))?;
                tr.pre_blend.insert(l, (w, blend));
                p
            } else {
                own
            };
            tr.pre.insert(l, pre);
            let out = if l > cfg.l_min {
                let below = *tr.output.get(l - 1)?;
                let (p, pooled, w, blend) = t.scoped("post_fuse", |t| {
                    let pooled = t.maxpool2d(below, 2, 2)?;
                    if t.shape(pooled) != t.shape(pre) {
                        return Err(Error::Resolution {
                            level: l,
                            detail: format!("pooled {:?} vs {:?}", t.shape(pooled), t.shape(pre)),
                        });
                    }
                    let (p, w, blend) = fuse(t, params, pre, pooled)?;
                    Ok((p, pooled, w, blend))
                })?;
                tr.pooled.insert(l, pooled);
                tr.post_blend.insert(l, (w, blend));
                p
            } else {
                pre
            };
            tr.output.insert(l, out);
            Ok(())
        })?;
    }
    Ok(tr)
}

/// Stem plus bottom-up pass on the backbone pyramid, recorded under `revfp`.
pub fn revfp_model_on_tape(
    tape: &mut Tape,
    params: &Bound,
    cfg: &NeckConfig,
    backbone: &Pyramid<Var>,
) -> Result<Trace> {
    tape.scoped(SCOPE, |t| {
        let mut c = backbone.clone();
        fixtures::stem_on_tape(t, params, cfg, &mut c)?;
        revfp_on_tape(t, params, cfg, &c)
    })
}

/// Forward pass on a full input pyramid `C_{l_min}..C_{l_max}` (stem already applied).
pub fn revfp_forward(
    c: &FeaturePyramid,
    store: &ParamStore,
    cfg: &NeckConfig,
) -> Result<FeaturePyramid> {
    c.check_shapes(cfg, cfg.levels(), |l| cfg.input_channels(l))?;
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let vars = c.record_constant(&mut tape);
    let tr = tape.scoped(SCOPE, |t| revfp_on_tape(t, &params, cfg, &vars))?;
    Ok(tr.output.values(&tape))
}
