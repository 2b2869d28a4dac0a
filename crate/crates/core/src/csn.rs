//! Cross-scale shift network.
//!
//! All levels are resized to the reference level and stacked on a scale axis
//! (`[N, d, n, h, w]`). A fraction of the channels is circularly shifted along
//! that axis, the result is aggregated by 1x1 convs with a residual, reweighted
//! by a scale-wise and a spatial global context branch, split back into
//! levels, and added to the input pyramid.

use crate::config::NeckConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ConvInit, ParamStore};
use crate::pyramid::{FeaturePyramid, Pyramid};
use crate::tape::{Tape, Var};

pub const SCOPE: &str = "csn";

/// Scale offsets of the shifted channel blocks, in channel order.
pub const OFFSETS: [isize; 4] = [-2, -1, 1, 2];

/// How channels move along the scale axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftPlan {
    pub channels: usize,
    pub scales: usize,
    /// Channels per offset block.
    pub block: usize,
}

impl ShiftPlan {
    pub fn new(channels: usize, scales: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(4 * ratio) {
            return Err(Error::InvalidArgument(format!(
                "scale_shift: {channels} channels cannot be split over 4 offsets at ratio {ratio}"
            )));
        }
        Ok(Self {
            channels,
            scales,
            block: channels / (4 * ratio),
        })
    }

    pub fn from_config(cfg: &NeckConfig) -> Result<Self> {
        Self::new(cfg.channels, cfg.n_levels(), cfg.shift_ratio)
    }

    /// A plan that shifts nothing.
    pub fn none(channels: usize, scales: usize) -> Self {
        Self {
            channels,
            scales,
            block: 0,
        }
    }

    pub fn shifted(&self) -> usize {
        4 * self.block
    }

    pub fn out_channels(&self) -> usize {
        self.channels + self.shifted()
    }

    /// Source `(channel, scale)` of output channel `c` at scale `s`.
    pub fn source(&self, c: usize, s: usize) -> (usize, usize) {
        if c < self.channels {
            return (c, s);
        }
        let j = c - self.channels;
        let o = OFFSETS[j / self.block];
        (
            j,
            (s as isize + o).rem_euclid(self.scales as isize) as usize,
        )
    }

    /// Flat gather indices for an `[n, d, scales, h, w]` stack.
    pub fn index(&self, shape: &[usize]) -> Vec<usize> {
        let hw = shape[3] * shape[4];
        self.slices(shape)
            .into_iter()
            .flat_map(|base| base..base + hw)
            .collect()
    }

    /// Start of the `h*w` source slice for every output `(batch, channel, scale)`.
    pub fn slices(&self, shape: &[usize]) -> Vec<usize> {
        let (n, d, sc, hw) = (shape[0], shape[1], shape[2], shape[3] * shape[4]);
        let co = self.out_channels();
        let mut starts = Vec::with_capacity(n * co * sc);
        for b in 0..n {
            for c in 0..co {
                for s in 0..sc {
                    let (ci, si) = self.source(c, s);
                    starts.push(((b * d + ci) * sc + si) * hw);
                }
            }
        }
        starts
    }
}

pub fn init_params(cfg: &NeckConfig, init: ConvInit, zero_tail: bool) -> ParamStore {
    let d = cfg.channels;
    let tail = if zero_tail { ConvInit::ZERO } else { init };
    let mut store = ParamStore::new(cfg.seed);
    store.conv(
        &format!("{SCOPE}.aggregate.reduce"),
        d + cfg.shifted_channels(),
        d,
        1,
        init,
    );
    store.norm(&format!("{SCOPE}.aggregate.norm"), d);
    store.conv(&format!("{SCOPE}.aggregate.expand"), d, d, 1, tail);
    for branch in ["scale", "spatial"] {
        store.conv(&format!("{SCOPE}.context.{branch}.mix"), d, d, 1, init);
        store.conv(&format!("{SCOPE}.context.{branch}.out"), d, d, 1, tail);
    }
    store
}

fn resize(tape: &mut Tape, mut x: Var, from: usize, to: usize) -> Result<Var> {
    for _ in to..from {
        x = tape.upsample_bilinear_x2(x)?;
    }
    for _ in from..to {
        x = tape.maxpool2d(x, 2, 2)?;
    }
    Ok(x)
}

/// Resizes every level to level `k` and stacks them on axis 2, in scope `gather`.
pub fn gather_to_reference(tape: &mut Tape, p: &Pyramid<Var>, k: usize) -> Result<Var> {
    let (lo, hi) = match (p.lowest(), p.highest()) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => return Err(Error::InvalidArgument("gather: empty pyramid".into())),
    };
    if !(lo..=hi).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "gather: reference level {k} outside {lo}..={hi}"
        )));
    }
    p.require(lo..=hi)?;
    tape.scoped("gather", |t| {
        let mut slices = Vec::new();
        for l in lo..=hi {
            let r = resize(t, *p.get(l)?, l, k)?;
            let s = t.shape(r).to_vec();
            slices.push(t.reshape(r, &[s[0], s[1], 1, s[2], s[3]])?);
        }
        t.concat(&slices, 2)
    })
}

/// Circular channel shift along the scale axis, in scope `scale_shift`.
/// Pure gather: no parameters, no arithmetic.
pub fn scale_shift(tape: &mut Tape, stack: Var, plan: &ShiftPlan) -> Result<Var> {
    let s = tape.shape(stack).to_vec();
    if s.len() != 5 || s[1] != plan.channels || s[2] != plan.scales {
        return Err(Error::shape(
            "scale_shift",
            format!(
                "stack {s:?} for {} channels over {} scales",
                plan.channels, plan.scales
            ),
        ));
    }
    let starts = plan.slices(&s);
    let shape = [s[0], plan.out_channels(), s[2], s[3], s[4]];
    tape.scoped("scale_shift", |t| {
        t.take_blocks(stack, starts, s[3] * s[4], &shape, "scale_shift")
    })
}

/// 1x1 conv applied independently to every scale slice of a stack.
fn pointwise(tape: &mut Tape, params: &Bound, local: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2], s[3] * s[4]])?;
    let y = params.conv(tape, local, flat, 1, 0)?;
    let c = tape.shape(y)[1];
    tape.reshape(y, &[s[0], c, s[2], s[3], s[4]])
}

/// `reduce -> norm -> relu -> expand`, plus the unshifted stack, in scope `aggregate`.
pub fn shift_aggregate(tape: &mut Tape, params: &Bound, shifted: Var, stack: Var) -> Result<Var> {
    let (a, b) = (tape.shape(shifted).to_vec(), tape.shape(stack).to_vec());
    if a.len() != 5 || b.len() != 5 || a[0] != b[0] || a[2..] != b[2..] || a[1] < b[1] {
        return Err(Error::shape(
            "shift_aggregate",
            format!("shifted {a:?} vs stack {b:?}"),
        ));
    }
    tape.scoped("aggregate", |t| {
        let y = pointwise(t, params, "reduce", shifted)?;
        let y = params.norm(t, "norm", y)?;
        let y = t.relu(y)?;
        let y = pointwise(t, params, "expand", y)?;
        t.add(y, stack)
    })
}

/// Outputs of [`dual_global_context_traced`].
#[derive(Debug, Clone, Copy)]
pub struct ContextTrace {
    pub output: Var,
    /// `n * softmax` over scales, `[N, d, n, 1, 1]`.
    pub scale_weight: Var,
    /// `h * w * softmax` over positions, `[N, d, 1, h, w]`.
    pub spatial_weight: Var,
}

/// Scale-wise and spatial global context, added back to `y`, in scope `context`.
pub fn dual_global_context(tape: &mut Tape, params: &Bound, y: Var) -> Result<Var> {
    Ok(dual_global_context_traced(tape, params, y)?.output)
}

pub fn dual_global_context_traced(tape: &mut Tape, params: &Bound, y: Var) -> Result<ContextTrace> {
    let s = tape.shape(y).to_vec();
    if s.len() != 5 {
        return Err(Error::shape(
            "dual_global_context",
            format!("expected [N, d, n, h, w], got {s:?}"),
        ));
    }
    let (n, hw) = (s[2] as f64, (s[3] * s[4]) as f64);
    tape.scoped("context", |t| {
        let (scale, scale_weight) = t.scoped("scale", |t| {
            let u = t.mean_axes(y, &[3, 4])?;
            let v = pointwise(t, params, "mix", u)?;
            let a = t.softmax(v, &[2])?;
            let a = t.scale(a, n)?;
            let y1 = t.mul(y, a)?;
            let z = t.mean_axes(y1, &[2])?;
            Ok((pointwise(t, params, "out", z)?, a))
        })?;
        let (spatial, spatial_weight) = t.scoped("spatial", |t| {
            let m = t.mean_axes(y, &[2])?;
            let v = pointwise(t, params, "mix", m)?;
            let a = t.softmax(v, &[3, 4])?;
            let a = t.scale(a, hw)?;
            let y2 = t.mul(y, a)?;
            let z = t.mean_axes(y2, &[3, 4])?;
            Ok((pointwise(t, params, "out", z)?, a))
        })?;
        let out = t.add(y, scale)?;
        Ok(ContextTrace {
            output: t.add(out, spatial)?,
            scale_weight,
            spatial_weight,
        })
    })
}

/// Splits the stack back into levels `l_min..`, resizes each from level `k`
/// and adds it to `p`, in scope `scatter`.
pub fn scatter_and_combine(
    tape: &mut Tape,
    stack: Var,
    p: &Pyramid<Var>,
    k: usize,
) -> Result<Pyramid<Var>> {
    let s = tape.shape(stack).to_vec();
    if s.len() != 5 || s[2] != p.len() {
        return Err(Error::shape(
            "scatter",
            format!("stack {s:?} for {} levels", p.len()),
        ));
    }
    tape.scoped("scatter", |t| {
        let mut out = Pyramid::new();
        for (i, (l, &pl)) in p.iter().enumerate() {
            let slice = t.narrow(stack, 2, i, 1)?;
            let slice = t.reshape(slice, &[s[0], s[1], s[3], s[4]])?;
            let r = resize(t, slice, k, l)?;
            if t.shape(r) != t.shape(pl) {
                return Err(Error::Resolution {
                    level: l,
                    detail: format!("resized {:?} vs {:?}", t.shape(r), t.shape(pl)),
                });
            }
            out.insert(l, t.add(pl, r)?);
        }
        Ok(out)
    })
}

/// The whole network on `p`, recorded under `csn`.
pub fn csn_on_tape(
    tape: &mut Tape,
    params: &Bound,
    cfg: &NeckConfig,
    p: &Pyramid<Var>,
) -> Result<Pyramid<Var>> {
    let plan = ShiftPlan::from_config(cfg)?;
    p.require(cfg.levels())?;
    tape.scoped(SCOPE, |t| {
        let stack = gather_to_reference(t, p, cfg.reference_level)?;
        let shifted = scale_shift(t, stack, &plan)?;
        let y = shift_aggregate(t, params, shifted, stack)?;
        let y = dual_global_context(t, params, y)?;
        scatter_and_combine(t, y, p, cfg.reference_level)
    })
}

pub fn csn_forward(
    p: &FeaturePyramid,
    store: &ParamStore,
    cfg: &NeckConfig,
) -> Result<FeaturePyramid> {
    p.check_shapes(cfg, cfg.levels(), |_| cfg.channels)?;
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let vars = p.record_constant(&mut tape);
    Ok(csn_on_tape(&mut tape, &params, cfg, &vars)?.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn routing_table_for_five_levels() {
        // Scale index 3 is level 6; blocks are offsets -2, -1, +1, +2.
        let plan = ShiftPlan::new(16, 5, 1).unwrap();
        let levels: Vec<usize> = (0..4)
            .map(|b| 3 + plan.source(16 + b * plan.block, 3).1)
            .collect();
        assert_eq!(levels, vec![4, 5, 7, 3]);
        assert_eq!(plan.source(5, 3), (5, 3));
    }

    #[test]
    fn plan_validation() {
        assert!(ShiftPlan::new(12, 5, 2).is_err());
        assert!(ShiftPlan::new(16, 5, 0).is_err());
        assert_eq!(ShiftPlan::new(64, 5, 4).unwrap().shifted(), 16);
    }

    #[test]
    fn empty_plan_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(rng::normal(&mut rng::stream(0, "s"), &[1, 8, 5, 2, 2], 1.0));
        let y = scale_shift(&mut tape, x, &ShiftPlan::none(8, 5)).unwrap();
        assert!(tape.value(x).bit_eq(tape.value(y)));
    }

    #[test]
    fn shift_is_bijective_on_blocks() {
        let plan = ShiftPlan::new(8, 5, 2).unwrap();
        let shape = [2, 8, 5, 2, 3];
        let index = plan.index(&shape);
        let hw = 6;
        let mut seen = std::collections::BTreeMap::new();
        for (o, &i) in index.iter().enumerate() {
            let c = (o / (5 * hw)) % plan.out_channels();
            if c >= 8 {
                *seen.entry(i).or_insert(0) += 1;
            }
        }
        // Every element of the first d/r input channels appears exactly once.
        let mut want = 0;
        for b in 0..2 {
            for c in 0..plan.shifted() {
                for r in 0..5 * hw {
                    assert_eq!(seen.get(&((b * 8 + c) * 5 * hw + r)), Some(&1));
                    want += 1;
                }
            }
        }
        assert_eq!(seen.len(), want);
    }
}
