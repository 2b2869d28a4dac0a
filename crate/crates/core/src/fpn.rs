//! Top-down feature pyramid baseline.
//!
//! Each backbone level gets a 1x1 lateral projection and a 3x3 output conv.
//! The merged map of a level is its lateral plus the upsampled merged map of
//! the level above. Stem levels already have `d` channels and take identity
//! in place of both convs, so the chain starts at the top level.

use std::ops::RangeInclusive;

use crate::config::NeckConfig;
use crate::error::{Error, Result};
use crate::fixtures;
use crate::params::{Bound, ConvInit, ParamStore};
use crate::pyramid::{FeaturePyramid, Pyramid};
use crate::tape::{Tape, Var};

pub const SCOPE: &str = "fpn";

pub fn init_params(cfg: &NeckConfig, init: ConvInit) -> ParamStore {
    let mut store = ParamStore::new(cfg.seed);
    for l in cfg.backbone_levels() {
        store.conv(
            &format!("{SCOPE}.l{l}.lateral"),
            cfg.input_channels(l),
            cfg.channels,
            1,
            init,
        );
        store.conv(
            &format!("{SCOPE}.l{l}.output"),
            cfg.channels,
            cfg.channels,
            3,
            init,
        );
    }
    fixtures::init_stem(&mut store, SCOPE, cfg, init);
    store
}

/// Runs the top-down pathway over `c`, inside the current scope.
///
/// Levels in `conv_levels` get a lateral and an output conv. Levels above
/// it already have `d` channels and use identity for both, so the top-down
/// chain still starts at the highest level.
pub fn fpn_on_tape(
    tape: &mut Tape,
    params: &Bound,
    c: &Pyramid<Var>,
    conv_levels: RangeInclusive<usize>,
) -> Result<Pyramid<Var>> {
    c.require(conv_levels.clone())?;
    if let Some(l) = c.levels().find(|l| l < conv_levels.start()) {
        return Err(Error::InvalidArgument(format!(
            "fpn: level {l} below the lateral range"
        )));
    }
    let levels: Vec<usize> = c.levels().collect();
    let mut out = Pyramid::new();
    let mut above: Option<Var> = None;
    for &l in levels.iter().rev() {
        let (p, merged) = tape.scoped(&format!("l{l}"), |t| {
            let x = *c.get(l)?;
            let mut m = if conv_levels.contains(&l) {
                params.conv(t, "lateral", x, 1, 0)?
            } else {
                x
            };
            if let Some(a) = above {
                let up = t.upsample_bilinear_x2(a)?;
                if t.shape(up) != t.shape(m) {
                    return Err(Error::Resolution {
                        level: l,
                        detail: format!("{:?} vs upsampled {:?}", t.shape(m), t.shape(up)),
                    });
                }
                m = t.add(m, up)?;
            }
            if conv_levels.contains(&l) {
                Ok((params.conv(t, "output", m, 1, 1)?, m))
            } else {
                Ok((m, m))
            }
        })?;
        out.insert(l, p);
        above = Some(merged);
    }
    Ok(out)
}

/// Stem plus top-down pathway on the backbone pyramid `c`, recorded under `fpn`.
pub fn fpn_model_on_tape(
    tape: &mut Tape,
    params: &Bound,
    cfg: &NeckConfig,
    backbone: &Pyramid<Var>,
) -> Result<Pyramid<Var>> {
    tape.scoped(SCOPE, |t| {
        let mut c = backbone.clone();
        fixtures::stem_on_tape(t, params, cfg, &mut c)?;
        fpn_on_tape(t, params, &c, cfg.backbone_levels())
    })
}

/// Forward pass on a full input pyramid `C_{l_min}..C_{l_max}` (stem already applied).
pub fn fpn_forward(
    c: &FeaturePyramid,
    store: &ParamStore,
    cfg: &NeckConfig,
) -> Result<FeaturePyramid> {
    c.check_shapes(cfg, cfg.levels(), |l| cfg.input_channels(l))?;
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let vars = c.record_constant(&mut tape);
    let out = tape.scoped(SCOPE, |t| {
        fpn_on_tape(t, &params, &vars, cfg.backbone_levels())
    })?;
    Ok(out.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{extend_stem, synth_backbone};
    use crate::tensor::Tensor;

    fn setup(init: ConvInit) -> (NeckConfig, FeaturePyramid, ParamStore) {
        let cfg = NeckConfig::tiny();
        let store = init_params(&cfg, init);
        let c = extend_stem(&synth_backbone(&cfg).unwrap(), &store, SCOPE, &cfg).unwrap();
        (cfg, c, store)
    }

    #[test]
    fn zero_laterals_give_output_bias() {
        let cfg = NeckConfig {
            extra_levels: crate::config::ExtraLevels::Backbone,
            backbone_channels: vec![4, 6, 8, 8, 8],
            ..NeckConfig::tiny()
        };
        let c = synth_backbone(&cfg).unwrap();
        let mut store = init_params(&cfg, ConvInit::GENERIC);
        for l in cfg.levels() {
            let name = format!("fpn.l{l}.lateral");
            store
                .set(
                    &format!("{name}.weight"),
                    Tensor::zeros(store.get(&format!("{name}.weight")).unwrap().shape()),
                )
                .unwrap();
            store
                .set(&format!("{name}.bias"), Tensor::zeros(&[cfg.channels]))
                .unwrap();
        }
        let p = fpn_forward(&c, &store, &cfg).unwrap();
        for l in cfg.levels() {
            let bias = store.get(&format!("fpn.l{l}.output.bias")).unwrap();
            let t = p.get(l).unwrap();
            let hw = t.shape()[2] * t.shape()[3];
            for (i, &v) in t.data().iter().enumerate() {
                assert_eq!(v, bias.data()[(i / hw) % cfg.channels]);
            }
        }
    }

    #[test]
    fn shapes_and_stem_levels() {
        let (cfg, c, store) = setup(ConvInit::DEFAULT);
        let p = fpn_forward(&c, &store, &cfg).unwrap();
        p.check_shapes(&cfg, cfg.levels(), |_| cfg.channels)
            .unwrap();
        assert!(p.get(cfg.l_max).unwrap().bit_eq(c.get(cfg.l_max).unwrap()));
        let mut t = Tape::new();
        let top = t.constant(c.get(7).unwrap().clone());
        let up = t.upsample_bilinear_x2(top).unwrap();
        let c6 = t.constant(c.get(6).unwrap().clone());
        let want = t.add(c6, up).unwrap();
        assert!(p.get(6).unwrap().bit_eq(t.value(want)));
    }

    #[test]
    fn single_level_is_output_of_lateral() {
        let (_, c, store) = setup(ConvInit::GENERIC);
        let one: FeaturePyramid = [(3, c.get(3).unwrap().clone())].into_iter().collect();
        let mut tape = Tape::new();
        let params = store.bind_constant(&mut tape);
        let vars = one.record_constant(&mut tape);
        let out = tape
            .scoped(SCOPE, |t| fpn_on_tape(t, &params, &vars, 3..=3))
            .unwrap();
        let got = tape.value(*out.get(3).unwrap()).clone();

        let mut t2 = Tape::new();
        let p2 = store.bind_constant(&mut t2);
        let x = t2.constant(one.get(3).unwrap().clone());
        let lw = p2.get("fpn.l3.lateral.weight").unwrap();
        let lb = p2.get("fpn.l3.lateral.bias").unwrap();
        let ow = p2.get("fpn.l3.output.weight").unwrap();
        let ob = p2.get("fpn.l3.output.bias").unwrap();
        let lat = t2.conv2d(x, lw, Some(lb), 1, 0).unwrap();
        let want = t2.conv2d(lat, ow, Some(ob), 1, 1).unwrap();
        assert!(got.bit_eq(t2.value(want)));
    }

    #[test]
    fn missing_level_is_reported() {
        let (cfg, mut c, store) = setup(ConvInit::DEFAULT);
        c = c
            .iter()
            .filter(|&(l, _)| l != 4)
            .map(|(l, t)| (l, t.clone()))
            .collect();
        assert!(matches!(
            fpn_forward(&c, &store, &cfg),
            Err(Error::MissingLevel(4))
        ));
    }
}
