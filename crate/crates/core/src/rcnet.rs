//! Model assembly: the FPN baseline, RevFP alone, and RevFP followed by CSN.

use std::fmt;
use std::str::FromStr;

use crate::config::NeckConfig;
use crate::csn;
use crate::error::{Error, Result};
use crate::fpn;
use crate::params::{ConvInit, ParamStore};
use crate::pyramid::{FeaturePyramid, Pyramid};
use crate::revfp;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Model {
    Fpn,
    Revfp,
    Rcnet,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::Fpn, Model::Revfp, Model::Rcnet];

    pub fn name(self) -> &'static str {
        match self {
            Model::Fpn => "fpn",
            Model::Revfp => "revfp",
            Model::Rcnet => "rcnet",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("unknown model {s:?} (fpn, revfp, rcnet)"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Fan-in weights, zero biases, zero-initialized CSN tails.
    Default,
    /// Every weight and bias random; used by perturbation probes.
    Generic,
}

pub fn init_params(model: Model, cfg: &NeckConfig, mode: InitMode) -> ParamStore {
    let conv = match mode {
        InitMode::Default => ConvInit::DEFAULT,
        InitMode::Generic => ConvInit::GENERIC,
    };
    match model {
        Model::Fpn => fpn::init_params(cfg, conv),
        Model::Revfp => revfp::init_params(cfg, conv),
        Model::Rcnet => {
            let mut store = revfp::init_params(cfg, conv);
            store.merge(csn::init_params(cfg, conv, mode == InitMode::Default));
            store
        }
    }
}

/// Records `model` on the backbone pyramid (stem included).
pub fn model_on_tape(
    tape: &mut Tape,
    model: Model,
    params: &crate::params::Bound,
    cfg: &NeckConfig,
    backbone: &Pyramid<Var>,
) -> Result<Pyramid<Var>> {
    match model {
        Model::Fpn => fpn::fpn_model_on_tape(tape, params, cfg, backbone),
        Model::Revfp => Ok(revfp::revfp_model_on_tape(tape, params, cfg, backbone)?.output),
        Model::Rcnet => {
            let p = revfp::revfp_model_on_tape(tape, params, cfg, backbone)?.output;
            csn::csn_on_tape(tape, params, cfg, &p)
        }
    }
}

/// Forward pass from backbone features to the output pyramid.
pub fn forward(
    model: Model,
    backbone: &FeaturePyramid,
    store: &ParamStore,
    cfg: &NeckConfig,
) -> Result<FeaturePyramid> {
    cfg.validate()?;
    backbone.check_shapes(cfg, cfg.backbone_levels(), |l| cfg.input_channels(l))?;
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let vars = backbone.record_constant(&mut tape);
    Ok(model_on_tape(&mut tape, model, &params, cfg, &vars)?.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::synth_backbone;

    #[test]
    fn names_round_trip() {
        for m in Model::ALL {
            assert_eq!(m.name().parse::<Model>().unwrap(), m);
        }
        assert!("bifpn".parse::<Model>().is_err());
    }

    #[test]
    fn every_parameter_is_used() {
        let cfg = NeckConfig::tiny();
        let c = synth_backbone(&cfg).unwrap();
        for m in Model::ALL {
            let store = init_params(m, &cfg, InitMode::Default);
            let mut tape = Tape::new();
            let params = store.bind(&mut tape);
            let vars = c.record_constant(&mut tape);
            let out = model_on_tape(&mut tape, m, &params, &cfg, &vars).unwrap();
            out.values(&tape)
                .check_shapes(&cfg, cfg.levels(), |_| cfg.channels)
                .unwrap();
            let used: std::collections::BTreeSet<usize> = tape
                .nodes()
                .flat_map(|n| n.inputs)
                .map(|v| v.index())
                .collect();
            for (name, v) in params.iter() {
                assert!(used.contains(&v.index()), "{m}: {name} unused");
            }
        }
    }
}
