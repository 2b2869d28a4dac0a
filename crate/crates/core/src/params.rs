//! Named, hierarchical parameter storage with deterministic initialization.
//!
//! Names are dot-separated paths (`revfp.l3.pre_fuse.conv.weight`). A layer
//! helper running inside tape scope `a.b` with local name `conv` reads
//! `a.b.conv.weight` and `a.b.conv.bias`, so parameter paths and cost-report
//! rows line up.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::DEFAULT_EPS;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Normal with standard deviation `1 / sqrt(fan_in)`.
    FanIn,
    Const(f64),
}

/// Convolution weights default to fan-in scaling; biases start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvInit {
    pub weight: Init,
    pub bias: Init,
}

impl ConvInit {
    pub const DEFAULT: Self = Self {
        weight: Init::FanIn,
        bias: Init::Const(0.0),
    };
    pub const ZERO: Self = Self {
        weight: Init::Const(0.0),
        bias: Init::Const(0.0),
    };
    /// Random weights and biases, for probes that need generic parameters.
    pub const GENERIC: Self = Self {
        weight: Init::FanIn,
        bias: Init::Normal(0.1),
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates `name` with values drawn from the `(seed, name)` stream.
    /// `fan_in` is only used by [`Init::FanIn`].
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, fan_in: usize) -> &Tensor {
        let value = match init {
            Init::Const(c) => Tensor::full(shape, c),
            Init::Normal(std) => rng::normal(&mut rng::stream(self.seed, name), shape, std),
            Init::FanIn => rng::normal(
                &mut rng::stream(self.seed, name),
                shape,
                1.0 / (fan_in.max(1) as f64).sqrt(),
            ),
        };
        self.entries.insert(name.to_string(), value);
        &self.entries[name]
    }

    /// `name.weight: [cout, cin, k, k]` and `name.bias: [cout]`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, init: ConvInit) {
        let fan_in = cin * kernel * kernel;
        self.init(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            init.weight,
            fan_in,
        );
        self.init(&format!("{name}.bias"), &[cout], init.bias, fan_in);
    }

    /// `name.gamma` (ones) and `name.beta` (zeros), each `[channels]`.
    pub fn norm(&mut self, name: &str, channels: usize) {
        self.init(&format!("{name}.gamma"), &[channels], Init::Const(1.0), 0);
        self.init(&format!("{name}.beta"), &[channels], Init::Const(0.0), 0);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Replaces an existing parameter; shapes must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar parameters whose path starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Records every parameter as a non-learnable constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape, looked up by path.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pairs `names` with already-recorded `vars`.
    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Self {
        Self {
            vars: names
                .into_iter()
                .zip(vars)
                .map(|(n, &v)| (n.to_string(), v))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Parameter `local` under the tape's current scope.
    pub fn local(&self, tape: &Tape, local: &str) -> Result<Var> {
        self.get(&join(&tape.current_scope(), local))
    }

    /// Convolution named `local` under the current scope, recorded in its own scope.
    pub fn conv(
        &self,
        tape: &mut Tape,
        local: &str,
        x: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        tape.scoped(local, |t| {
            let prefix = t.current_scope();
            let w = self.get(&format!("{prefix}.weight"))?;
            let b = self.get(&format!("{prefix}.bias"))?;
            t.conv2d(x, w, Some(b), stride, padding)
        })
    }

    /// Channel normalization named `local` under the current scope.
    pub fn norm(&self, tape: &mut Tape, local: &str, x: Var) -> Result<Var> {
        tape.scoped(local, |t| {
            let prefix = t.current_scope();
            let g = self.get(&format!("{prefix}.gamma"))?;
            let b = self.get(&format!("{prefix}.beta"))?;
            t.channel_norm(x, g, b, DEFAULT_EPS)
        })
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(9);
        a.conv("x", 3, 4, 3, ConvInit::DEFAULT);
        a.conv("y", 2, 2, 1, ConvInit::GENERIC);
        let mut b = ParamStore::new(9);
        b.conv("y", 2, 2, 1, ConvInit::GENERIC);
        b.conv("x", 3, 4, 3, ConvInit::DEFAULT);
        assert_eq!(a, b);
        assert_eq!(a.count("x."), 4 * 3 * 9 + 4);
        assert_eq!(a.count(""), 4 * 3 * 9 + 4 + 6);
    }

    #[test]
    fn scoped_layers_resolve_names() {
        let mut store = ParamStore::new(1);
        store.conv("m.site.conv", 2, 3, 1, ConvInit::DEFAULT);
        store.norm("m.site.norm", 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::ones(&[2, 2, 2, 2]));
        let y = tape
            .scoped("m", |t| {
                t.scoped("site", |t| {
                    let y = p.conv(t, "conv", x, 1, 0)?;
                    p.norm(t, "norm", y)
                })
            })
            .unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 2, 2]);
        let err = tape
            .scoped("m", |t| p.conv(t, "missing", x, 1, 0))
            .unwrap_err();
        assert_eq!(err, Error::MissingParam("m.missing.weight".into()));
    }

    #[test]
    fn set_checks_shape() {
        let mut store = ParamStore::new(1);
        store.conv("c", 1, 1, 1, ConvInit::DEFAULT);
        assert!(store.set("c.bias", Tensor::ones(&[2])).is_err());
        store.set("c.bias", Tensor::full(&[1], 3.0)).unwrap();
        assert_eq!(store.get("c.bias").unwrap().data(), &[3.0]);
    }
}
