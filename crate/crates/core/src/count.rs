//! Parameter and multiply-accumulate accounting over a recorded tape.
//!
//! Each operator is attributed to the row named by its scope. A parameter
//! is counted in the row of the first operator that consumes it. Only
//! convolutions perform multiply-accumulates: `N * Cout * H' * W' * Cin * kh * kw`.
//! Elementwise ops, pooling, resampling, softmax, normalization and gathers
//! count zero.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::config::NeckConfig;
use crate::error::Result;
use crate::fixtures::synth_backbone;
use crate::rcnet::{self, InitMode, Model};
use crate::tape::Tape;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub params: u64,
    pub macs: u64,
    /// Operators recorded in this scope.
    pub ops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    /// Keyed by scope path.
    pub rows: BTreeMap<String, CountRow>,
    /// Keyed by the first scope segment (`fpn`, `revfp`, `csn`).
    pub totals: BTreeMap<String, CountRow>,
}

impl CountReport {
    pub fn from_tape(tape: &Tape) -> Self {
        let nodes: Vec<_> = tape.nodes().collect();
        let mut rows: BTreeMap<String, CountRow> = BTreeMap::new();
        let mut seen = HashSet::new();
        for n in &nodes {
            if n.kind == "leaf" {
                continue;
            }
            let row = rows.entry(n.scope.to_string()).or_default();
            row.ops += 1;
            for v in &n.inputs {
                let input = &nodes[v.index()];
                if input.is_param && seen.insert(v.index()) {
                    row.params += input.shape.iter().product::<usize>() as u64;
                }
            }
            if n.kind == "conv2d" {
                let x = nodes[n.inputs[0].index()].shape;
                let w = nodes[n.inputs[1].index()].shape;
                let out = n.shape;
                row.macs += (out.iter().product::<usize>() * x[1] * w[2] * w[3]) as u64;
            }
        }
        let mut report = Self {
            rows,
            totals: BTreeMap::new(),
        };
        report.retotal();
        report
    }

    fn retotal(&mut self) {
        self.totals.clear();
        for (scope, row) in &self.rows {
            let module = scope.split('.').next().unwrap_or("").to_string();
            let t = self.totals.entry(module).or_default();
            t.params += row.params;
            t.macs += row.macs;
            t.ops += row.ops;
        }
    }

    /// Adds rows from another report; scopes must not overlap.
    pub fn merge(&mut self, other: CountReport) {
        self.rows.extend(other.rows);
        self.retotal();
    }

    pub fn row(&self, scope: &str) -> Option<&CountRow> {
        self.rows.get(scope)
    }

    pub fn total(&self, module: &str) -> CountRow {
        self.totals.get(module).cloned().unwrap_or_default()
    }
}

/// Counts `model` by running it on synthetic features for `cfg`.
pub fn count_model(model: Model, cfg: &NeckConfig) -> Result<CountReport> {
    let backbone = synth_backbone(cfg)?;
    let store = rcnet::init_params(model, cfg, InitMode::Default);
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let vars = backbone.record_constant(&mut tape);
    rcnet::model_on_tape(&mut tape, model, &params, cfg, &vars)?;
    Ok(CountReport::from_tape(&tape))
}

/// FPN and RevFP+CSN in one report.
pub fn count_all(cfg: &NeckConfig) -> Result<CountReport> {
    let mut report = count_model(Model::Fpn, cfg)?;
    report.merge(count_model(Model::Rcnet, cfg)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pointwise_conv_closed_form() {
        let (d, h, w) = (6, 5, 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, d, h, w]));
        let wt = tape.param(Tensor::ones(&[d, d, 1, 1]));
        let b = tape.param(Tensor::ones(&[d]));
        tape.scoped("m", |t| t.conv2d(x, wt, Some(b), 1, 0))
            .unwrap();
        let r = CountReport::from_tape(&tape);
        let row = r.row("m").unwrap();
        assert_eq!(row.params, (d * d + d) as u64);
        assert_eq!(row.macs, (h * w * d * d) as u64);
        assert_eq!(r.total("m"), *row);
    }

    #[test]
    fn shared_params_count_once() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::ones(&[3]));
        tape.scoped("a", |t| t.add(p, p)).unwrap();
        tape.scoped("b", |t| t.mul(p, p)).unwrap();
        let r = CountReport::from_tape(&tape);
        assert_eq!(r.row("a").unwrap().params, 3);
        assert_eq!(r.row("b").unwrap().params, 0);
    }

    #[test]
    fn shift_row_is_free() {
        let r = count_model(Model::Rcnet, &NeckConfig::tiny()).unwrap();
        assert_eq!(
            r.row("csn.scale_shift"),
            Some(&CountRow {
                params: 0,
                macs: 0,
                ops: 1
            })
        );
        let sum: u64 = r.rows.values().map(|r| r.params).sum();
        assert_eq!(sum, r.totals.values().map(|t| t.params).sum::<u64>());
    }
}
