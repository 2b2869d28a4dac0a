//! The JSON document every subcommand emits.

use std::collections::BTreeMap;

use rcnet_core::count::CountReport;
use rcnet_core::{FeaturePyramid, NeckConfig, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::BenchResult;
use crate::checks::Outcome;

pub const SCHEMA: &str = "rcnet-report/1";

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub command: String,
    pub config: NeckConfig,
    pub checks: BTreeMap<String, Outcome>,
    /// Wall time per check plus `total`; the only nondeterministic fields
    /// besides the bench medians.
    pub timings_ns: BTreeMap<String, u64>,
    /// SHA-256 of serialized output tensors.
    pub digests: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<CountReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchResult>,
    pub all_pass: bool,
}

impl RunReport {
    pub fn new(command: &str, config: NeckConfig) -> Self {
        Self {
            schema: SCHEMA,
            command: command.to_string(),
            config,
            checks: BTreeMap::new(),
            timings_ns: BTreeMap::new(),
            digests: BTreeMap::new(),
            counts: None,
            bench: None,
            all_pass: true,
        }
    }

    pub fn record(&mut self, name: &str, outcome: Outcome, nanos: Option<u64>) {
        assert!(
            self.checks.insert(name.to_string(), outcome).is_none(),
            "check {name} recorded twice"
        );
        if let Some(ns) = nanos {
            self.timings_ns.insert(name.to_string(), ns);
        }
        self.all_pass = self.checks.values().all(|o| o.pass);
    }

    /// Digests of every level (`l3`, ...) and of the whole pyramid (`pyramid`).
    pub fn digest_pyramid(&mut self, prefix: &str, pyr: &FeaturePyramid) {
        let mut all = Sha256::new();
        for (l, t) in pyr.iter() {
            let bytes = tensor_bytes(t);
            all.update((l as u64).to_le_bytes());
            all.update(&bytes);
            self.digests
                .insert(format!("{prefix}l{l}"), hex::encode(Sha256::digest(&bytes)));
        }
        self.digests
            .insert(format!("{prefix}pyramid"), hex::encode(all.finalize()));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Rank, extents and data, all little-endian.
pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.rank() + t.numel()));
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_shape_and_data() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert_ne!(tensor_bytes(&a), tensor_bytes(&b));
        let mut r = RunReport::new("x", NeckConfig::tiny());
        let p: FeaturePyramid = [(3, a)].into_iter().collect();
        r.digest_pyramid("", &p);
        assert_eq!(r.digests.len(), 2);
        assert_eq!(r.digests["l3"].len(), 64);
    }

    #[test]
    fn failing_check_clears_all_pass() {
        let mut r = RunReport::new("x", NeckConfig::tiny());
        r.record("a", Outcome::at_most(0.0, 1.0), None);
        assert!(r.all_pass);
        r.record("b", Outcome::at_most(2.0, 1.0), Some(5));
        assert!(!r.all_pass);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["schema"], SCHEMA);
        assert_eq!(json["checks"]["b"]["pass"], false);
    }
}
