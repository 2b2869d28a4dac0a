//! Named verification checks, grouped by the subcommand that runs them.

mod count;
mod csn;
mod grad;
mod revfp;
mod shift;

pub use grad::end_to_end_check;
pub use shift::{kernel5_max_diff, routing_violations};

use std::cell::OnceCell;
use std::time::Instant;

use anyhow::{bail, Result};
use rcnet_core::count::CountReport;
use rcnet_core::{rng, FeaturePyramid, NeckConfig, Tensor};
use serde::Serialize;

use crate::bench::{self, BenchResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Invariants,
    GradCheck,
    Count,
    Bench,
    Forward,
    Fixtures,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub pass: bool,
    /// `null` when the check could not run.
    pub measured: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Outcome {
    pub fn at_most(measured: f64, tolerance: f64) -> Self {
        Self {
            pass: measured <= tolerance,
            measured,
            tolerance,
            error: None,
        }
    }

    pub fn at_least(measured: f64, tolerance: f64) -> Self {
        Self {
            pass: measured >= tolerance,
            measured,
            tolerance,
            error: None,
        }
    }

    /// Passes iff nothing was counted.
    pub fn violations(count: usize) -> Self {
        Self::at_most(count as f64, 0.0)
    }

    pub fn errored(err: &anyhow::Error) -> Self {
        Self {
            pass: false,
            measured: f64::NAN,
            tolerance: f64::NAN,
            error: Some(format!("{err:#}")),
        }
    }

    /// Fails when `other` fails; keeps the worse measurement of two `at_most` outcomes.
    pub fn and(self, other: Outcome) -> Self {
        Self {
            pass: self.pass && other.pass,
            measured: self.measured.max(other.measured),
            tolerance: self.tolerance,
            error: self.error.or(other.error),
        }
    }
}

/// Shared inputs and cached expensive results for one run.
pub struct Ctx {
    pub cfg: NeckConfig,
    pub reps: usize,
    bench: OnceCell<BenchResult>,
    counts: OnceCell<CountReport>,
}

impl Ctx {
    pub fn new(cfg: NeckConfig, reps: usize) -> Self {
        Self {
            cfg,
            reps,
            bench: OnceCell::new(),
            counts: OnceCell::new(),
        }
    }

    pub fn bench(&self) -> Result<&BenchResult> {
        if let Some(b) = self.bench.get() {
            return Ok(b);
        }
        let b = bench::bench_shift(&self.cfg, self.reps)?;
        Ok(self.bench.get_or_init(|| b))
    }

    pub fn bench_result(&self) -> Option<&BenchResult> {
        self.bench.get()
    }

    pub fn counts(&self) -> Result<&CountReport> {
        if let Some(c) = self.counts.get() {
            return Ok(c);
        }
        let c = rcnet_core::count::count_all(&self.cfg)?;
        Ok(self.counts.get_or_init(|| c))
    }

    pub fn count_result(&self) -> Option<&CountReport> {
        self.counts.get()
    }

    pub(crate) fn randn(&self, name: &str, shape: &[usize]) -> Tensor {
        randn(self.cfg.seed, name, shape)
    }

    /// Standard-normal pyramid with `d` channels at the configured resolutions.
    pub(crate) fn random_pyramid(&self, name: &str) -> FeaturePyramid {
        let cfg = &self.cfg;
        cfg.levels()
            .map(|l| {
                let (h, w) = cfg.resolution(l);
                (
                    l,
                    self.randn(&format!("{name}.l{l}"), &[cfg.batch, cfg.channels, h, w]),
                )
            })
            .collect()
    }
}

pub(crate) fn randn(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    rng::normal(&mut rng::stream(seed, name), shape, 1.0)
}

pub type CheckFn = fn(&Ctx) -> Result<Outcome>;

pub struct Check {
    pub name: &'static str,
    pub suite: Suite,
    pub run: CheckFn,
}

pub fn registry() -> Vec<Check> {
    let mut all = Vec::new();
    let mut add = |suite, list: &[(&'static str, CheckFn)]| {
        all.extend(list.iter().map(|&(name, run)| Check { name, suite, run }));
    };
    add(Suite::Invariants, shift::CHECKS);
    add(Suite::Invariants, revfp::CHECKS);
    add(Suite::Invariants, csn::CHECKS);
    add(Suite::GradCheck, grad::CHECKS);
    add(Suite::Count, count::CHECKS);
    add(Suite::Bench, bench::CHECKS);
    all
}

/// Checks of `suite`, restricted to `only` when given. Unknown names are an error.
pub fn select(suite: Suite, only: Option<&[String]>) -> Result<Vec<Check>> {
    let checks: Vec<Check> = registry()
        .into_iter()
        .filter(|c| c.suite == suite)
        .collect();
    let Some(only) = only else { return Ok(checks) };
    for name in only {
        if !checks.iter().any(|c| c.name == name) {
            let known: Vec<&str> = checks.iter().map(|c| c.name).collect();
            bail!("unknown check {name:?}; available: {}", known.join(", "));
        }
    }
    Ok(checks
        .into_iter()
        .filter(|c| only.iter().any(|n| n == c.name))
        .collect())
}

pub struct Ran {
    pub name: &'static str,
    pub outcome: Outcome,
    pub nanos: u64,
}

pub fn run(checks: &[Check], ctx: &Ctx) -> Vec<Ran> {
    checks
        .iter()
        .map(|c| {
            let start = Instant::now();
            let outcome = (c.run)(ctx).unwrap_or_else(|e| Outcome::errored(&e));
            Ran {
                name: c.name,
                outcome,
                nanos: start.elapsed().as_nanos() as u64,
            }
        })
        .collect()
}

/// Runs a single registered check by name.
pub fn run_named(name: &str, ctx: &Ctx) -> Result<Outcome> {
    let Some(c) = registry().into_iter().find(|c| c.name == name) else {
        bail!("no check named {name:?}");
    };
    (c.run)(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<&str> = registry().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn unknown_selection_is_rejected() {
        assert!(select(Suite::Invariants, Some(&["nope".to_string()])).is_err());
        let one = select(Suite::Count, Some(&["count.scale_shift_zero".to_string()])).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn nan_never_passes() {
        assert!(!Outcome::at_most(f64::NAN, 1.0).pass);
        assert!(!Outcome::at_least(f64::NAN, 1.0).pass);
    }
}
