//! Acceptance criteria 1-12. Prints one line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use rcnet_cli::checks::{self, run_named, Ctx, Outcome, Suite};
use rcnet_core::fixtures;
use rcnet_core::NeckConfig;
use serde_json::Value;

type Criterion = (&'static str, fn() -> Result<Verdict>);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn from_outcomes(outcomes: &[(&str, Outcome)]) -> Self {
        let pass = outcomes.iter().all(|(_, o)| o.pass);
        let detail = outcomes
            .iter()
            .map(|(n, o)| {
                format!(
                    "{n}={:.3e}/{:.0e}{}",
                    o.measured,
                    o.tolerance,
                    if o.pass { "" } else { "!" }
                )
            })
            .collect::<Vec<_>>()
            .join(" ");
        Self { pass, detail }
    }
}

fn named(ctx: &Ctx, names: &[&'static str]) -> Result<Vec<(&'static str, Outcome)>> {
    names.iter().map(|&n| Ok((n, run_named(n, ctx)?))).collect()
}

fn elapsed_within(
    label: &'static str,
    took: Duration,
    budget: Duration,
) -> (&'static str, Outcome) {
    (
        label,
        Outcome::at_most(took.as_secs_f64(), budget.as_secs_f64()),
    )
}

fn desk() -> Ctx {
    Ctx::new(NeckConfig::desk(), 100)
}

fn paper() -> Ctx {
    Ctx::new(NeckConfig::desk().with_paper_width(), 100)
}

fn c1() -> Result<Verdict> {
    let start = Instant::now();
    let diff = rcnet_cli::checks::kernel5_max_diff(0)?;
    let took = start.elapsed();
    Ok(Verdict::from_outcomes(&[
        ("max_diff", Outcome::at_most(diff, 1e-12)),
        elapsed_within("seconds", took, Duration::from_secs(5)),
    ]))
}

fn c2() -> Result<Verdict> {
    Ok(Verdict::from_outcomes(&named(
        &desk(),
        &["shift.routing_table"],
    )?))
}

fn c3() -> Result<Verdict> {
    Ok(Verdict::from_outcomes(&named(&desk(), &["fgu.unit_mean"])?))
}

fn c4() -> Result<Verdict> {
    Ok(Verdict::from_outcomes(&named(
        &desk(),
        &["fusion.convex_envelope"],
    )?))
}

fn c5() -> Result<Verdict> {
    Ok(Verdict::from_outcomes(&named(
        &desk(),
        &["fusion.boundary_rules"],
    )?))
}

fn c6() -> Result<Verdict> {
    Ok(Verdict::from_outcomes(&named(
        &desk(),
        &[
            "flow.fpn_unidirectional",
            "flow.revfp_bidirectional",
            "flow.rcnet_top_to_bottom",
        ],
    )?))
}

fn c7() -> Result<Verdict> {
    let ctx = desk();
    let start = Instant::now();
    let ran = checks::run(&checks::select(Suite::GradCheck, None)?, &ctx);
    let took = start.elapsed();
    let failed: Vec<&str> = ran
        .iter()
        .filter(|r| !r.outcome.pass)
        .map(|r| r.name)
        .collect();
    let worst = ran.iter().map(|r| r.outcome.measured).fold(0.0, f64::max);
    let mut v = Verdict::from_outcomes(&[
        ("failed_checks", Outcome::violations(failed.len())),
        elapsed_within("seconds", took, Duration::from_secs(60)),
    ]);
    v.detail = format!(
        "{} ({} checks, worst measured {worst:.3e}, failing {failed:?})",
        v.detail,
        ran.len()
    );
    Ok(v)
}

fn c8() -> Result<Verdict> {
    let mut outcomes = named(&desk(), &["count.scale_shift_zero"])?;
    outcomes.extend(named(&paper(), &["bench.equality", "bench.ratio"])?);
    Ok(Verdict::from_outcomes(&outcomes))
}

fn c9() -> Result<Verdict> {
    Ok(Verdict::from_outcomes(&named(
        &desk(),
        &[
            "csn.aggregate_identity",
            "csn.context_identity",
            "csn.init_roundtrip",
        ],
    )?))
}

fn c10() -> Result<Verdict> {
    let mut outcomes = Vec::new();
    for (label, r) in [("r1", 1), ("r2", 2), ("r4", 4), ("r8", 8)] {
        let cfg = NeckConfig {
            shift_ratio: r,
            ..NeckConfig::desk()
        };
        let ran = checks::run(
            &checks::select(Suite::Invariants, None)?,
            &Ctx::new(cfg, 100),
        );
        outcomes.push((
            label,
            Outcome::violations(ran.iter().filter(|x| !x.outcome.pass).count()),
        ));
    }
    Ok(Verdict::from_outcomes(&outcomes))
}

fn rcnet(args: &[&str]) -> Result<(i32, Value)> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().join("report.json");
    let status = Command::new(env!("CARGO_BIN_EXE_rcnet"))
        .args(args)
        .arg("--out")
        .arg(&out)
        .status()
        .context("spawning rcnet")?;
    let report = serde_json::from_str(&std::fs::read_to_string(&out)?)?;
    Ok((status.code().unwrap_or(-1), report))
}

fn digests(report: &Value) -> BTreeMap<String, String> {
    serde_json::from_value(report["digests"].clone()).unwrap_or_default()
}

fn c11() -> Result<Verdict> {
    let (code_a, a) = rcnet(&["forward", "rcnet", "--seed", "7"])?;
    let (code_b, b) = rcnet(&["forward", "rcnet", "--seed", "7"])?;
    ensure!(
        code_a == 0 && code_b == 0,
        "forward exited {code_a}/{code_b}"
    );
    let (da, db) = (digests(&a), digests(&b));
    ensure!(!da.is_empty(), "forward report has no digests");

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("backbone.fpz");
    let cfg = NeckConfig {
        seed: 7,
        ..NeckConfig::desk()
    };
    let pyr = fixtures::synth_backbone(&cfg)?;
    fixtures::save_pyramid(&path, &pyr, Some(&cfg))?;
    let back = fixtures::load_pyramid(Path::new(&path))?;
    let bytes = std::fs::read(&path)?;
    let rewritten = fixtures::encode(&back, Some(&cfg));

    Ok(Verdict::from_outcomes(&[
        (
            "digest_mismatches",
            Outcome::violations(usize::from(da != db)),
        ),
        (
            "fpz_round_trip",
            Outcome::violations(usize::from(!back.bit_eq(&pyr))),
        ),
        (
            "fpz_reencode",
            Outcome::violations(usize::from(rewritten != bytes)),
        ),
    ]))
}

fn c12() -> Result<Verdict> {
    Ok(Verdict::from_outcomes(&named(
        &paper(),
        &["count.fpn_params", "count.revfp_params", "count.csn_params"],
    )?))
}

fn main() {
    // Cargo's test runner passes libtest flags; only a name filter is honored.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 12] = [
        ("shift-sum equals circulant kernel-5 scale conv", c1),
        ("level-6 routing block identities", c2),
        ("FGU mean spatial weight is one", c3),
        ("fusion blends inside operand envelope", c4),
        ("bottom and top boundary rules bitwise", c5),
        ("FPN one-way vs RevFP two-way influence", c6),
        ("gradient suite", c7),
        ("scale shift costs nothing and beats dense conv", c8),
        ("CSN is residual roundtrip at init", c9),
        ("invariants across shift ratios 1..8", c10),
        ("determinism and FPZ1 round trip", c11),
        ("paper-width parameter totals", c12),
    ];
    let mut failed = 0;
    for (i, (title, run)) in criteria.iter().enumerate() {
        let label = format!("criterion_{:02}", i + 1);
        if filter
            .as_deref()
            .is_some_and(|f| !label.contains(f) && !title.contains(f))
        {
            continue;
        }
        let start = Instant::now();
        let verdict = run().unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e:#}"),
        });
        failed += usize::from(!verdict.pass);
        println!(
            "{} {label} {title} [{:.1}s] {}",
            if verdict.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            verdict.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
