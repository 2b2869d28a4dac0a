//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rcnet_core::fixtures::{self, synth_backbone};
use rcnet_core::rcnet::{self, InitMode, Model};
use rcnet_core::{FeaturePyramid, NeckConfig};

use crate::bench::MIN_REPS;
use crate::checks::{self, Ctx, Outcome, Suite};
use crate::report::RunReport;

#[derive(Debug, Parser)]
#[command(
    name = "rcnet",
    version,
    about = "RevFP + CSN neck: fixtures, forward passes and verification suites"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// NeckConfig as JSON; defaults to the desk configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Write the report here instead of standard output.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// d = 256 and full backbone stage widths.
    #[arg(long, global = true)]
    pub paper_width: bool,

    /// Run only these checks (comma separated).
    #[arg(long, global = true, value_delimiter = ',', value_name = "NAMES")]
    pub checks: Option<Vec<String>>,

    /// Timed repetitions for bench-shift.
    #[arg(long, global = true, default_value_t = 100)]
    pub reps: usize,

    /// FPZ1 file: written by gen-fixtures, read by forward.
    #[arg(long, global = true, value_name = "PATH")]
    pub fixture: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic backbone pyramid as FPZ1.
    GenFixtures,
    /// Run one neck on the backbone pyramid and digest its outputs.
    Forward {
        #[arg(value_parser = parse_model)]
        model: Model,
    },
    /// Finite-difference gradient checks.
    GradCheck,
    /// Oracle, structural and information-flow checks.
    Invariants,
    /// Parameter and multiply-accumulate accounting.
    Count,
    /// Time the scale shift against a dense circulant scale convolution.
    BenchShift,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenFixtures => "gen-fixtures",
            Command::Forward { .. } => "forward",
            Command::GradCheck => "grad-check",
            Command::Invariants => "invariants",
            Command::Count => "count",
            Command::BenchShift => "bench-shift",
        }
    }
}

fn parse_model(s: &str) -> Result<Model, String> {
    s.parse().map_err(|e: rcnet_core::Error| e.to_string())
}

pub const DEFAULT_FIXTURE: &str = "backbone.fpz";

/// Exit codes: 0 all checks passed, 1 a check failed, 2 usage or setup error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli).and_then(|r| emit(&cli, &r).map(|_| r)) {
        Ok(report) if report.all_pass => 0,
        Ok(report) => {
            for (name, o) in report.checks.iter().filter(|(_, o)| !o.pass) {
                eprintln!(
                    "FAIL {name}: measured {} (tolerance {})",
                    o.measured, o.tolerance
                );
            }
            1
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<NeckConfig> {
    let mut cfg = match &cli.config {
        Some(p) => NeckConfig::from_json_file(p)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => NeckConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.paper_width {
        cfg = cfg.with_paper_width();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<RunReport> {
    let cfg = load_config(cli)?;
    let start = Instant::now();
    let mut report = RunReport::new(cli.command.name(), cfg.clone());
    let only = cli.checks.as_deref();
    match &cli.command {
        Command::GenFixtures => gen_fixtures(cli, &cfg, only, &mut report)?,
        Command::Forward { model } => forward(cli, *model, &cfg, only, &mut report)?,
        Command::GradCheck => {
            suite(Suite::GradCheck, cli, &cfg, &mut report)?;
        }
        Command::Invariants => {
            suite(Suite::Invariants, cli, &cfg, &mut report)?;
        }
        Command::Count => {
            let ctx = suite(Suite::Count, cli, &cfg, &mut report)?;
            report.counts = ctx.count_result().cloned();
        }
        Command::BenchShift => {
            ensure!(
                cli.reps >= MIN_REPS,
                "--reps must be at least {MIN_REPS}, got {}",
                cli.reps
            );
            let ctx = suite(Suite::Bench, cli, &cfg, &mut report)?;
            report.bench = ctx.bench_result().cloned();
        }
    }
    report
        .timings_ns
        .insert("total".into(), start.elapsed().as_nanos() as u64);
    Ok(report)
}

fn suite(suite: Suite, cli: &Cli, cfg: &NeckConfig, report: &mut RunReport) -> Result<Ctx> {
    let selected = checks::select(suite, cli.checks.as_deref())?;
    let ctx = Ctx::new(cfg.clone(), cli.reps);
    for ran in checks::run(&selected, &ctx) {
        report.record(ran.name, ran.outcome, Some(ran.nanos));
    }
    Ok(ctx)
}

/// Records inline checks, honoring `--checks`.
fn record_inline(
    report: &mut RunReport,
    only: Option<&[String]>,
    results: Vec<(&str, Outcome)>,
) -> Result<()> {
    if let Some(only) = only {
        for name in only {
            if !results.iter().any(|(n, _)| n == name) {
                let known: Vec<&str> = results.iter().map(|(n, _)| *n).collect();
                bail!("unknown check {name:?}; available: {}", known.join(", "));
            }
        }
    }
    for (name, o) in results {
        if only.is_none_or(|only| only.iter().any(|n| n == name)) {
            report.record(name, o, None);
        }
    }
    Ok(())
}

fn gen_fixtures(
    cli: &Cli,
    cfg: &NeckConfig,
    only: Option<&[String]>,
    report: &mut RunReport,
) -> Result<()> {
    let path = cli
        .fixture
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_FIXTURE));
    let pyr = synth_backbone(cfg)?;
    fixtures::save_pyramid(&path, &pyr, Some(cfg))
        .with_context(|| format!("writing {}", path.display()))?;
    let back = fixtures::load_pyramid(&path)
        .with_context(|| format!("reading back {}", path.display()))?;
    report.digest_pyramid("", &pyr);
    let shapes = back
        .check_shapes(cfg, cfg.backbone_levels(), |l| cfg.input_channels(l))
        .is_ok();
    record_inline(
        report,
        only,
        vec![
            (
                "fixtures.round_trip",
                Outcome::violations(usize::from(!back.bit_eq(&pyr))),
            ),
            ("fixtures.shapes", Outcome::violations(usize::from(!shapes))),
        ],
    )
}

fn load_backbone(path: Option<&Path>, cfg: &NeckConfig) -> Result<FeaturePyramid> {
    match path {
        Some(p) => Ok(fixtures::load_pyramid(p)
            .with_context(|| format!("reading fixture {}", p.display()))?),
        None => Ok(synth_backbone(cfg)?),
    }
}

fn forward(
    cli: &Cli,
    model: Model,
    cfg: &NeckConfig,
    only: Option<&[String]>,
    report: &mut RunReport,
) -> Result<()> {
    let backbone = load_backbone(cli.fixture.as_deref(), cfg)?;
    let store = rcnet::init_params(model, cfg, InitMode::Default);
    let start = Instant::now();
    let out = rcnet::forward(model, &backbone, &store, cfg)?;
    report.timings_ns.insert(
        format!("forward.{model}"),
        start.elapsed().as_nanos() as u64,
    );
    report.digest_pyramid("", &out);
    let shapes = out
        .check_shapes(cfg, cfg.levels(), |_| cfg.channels)
        .is_ok();
    let non_finite = out.iter().filter(|(_, t)| !t.all_finite()).count();
    record_inline(
        report,
        only,
        vec![
            ("forward.shapes", Outcome::violations(usize::from(!shapes))),
            ("forward.finite", Outcome::violations(non_finite)),
        ],
    )
}

fn emit(cli: &Cli, report: &RunReport) -> Result<()> {
    let json = report.to_json();
    match &cli.out {
        Some(p) => std::fs::write(p, json + "\n")
            .with_context(|| format!("writing report {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}
