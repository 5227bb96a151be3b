//! Executes validated scenarios and writes reports.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use twistor_core::fixtures::OracleFixture;
use twistor_core::kernels::{KernelError, KernelReport};
use twistor_core::suites::{
    run_conformal_example, run_identities, run_proposition2, run_theorem1, SuiteError, SuiteOptions, SuiteReport,
};
use twistor_core::FactorSpec;

use crate::config::{RunConfig, Scenario, SuiteKind};

pub const REPORT_SCHEMA: &str = "twistor-suite-report/1";
pub const DEFAULT_SEED: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Passed,
    Failed,
    Rejected,
    AmbiguousRank,
    SolverFailure,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Passed => "pass",
            Verdict::Failed => "FAIL",
            Verdict::Rejected => "rejected",
            Verdict::AmbiguousRank => "ambiguous-rank",
            Verdict::SolverFailure => "solver-failure",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    CheckFailure = 1,
    Numerical = 2,
    Config = 3,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, Serialize)]
pub struct RunErrorRecord {
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRun {
    pub degree: Option<usize>,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<SuiteReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<RunErrorRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptionsEcho {
    pub seed: u64,
    pub min_gap: f64,
    pub angle_tol: f64,
    pub relative_floor: f64,
    pub dense_limit: usize,
    pub coarsening: (usize, usize),
    pub refinement: usize,
    pub random_forms: usize,
    pub mode_cutoff: i64,
    pub fixtures: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteDocument {
    pub schema: String,
    pub suite: String,
    pub scenario: String,
    pub geometry: String,
    pub factors: Vec<FactorSpec>,
    pub conformal_exponent: Option<String>,
    pub options: OptionsEcho,
    pub passed: bool,
    pub runs: Vec<SuiteRun>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub suite: String,
    pub scenario: String,
    pub geometry: String,
    pub p: String,
    pub dims: String,
    pub verdict: String,
    pub failed_checks: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub rows: Vec<SummaryRow>,
    pub documents: Vec<PathBuf>,
    pub status: ExitStatus,
}

pub struct Runner {
    pub out: PathBuf,
    pub seed: u64,
    pub options: SuiteOptions,
}

impl Runner {
    pub fn new(cfg: &RunConfig, out: PathBuf, seed: Option<u64>, fixtures: Vec<OracleFixture>) -> Self {
        let t = &cfg.tolerances;
        let d = SuiteOptions::default();
        let options = SuiteOptions {
            fixtures,
            min_gap: t.min_gap.unwrap_or(d.min_gap),
            angle_tol: t.angle_tol.unwrap_or(d.angle_tol),
            relative_floor: t.relative_floor.unwrap_or(d.relative_floor),
            random_forms: t.random_forms.unwrap_or(d.random_forms),
            mode_cutoff: t.mode_cutoff.unwrap_or(d.mode_cutoff),
            coarsening: t.coarsening.map_or(d.coarsening, |[a, b]| (a, b)),
            refinement: t.refinement.unwrap_or(d.refinement),
            dense_limit: d.dense_limit,
        };
        Runner {
            out,
            seed: seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
            options,
        }
    }

    fn echo(&self) -> OptionsEcho {
        let o = &self.options;
        OptionsEcho {
            seed: self.seed,
            min_gap: o.min_gap,
            angle_tol: o.angle_tol,
            relative_floor: o.relative_floor,
            dense_limit: o.dense_limit,
            coarsening: o.coarsening,
            refinement: o.refinement,
            random_forms: o.random_forms,
            mode_cutoff: o.mode_cutoff,
            fixtures: o.fixtures.iter().map(|f| f.name.clone()).collect(),
        }
    }

    fn run_one(&self, sc: &Scenario, suite: SuiteKind, p: Option<usize>) -> Result<SuiteReport, SuiteError> {
        let g = &sc.geometry;
        let o = &self.options;
        let mut r = match suite {
            SuiteKind::Theorem1 => run_theorem1(g, p.expect("degree"), o)?,
            SuiteKind::Identities => run_identities(g, p.expect("degree"), self.seed, o)?,
            SuiteKind::Proposition2 => run_proposition2(g, o)?,
            SuiteKind::ConformalExample => run_conformal_example(g, sc.field.as_deref().unwrap_or_default(), o)?,
        };
        r.scenario = sc.name.clone();
        Ok(r)
    }

    /// Runs every scenario, writes `<suite>-<scenario>.json`, the summary
    /// CSV and the timings CSV.
    pub fn run(&self, scenarios: &[Scenario], mut progress: impl FnMut(&SummaryRow)) -> Result<RunOutcome, RunError> {
        fs::create_dir_all(&self.out).map_err(|source| RunError::Io {
            path: self.out.clone(),
            source,
        })?;
        let mut rows = Vec::new();
        let mut documents = Vec::new();
        let mut timings = Vec::new();
        let mut worst = ExitStatus::Success;
        for sc in scenarios {
            for &suite in &sc.suites {
                let degrees: Vec<Option<usize>> = match suite {
                    SuiteKind::Theorem1 | SuiteKind::Identities => sc.degrees.iter().map(|&p| Some(p)).collect(),
                    _ => vec![None],
                };
                let mut runs = Vec::new();
                for p in degrees {
                    let run = match self.run_one(sc, suite, p) {
                        Ok(report) => {
                            for (stage, secs) in &report.timings {
                                timings.push((suite.name(), sc.name.clone(), p, stage.clone(), *secs));
                            }
                            SuiteRun {
                                degree: p,
                                verdict: if report.passed {
                                    Verdict::Passed
                                } else {
                                    Verdict::Failed
                                },
                                report: Some(report),
                                error: None,
                            }
                        }
                        Err(e) => error_run(p, e),
                    };
                    worst = escalate(worst, run.verdict);
                    let row = summary_row(suite, sc, &run);
                    progress(&row);
                    rows.push(row);
                    runs.push(run);
                }
                let doc = SuiteDocument {
                    schema: REPORT_SCHEMA.into(),
                    suite: suite.name().into(),
                    scenario: sc.name.clone(),
                    geometry: sc.geometry.describe(),
                    factors: sc.factors.clone(),
                    conformal_exponent: sc.conformal_exponent.clone(),
                    options: self.echo(),
                    passed: runs.iter().all(|r| r.verdict == Verdict::Passed),
                    runs,
                };
                let path = self.out.join(format!("{}-{}.json", suite.name(), sc.name));
                write_json(&path, &doc)?;
                documents.push(path);
            }
        }
        write_summary(&self.out.join("summary.csv"), &rows)?;
        let mut w = csv::Writer::from_path(self.out.join("timings.csv"))?;
        w.write_record(["suite", "scenario", "p", "stage", "seconds"])?;
        for (suite, scenario, p, stage, secs) in timings {
            w.write_record([
                suite.to_string(),
                scenario,
                p.map_or(String::new(), |p| p.to_string()),
                stage,
                format!("{secs:.3}"),
            ])?;
        }
        w.flush().map_err(|source| RunError::Io {
            path: self.out.join("timings.csv"),
            source,
        })?;
        Ok(RunOutcome {
            rows,
            documents,
            status: worst,
        })
    }
}

fn error_run(p: Option<usize>, e: SuiteError) -> SuiteRun {
    let (verdict, kernel) = match &e {
        SuiteError::Kernel(KernelError::AmbiguousRank(rep)) => (Verdict::AmbiguousRank, Some((**rep).clone())),
        SuiteError::Kernel(KernelError::SolverFailure(_)) => (Verdict::SolverFailure, None),
        _ => (Verdict::Rejected, None),
    };
    let kind = match &e {
        SuiteError::Precondition(_) => "precondition",
        SuiteError::DegenerateChoice { .. } => "degenerate_choice",
        SuiteError::Kernel(KernelError::AmbiguousRank(_)) => "ambiguous_rank",
        SuiteError::Kernel(KernelError::SolverFailure(_)) => "solver_failure",
        _ => "internal",
    };
    SuiteRun {
        degree: p,
        verdict,
        report: None,
        error: Some(RunErrorRecord {
            kind: kind.into(),
            message: e.to_string(),
            kernel,
        }),
    }
}

/// Exit precedence: numerical trouble, then rejected input, then failed
/// checks.
fn escalate(current: ExitStatus, v: Verdict) -> ExitStatus {
    let rank = |s: ExitStatus| match s {
        ExitStatus::Success => 0,
        ExitStatus::CheckFailure => 1,
        ExitStatus::Config => 2,
        ExitStatus::Numerical => 3,
    };
    let next = match v {
        Verdict::Passed => ExitStatus::Success,
        Verdict::Failed => ExitStatus::CheckFailure,
        Verdict::Rejected => ExitStatus::Config,
        Verdict::AmbiguousRank | Verdict::SolverFailure => ExitStatus::Numerical,
    };
    if rank(next) > rank(current) {
        next
    } else {
        current
    }
}

fn summary_row(suite: SuiteKind, sc: &Scenario, run: &SuiteRun) -> SummaryRow {
    let (dims, failed) = match &run.report {
        Some(r) => (
            r.dimensions
                .iter()
                .filter(|(k, _)| !k.contains(':') && *k != "kernel_elements_checked")
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";"),
            r.failures().count(),
        ),
        None => (String::new(), 0),
    };
    SummaryRow {
        suite: suite.name().into(),
        scenario: sc.name.clone(),
        geometry: sc.geometry.describe(),
        p: run.degree.map_or(String::new(), |p| p.to_string()),
        dims,
        verdict: run.verdict.label().into(),
        failed_checks: failed,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let io = |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io(e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(io)
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Plain-text summary table.
pub fn render_table(rows: &[SummaryRow], mut out: impl Write) -> io::Result<()> {
    let header = ["suite", "scenario", "p", "verdict", "failed", "dims"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.suite.clone(),
                r.scenario.clone(),
                r.p.clone(),
                r.verdict.clone(),
                r.failed_checks.to_string(),
                r.dims.clone(),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cols: &[String]| {
        cols.iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    writeln!(out, "{}", line(&header.map(String::from)))?;
    writeln!(
        out,
        "{}",
        width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")
    )?;
    for row in &cells {
        writeln!(out, "{}", line(row))?;
    }
    Ok(())
}
