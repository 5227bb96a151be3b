//! Loader for externally produced oracle fixtures.
//!
//! A fixture is a JSON document (schema version 1):
//!
//! ```json
//! {
//!   "version": 1,
//!   "name": "s2-rotations",
//!   "manifold": { "factors": [ ... ], "conformal_exponent": null },
//!   "kind": "killing_1form",
//!   "expressions": ["..."],
//!   "dimension": 3,
//!   "derivation": "symbolic",
//!   "tables": ["rotation-x.csv", "rotation-y.csv", "rotation-z.csv"],
//!   "mode_table": null
//! }
//! ```
//!
//! `tables` are paths relative to the fixture file, in the forms exchange
//! format (`.bin` for binary, anything else CSV). A `mode_table` fixture
//! carries a [`ModeTable`] instead of tables.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exchange::{read_binary, read_csv, ExchangeError};
use crate::forms::{DiscreteForm, VectorField};
use crate::geometry::{FactorSpec, ProductGeometry};
use crate::modes::{torus_mode_kernel, ModeError, ModeTable};
use crate::operators::{
    assemble_conformal_killing_vec, assemble_killing_residual, assemble_parallel_residual, OperatorError,
};
use crate::oracle::CalibrationSample;

pub const FIXTURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: unsupported fixture version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: {source}")]
    Table { path: PathBuf, source: ExchangeError },
    #[error("fixture {name}: declares dimension {declared} but ships {tables} table(s)")]
    DimensionMismatch {
        name: String,
        declared: usize,
        tables: usize,
    },
    #[error("fixture {0}: mode_table kind without a table")]
    MissingModeTable(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Mode(#[from] ModeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    #[serde(rename = "killing_1form")]
    Killing1form,
    ConformalField,
    ParallelForm,
    AreaForm,
    ModeTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldDescriptor {
    pub factors: Vec<FactorSpec>,
    #[serde(default)]
    pub conformal_exponent: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFixture {
    pub version: u32,
    pub name: String,
    pub manifold: ManifoldDescriptor,
    pub kind: FixtureKind,
    #[serde(default)]
    pub expressions: Vec<String>,
    pub dimension: usize,
    #[serde(default)]
    pub derivation: Option<String>,
    #[serde(default)]
    pub tables: Vec<String>,
    #[serde(default)]
    pub mode_table: Option<ModeTable>,
    #[serde(skip)]
    pub source: PathBuf,
}

impl OracleFixture {
    pub fn from_path(path: &Path) -> Result<Self, FixtureError> {
        let text = fs::read_to_string(path).map_err(|source| FixtureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut fx: OracleFixture = serde_json::from_str(&text).map_err(|source| FixtureError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if fx.version != FIXTURE_VERSION {
            return Err(FixtureError::Version {
                path: path.to_path_buf(),
                version: fx.version,
            });
        }
        if fx.kind != FixtureKind::ModeTable && fx.tables.len() != fx.dimension {
            return Err(FixtureError::DimensionMismatch {
                name: fx.name,
                declared: fx.dimension,
                tables: fx.tables.len(),
            });
        }
        fx.source = path.to_path_buf();
        Ok(fx)
    }

    /// Whether the sampled tables live on this geometry's grid.
    pub fn matches(&self, g: &ProductGeometry) -> bool {
        self.manifold.factors == g.factor_specs() && self.manifold.conformal_exponent.as_deref() == g.conformal_source()
    }

    pub fn forms(&self, g: &Arc<ProductGeometry>) -> Result<Vec<DiscreteForm>, FixtureError> {
        let base = self.source.parent().unwrap_or(Path::new("."));
        self.tables
            .iter()
            .map(|t| {
                let path = base.join(t);
                let table = |source| FixtureError::Table {
                    path: path.clone(),
                    source,
                };
                let file = fs::File::open(&path).map_err(|e| table(e.into()))?;
                let reader = BufReader::new(file);
                if path.extension().is_some_and(|e| e == "bin") {
                    read_binary(g, reader).map_err(table)
                } else {
                    read_csv(g, reader).map_err(table)
                }
            })
            .collect()
    }

    /// Entry-for-entry comparison with [`torus_mode_kernel`].
    pub fn mode_table_agrees(&self) -> Result<bool, FixtureError> {
        let table = self
            .mode_table
            .as_ref()
            .ok_or_else(|| FixtureError::MissingModeTable(self.name.clone()))?;
        let ours = torus_mode_kernel(&self.manifold.factors, table.operator, table.degree, table.cutoff)?;
        Ok(ours.modes == table.modes && ours.total == table.total && ours.total == self.dimension)
    }
}

/// Every `*.json` fixture in `dir`, sorted by file name.
pub fn load_fixtures(dir: &Path) -> Result<Vec<OracleFixture>, FixtureError> {
    let io = |source| FixtureError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths.iter().map(|p| OracleFixture::from_path(p)).collect()
}

/// Calibration samples from the fixtures sampled on `g`.
pub fn fixture_samples(
    fixtures: &[OracleFixture],
    g: &Arc<ProductGeometry>,
) -> Result<Vec<CalibrationSample>, FixtureError> {
    let mut out = Vec::new();
    for fx in fixtures.iter().filter(|f| f.matches(g)) {
        if fx.kind == FixtureKind::ModeTable {
            continue;
        }
        for (i, form) in fx.forms(g)?.into_iter().enumerate() {
            let norm = form.norm();
            let (operator, residual) = match fx.kind {
                FixtureKind::Killing1form => {
                    let op = assemble_killing_residual(g, 1)?;
                    (op.name().to_string(), op.residual_norm(&form)?)
                }
                FixtureKind::ConformalField => {
                    let op = assemble_conformal_killing_vec(g);
                    let v =
                        VectorField::from_components(g, form.coefficients().to_vec()).map_err(OperatorError::from)?;
                    (op.name().to_string(), op.field_residual_norm(&v)?)
                }
                FixtureKind::ParallelForm | FixtureKind::AreaForm => {
                    let op = assemble_parallel_residual(g, form.degree())?;
                    (op.name().to_string(), op.residual_norm(&form)?)
                }
                FixtureKind::ModeTable => unreachable!(),
            };
            out.push(CalibrationSample {
                field: format!("{}[{i}]", fx.name),
                operator,
                relative_residual: if norm > 0.0 { residual / norm } else { 0.0 },
            });
        }
    }
    Ok(out)
}
