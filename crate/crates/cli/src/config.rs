//! Run configuration: JSON, schema version 1, unknown keys rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use twistor_core::geometry::{DEFAULT_SPHERE_RESOLUTION, DEFAULT_TORUS_RESOLUTION};
use twistor_core::oracle::killing_vectors;
use twistor_core::{FactorSpec, ProductGeometry};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at {field}: {message}")]
    Schema { field: String, message: String },
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Theorem1,
    Identities,
    Proposition2,
    ConformalExample,
}

impl SuiteKind {
    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::Theorem1 => "theorem1",
            SuiteKind::Identities => "identities",
            SuiteKind::Proposition2 => "proposition2",
            SuiteKind::ConformalExample => "conformal_example",
        }
    }

    fn per_degree(self) -> bool {
        matches!(self, SuiteKind::Theorem1 | SuiteKind::Identities)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FactorConfig {
    #[serde(alias = "flat_torus")]
    Torus {
        dim: usize,
        #[serde(default)]
        radii: Option<Vec<f64>>,
        #[serde(default)]
        resolution: Option<Vec<usize>>,
    },
    #[serde(alias = "round_sphere2")]
    Sphere {
        #[serde(default)]
        radius: Option<f64>,
        #[serde(default)]
        resolution: Option<[usize; 2]>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionOverride {
    #[serde(default)]
    pub torus: Option<usize>,
    #[serde(default)]
    pub sphere: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub factors: Vec<FactorConfig>,
    #[serde(default)]
    pub conformal_exponent: Option<String>,
    #[serde(default)]
    pub degrees: Vec<usize>,
    pub suites: Vec<SuiteKind>,
    /// Killing field of the base metric for the conformal example.
    #[serde(default)]
    pub field: Option<String>,
    #[serde(default)]
    pub resolution: Option<ResolutionOverride>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    #[serde(default)]
    pub min_gap: Option<f64>,
    #[serde(default)]
    pub angle_tol: Option<f64>,
    #[serde(default)]
    pub relative_floor: Option<f64>,
    #[serde(default)]
    pub random_forms: Option<usize>,
    #[serde(default)]
    pub mode_cutoff: Option<i64>,
    #[serde(default)]
    pub coarsening: Option<[usize; 2]>,
    #[serde(default)]
    pub refinement: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    pub scenarios: Vec<ScenarioConfig>,
}

/// A validated scenario with its geometry built.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub factors: Vec<FactorSpec>,
    pub conformal_exponent: Option<String>,
    pub degrees: Vec<usize>,
    pub suites: Vec<SuiteKind>,
    pub field: Option<String>,
    pub geometry: Arc<ProductGeometry>,
}

impl FactorConfig {
    fn spec(&self, over: Option<&ResolutionOverride>) -> FactorSpec {
        match self {
            FactorConfig::Torus { dim, radii, resolution } => {
                let radii = radii.clone().unwrap_or_else(|| vec![1.0; *dim]);
                let res = resolution
                    .clone()
                    .unwrap_or_else(|| vec![over.and_then(|o| o.torus).unwrap_or(DEFAULT_TORUS_RESOLUTION); *dim]);
                FactorSpec::torus(&radii, &res)
            }
            FactorConfig::Sphere { radius, resolution } => {
                let [nt, np] = resolution
                    .or_else(|| over.and_then(|o| o.sphere))
                    .unwrap_or(DEFAULT_SPHERE_RESOLUTION);
                FactorSpec::sphere(radius.unwrap_or(1.0), nt, np)
            }
        }
    }

    fn short(&self) -> String {
        match self {
            FactorConfig::Torus { dim, .. } => format!("t{dim}"),
            FactorConfig::Sphere { .. } => "s2".into(),
        }
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        schema(
            if path == "." { "<root>".into() } else { path },
            e.into_inner().to_string(),
        )
    })?;
    if cfg.version != CONFIG_VERSION {
        return Err(schema(
            "version",
            format!("unsupported version {}, expected {CONFIG_VERSION}", cfg.version),
        ));
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

/// Built-in default scenario matrix.
pub fn default_config() -> RunConfig {
    parse_config_str(include_str!("../configs/default.json")).expect("shipped default config is valid")
}

impl RunConfig {
    /// Checks every scenario and builds its geometry.
    pub fn scenarios(&self) -> Result<Vec<Scenario>, ConfigError> {
        if self.scenarios.is_empty() {
            return Err(schema("scenarios", "at least one scenario required"));
        }
        if let Some([num, den]) = self.tolerances.coarsening {
            if num == 0 || den == 0 || num >= den {
                return Err(schema(
                    "tolerances.coarsening",
                    "expected [num, den] with 0 < num < den",
                ));
            }
        }
        if self.tolerances.refinement.is_some_and(|r| r < 2) {
            return Err(schema("tolerances.refinement", "refinement factor must be at least 2"));
        }
        let mut names = BTreeSet::new();
        let mut out = Vec::new();
        for (i, sc) in self.scenarios.iter().enumerate() {
            let at = |f: &str| format!("scenarios[{i}].{f}");
            if sc.factors.is_empty() {
                return Err(schema(at("factors"), "at least one factor required"));
            }
            let factors: Vec<FactorSpec> = sc.factors.iter().map(|f| f.spec(sc.resolution.as_ref())).collect();
            for (j, f) in factors.iter().enumerate() {
                f.validate()
                    .map_err(|e| schema(at(&format!("factors[{j}]")), e.to_string()))?;
            }
            let geometry = ProductGeometry::build(&factors, sc.conformal_exponent.as_deref())
                .map_err(|e| schema(at("conformal_exponent"), e.to_string()))?;
            let n = geometry.total_dim();
            if sc.suites.is_empty() {
                return Err(schema(at("suites"), "at least one suite required"));
            }
            let needs_degrees = sc.suites.iter().any(|s| s.per_degree());
            if needs_degrees && sc.degrees.is_empty() {
                return Err(schema(at("degrees"), "degree list required"));
            }
            for (k, &p) in sc.degrees.iter().enumerate() {
                if p == 0 || p >= n {
                    return Err(schema(
                        at(&format!("degrees[{k}]")),
                        format!("degree {p} outside 1..={}", n - 1),
                    ));
                }
            }
            for (k, s) in sc.suites.iter().enumerate() {
                let field = at(&format!("suites[{k}]"));
                match s {
                    SuiteKind::ConformalExample => {
                        if sc.conformal_exponent.is_none() {
                            return Err(schema(field, "conformal_example needs a conformal_exponent"));
                        }
                        let name = sc
                            .field
                            .as_deref()
                            .ok_or_else(|| schema(at("field"), "conformal_example needs a field"))?;
                        if !killing_vectors(&geometry).iter().any(|f| f.name == name) {
                            return Err(schema(at("field"), format!("unknown Killing field {name:?}")));
                        }
                    }
                    _ => {
                        if factors.len() != 2 {
                            return Err(schema(field, format!("{} needs exactly two factors", s.name())));
                        }
                        if sc.conformal_exponent.is_some() {
                            return Err(schema(
                                field,
                                format!("{} needs the unrescaled product metric", s.name()),
                            ));
                        }
                    }
                }
            }
            let name = sc.name.clone().unwrap_or_else(|| {
                let base = sc.factors.iter().map(FactorConfig::short).collect::<Vec<_>>().join("x");
                if sc.conformal_exponent.is_some() {
                    format!("{base}-conformal")
                } else {
                    base
                }
            });
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(schema(
                    at("name"),
                    format!("name {name:?} must be non-empty [A-Za-z0-9._-]"),
                ));
            }
            if !names.insert(name.clone()) {
                return Err(schema(at("name"), format!("duplicate scenario name {name:?}")));
            }
            out.push(Scenario {
                name,
                factors,
                conformal_exponent: sc.conformal_exponent.clone(),
                degrees: sc.degrees.clone(),
                suites: sc.suites.clone(),
                field: sc.field.clone(),
                geometry,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_valid() {
        let cfg = parse_config_str(
            r#"{"version": 1, "scenarios": [{"factors": [{"kind": "torus", "dim": 2}, {"kind": "torus", "dim": 1}],
                "degrees": [1], "suites": ["identities"]}]}"#,
        )
        .unwrap();
        let sc = cfg.scenarios().unwrap();
        assert_eq!(sc[0].name, "t2xt1");
        assert_eq!(sc[0].factors[0].resolution, vec![DEFAULT_TORUS_RESOLUTION; 2]);
    }

    #[test]
    fn degree_zero_is_a_schema_error() {
        let cfg = parse_config_str(
            r#"{"version": 1, "scenarios": [{"factors": [{"kind": "torus", "dim": 2}, {"kind": "torus", "dim": 1}],
                "degrees": [0], "suites": ["identities"]}]}"#,
        )
        .unwrap();
        match cfg.scenarios() {
            Err(ConfigError::Schema { field, .. }) => assert_eq!(field, "scenarios[0].degrees[0]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_kind_and_keys_are_schema_errors() {
        let e =
            parse_config_str(r#"{"version": 1, "scenarios": [{"factors": [{"kind": "hyperbolic"}], "suites": []}]}"#)
                .unwrap_err();
        match e {
            ConfigError::Schema { field, .. } => assert!(field.starts_with("scenarios[0].factors[0]"), "{field}"),
            other => panic!("{other:?}"),
        }
        let e = parse_config_str(r#"{"version": 1, "scenarios": [], "extra": 3}"#).unwrap_err();
        assert!(matches!(e, ConfigError::Schema { .. }));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        match parse_config_str("{\n  \"version\": 1,\n  oops\n}") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_suite_preconditions() {
        let e = parse_config_str(r#"{"version": 2, "scenarios": []}"#).unwrap_err();
        assert!(matches!(e, ConfigError::Schema { ref field, .. } if field == "version"));
        let cfg = parse_config_str(
            r#"{"version": 1, "scenarios": [{"factors": [{"kind": "sphere"}], "degrees": [1], "suites": ["theorem1"]}]}"#,
        )
        .unwrap();
        assert!(matches!(cfg.scenarios(), Err(ConfigError::Schema { .. })));
        let cfg = parse_config_str(
            r#"{"version": 1, "scenarios": [{"factors": [{"kind": "sphere"}], "conformal_exponent": "0.1*sin(theta)",
                "field": "rotation[1]w", "suites": ["conformal_example"]}]}"#,
        )
        .unwrap();
        assert!(matches!(cfg.scenarios(), Err(ConfigError::Schema { ref field, .. }) if field == "scenarios[0].field"));
    }

    #[test]
    fn shipped_default_matrix() {
        let sc = default_config().scenarios().unwrap();
        let names: Vec<&str> = sc.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["t2xt1", "s2xt1", "s2xt2", "s2-conformal"]);
        assert_eq!(sc[2].degrees, [1, 2, 3]);
    }
}
