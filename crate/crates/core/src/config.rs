//! Run configuration: one TOML file with market, driver, problem, numerics
//! and output blocks, plus dotted-key command-line overrides. Every
//! module-level invariant is re-validated on load through the module
//! constructors, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deviation::RepresentingPair;
use crate::drivers::{Driver, DriverKind, JumpPayoff};
use crate::equilibrium::FixedPointOptions;
use crate::jumps::{JumpAtom, LevyMeasure};
use crate::market::{MarketModel, Policy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override '{0}': expected dotted.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<crate::Error> for ConfigError {
    fn from(e: crate::Error) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketSection,
    pub driver: DriverSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicySection>,
    #[serde(default)]
    pub grid_deviation: GridDeviationSection,
}

/// Market block: rates, drifts, volatility and jump-sensitivity matrices,
/// and the jump atoms serialized as rows `(y_1, ..., y_k, rate)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub rate: f64,
    pub drift: Vec<f64>,
    pub volatility: Vec<Vec<f64>>,
    pub jump_sensitivity: Vec<Vec<f64>>,
    #[serde(default)]
    pub atoms: Vec<Vec<f64>>,
}

/// Driver block: `kind` is one of `scaled_split_norm` (parameters c, d),
/// `scaled_joint_norm` (parameter scale) or `cvar_jump` (parameter
/// tail_mass); parameters not belonging to the kind are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_mass: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub gamma: f64,
    pub horizon: f64,
    pub x0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSection {
    /// Uniform grid cells for the fixed point and residual tables.
    pub grid_size: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Monte Carlo samples per jump-bearing cell of the grid deviation.
    pub mc_samples: usize,
    /// Worker threads; `MEANDEV_WORKERS` overrides, default all cores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for NumericsSection {
    fn default() -> Self {
        Self {
            grid_size: 4096,
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
            n_paths: 100_000,
            seed: 42,
            mc_samples: 20_000,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

/// Representing pair for the deviation subcommands: a strictly increasing
/// grid from 0, one diffusion row per cell and one jump-payoff row per cell
/// (one value per atom).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSection {
    pub grid: Vec<f64>,
    pub diffusion: Vec<Vec<f64>>,
    pub jump: Vec<Vec<f64>>,
}

/// Optional explicit policy for `simulate`/`validate`; when absent the
/// equilibrium policy is used.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub grid: Vec<f64>,
    pub allocations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridDeviationSection {
    pub alpha: f64,
    pub levels: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
}

impl Default for GridDeviationSection {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            levels: vec![2, 4, 6, 8, 10],
            mc_samples: None,
        }
    }
}

impl RunConfig {
    /// Parses the file, applies `key.path=value` overrides, and
    /// deserializes with unknown keys rejected. Syntax errors carry the
    /// toml parser's line anchor.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for raw in overrides {
            apply_override(&mut table, raw)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn build_measure(&self) -> Result<LevyMeasure, ConfigError> {
        let m = &self.market;
        if m.jump_sensitivity.is_empty() {
            return Err(ConfigError::Invalid(
                "market.jump_sensitivity needs one row per asset".into(),
            ));
        }
        let k = m.jump_sensitivity[0].len();
        let mut atoms = Vec::with_capacity(m.atoms.len());
        for (i, row) in m.atoms.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(ConfigError::Invalid(format!(
                    "atom row {i} must have {k} coordinates plus a rate, got {} entries",
                    row.len()
                )));
            }
            atoms.push(JumpAtom::new(row[..k].to_vec(), row[k]));
        }
        Ok(LevyMeasure::new(k, atoms)?)
    }

    pub fn build_model(&self) -> Result<MarketModel, ConfigError> {
        let measure = self.build_measure()?;
        Ok(MarketModel::new(
            self.market.rate,
            self.market.drift.clone(),
            self.market.volatility.clone(),
            self.market.jump_sensitivity.clone(),
            measure,
        )?)
    }

    pub fn build_driver(&self, measure: &LevyMeasure) -> Result<Driver, ConfigError> {
        let d = &self.driver;
        let reject = |unused: &[(&str, &Option<f64>)]| -> Result<(), ConfigError> {
            for (name, value) in unused {
                if value.is_some() {
                    return Err(ConfigError::Invalid(format!(
                        "driver parameter '{name}' does not apply to kind '{}'",
                        d.kind
                    )));
                }
            }
            Ok(())
        };
        let need = |name: &str, value: &Option<f64>| -> Result<f64, ConfigError> {
            value.ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "driver kind '{}' needs parameter '{name}'",
                    d.kind
                ))
            })
        };
        let kind = match d.kind.as_str() {
            "scaled_split_norm" => {
                reject(&[("scale", &d.scale), ("tail_mass", &d.tail_mass)])?;
                DriverKind::ScaledSplitNorm {
                    c: need("c", &d.c)?,
                    d: need("d", &d.d)?,
                }
            }
            "scaled_joint_norm" => {
                reject(&[("c", &d.c), ("d", &d.d), ("tail_mass", &d.tail_mass)])?;
                DriverKind::ScaledJointNorm {
                    scale: need("scale", &d.scale)?,
                }
            }
            "cvar_jump" => {
                reject(&[("c", &d.c), ("d", &d.d), ("scale", &d.scale)])?;
                DriverKind::CvarJump {
                    tail_mass: need("tail_mass", &d.tail_mass)?,
                }
            }
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown driver kind '{other}' (expected scaled_split_norm, \
                     scaled_joint_norm or cvar_jump)"
                )))
            }
        };
        Ok(Driver::new(kind, measure.clone())?)
    }

    pub fn build_pair(&self) -> Result<Option<RepresentingPair>, ConfigError> {
        let Some(section) = &self.pair else {
            return Ok(None);
        };
        let jump = section
            .jump
            .iter()
            .map(|row| JumpPayoff::new(row.clone()))
            .collect();
        Ok(Some(RepresentingPair::new(
            section.grid.clone(),
            section.diffusion.clone(),
            jump,
        )?))
    }

    pub fn build_policy(&self) -> Result<Option<Policy>, ConfigError> {
        let Some(section) = &self.policy else {
            return Ok(None);
        };
        let policy = Policy::new(section.grid.clone(), section.allocations.clone())?;
        if (policy.horizon() - self.problem.horizon).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "policy horizon {} must equal problem.horizon {}",
                policy.horizon(),
                self.problem.horizon
            )));
        }
        Ok(Some(policy))
    }

    pub fn fixed_point_options(&self) -> FixedPointOptions {
        FixedPointOptions {
            grid_cells: self.numerics.grid_size,
            tol: self.numerics.tol,
            max_iter: self.numerics.max_iter,
            damping: self.numerics.damping,
        }
    }

    pub fn validate_problem(&self) -> Result<(), ConfigError> {
        let p = &self.problem;
        if !(p.gamma.is_finite() && p.gamma > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "problem.gamma must be > 0, got {}",
                p.gamma
            )));
        }
        if !(p.horizon.is_finite() && p.horizon > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "problem.horizon must be > 0, got {}",
                p.horizon
            )));
        }
        if !(p.x0.is_finite() && p.x0 > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "problem.x0 must be > 0, got {}",
                p.x0
            )));
        }
        let g = &self.grid_deviation;
        if !(g.alpha > 0.0 && g.alpha < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "grid_deviation.alpha must lie in (0, 1), got {}",
                g.alpha
            )));
        }
        if g.levels.is_empty() || g.levels.iter().any(|l| *l < 1 || *l > 24) {
            return Err(ConfigError::Invalid(
                "grid_deviation.levels must be nonempty with entries in 1..=24".into(),
            ));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, raw: &str) -> Result<(), ConfigError> {
    let Some((key, value)) = raw.split_once('=') else {
        return Err(ConfigError::BadOverride(raw.to_string()));
    };
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(raw.to_string()));
    }
    let parsed = parse_override_value(value.trim());
    let segments: Vec<&str> = key.split('.').collect();
    let mut current = table;
    for segment in &segments[..segments.len() - 1] {
        let entry = current
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => current = t,
            _ => {
                return Err(ConfigError::BadOverride(format!(
                    "{raw} (segment '{segment}' is not a table)"
                )))
            }
        }
    }
    current.insert(segments.last().unwrap().to_string(), parsed);
    Ok(())
}

/// Values parse as TOML literals (numbers, booleans, arrays); anything that
/// does not parse is taken as a string.
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = wrapped.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[market]
rate = 0.02
drift = [0.08]
volatility = [[0.2]]
jump_sensitivity = [[0.3]]
atoms = [[0.1, 2.0]]

[driver]
kind = "scaled_joint_norm"
scale = 1.0

[problem]
gamma = 0.1
horizon = 40.0
x0 = 1.0
"#;

    fn write_temp(text: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_and_builds_the_base_config() {
        let f = write_temp(BASE);
        let config = RunConfig::load(f.path(), &[]).unwrap();
        config.validate_problem().unwrap();
        let model = config.build_model().unwrap();
        assert_eq!(model.n_assets(), 1);
        assert_eq!(model.measure().len(), 1);
        let driver = config.build_driver(model.measure()).unwrap();
        assert!(driver.is_positive());
        assert_eq!(config.numerics.grid_size, 4096);
        assert_eq!(config.numerics.seed, 42);
        assert_eq!(config.numerics.damping, 0.5);
        assert_eq!(config.numerics.tol, 1e-10);
        assert_eq!(config.numerics.n_paths, 100_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write_temp(&format!("{BASE}\n[numerics]\nbogus = 1\n"));
        assert!(matches!(
            RunConfig::load(f.path(), &[]),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn syntax_errors_carry_line_anchors() {
        let f = write_temp("[market\nrate = 0.02\n");
        let err = RunConfig::load(f.path(), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn overrides_apply_with_dotted_keys() {
        let f = write_temp(BASE);
        let config = RunConfig::load(
            f.path(),
            &[
                "numerics.seed=7".to_string(),
                "problem.gamma=0.5".to_string(),
                "driver.scale=2.0".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.numerics.seed, 7);
        assert_eq!(config.problem.gamma, 0.5);
        assert_eq!(config.driver.scale, Some(2.0));
    }

    #[test]
    fn bad_overrides_are_reported() {
        let f = write_temp(BASE);
        assert!(matches!(
            RunConfig::load(f.path(), &["numerics.seed".to_string()]),
            Err(ConfigError::BadOverride(_))
        ));
        // overriding with the wrong type still fails at deserialization
        assert!(RunConfig::load(f.path(), &["numerics.seed=hello".to_string()]).is_err());
    }

    #[test]
    fn driver_parameters_must_match_kind() {
        let f = write_temp(BASE);
        let config = RunConfig::load(f.path(), &["driver.c=1.0".to_string()]).unwrap();
        let measure = config.build_measure().unwrap();
        assert!(config.build_driver(&measure).is_err());

        let config = RunConfig::load(f.path(), &["driver.kind=\"cvar_jump\"".to_string()]).unwrap();
        let measure = config.build_measure().unwrap();
        // missing tail_mass (scale is still set)
        assert!(config.build_driver(&measure).is_err());
    }

    #[test]
    fn atom_rows_must_match_jump_dimension() {
        let f = write_temp(&BASE.replace("atoms = [[0.1, 2.0]]", "atoms = [[0.1, 0.2, 2.0]]"));
        let config = RunConfig::load(f.path(), &[]).unwrap();
        assert!(config.build_measure().is_err());
    }

    #[test]
    fn pair_section_builds_a_representing_pair() {
        let text = format!(
            "{BASE}\n[pair]\ngrid = [0.0, 1.0]\ndiffusion = [[0.2]]\njump = [[0.0]]\n"
        );
        let f = write_temp(&text);
        let config = RunConfig::load(f.path(), &[]).unwrap();
        let pair = config.build_pair().unwrap().unwrap();
        assert_eq!(pair.num_cells(), 1);
        assert_eq!(pair.horizon(), 1.0);
    }
}
