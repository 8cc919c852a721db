//! Scenario files: TOML with unknown keys rejected.
//!
//! Weight matrices may be written as a diagonal list or as a full row-major
//! matrix. A robot parameter set can be given inline (`[robot]`) or by path
//! (`robot_file`, relative to the scenario file).

use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix6, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::LqrWeights;
use crate::model::RobotParams;
use crate::sim::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl WeightSpec {
    pub fn to_matrix<const N: usize>(&self, name: &'static str) -> Result<SMatrix<f64, N, N>> {
        let bad = |reason: String| Error::InvalidParameter { name, reason };
        match self {
            WeightSpec::Diagonal(d) => {
                if d.len() != N {
                    return Err(bad(format!("expected {N} diagonal entries, got {}", d.len())));
                }
                Ok(SMatrix::from_diagonal(&nalgebra::SVector::<f64, N>::from_column_slice(d)))
            }
            WeightSpec::Full(rows) => {
                if rows.len() != N || rows.iter().any(|r| r.len() != N) {
                    return Err(bad(format!("expected a {N}x{N} matrix")));
                }
                Ok(SMatrix::from_fn(|i, j| rows[i][j]))
            }
        }
    }

    fn diagonal_of<const N: usize>(m: &SMatrix<f64, N, N>) -> Self {
        WeightSpec::Diagonal(m.diagonal().iter().copied().collect())
    }
}

/// LQR weights as written in a scenario file. Both keys are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub q: WeightSpec,
    pub r: WeightSpec,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let w = LqrWeights::default();
        Self { q: WeightSpec::diagonal_of(&w.q), r: WeightSpec::diagonal_of(&w.r) }
    }
}

impl WeightsConfig {
    pub fn to_weights(&self) -> Result<LqrWeights> {
        let q: Matrix6<f64> = self.q.to_matrix("q")?;
        let r: Matrix2<f64> = self.r.to_matrix("r")?;
        let w = LqrWeights { q, r };
        w.validate()?;
        Ok(w)
    }
}

fn toml_error(path: Option<&Path>, e: toml::de::Error) -> Error {
    match path {
        Some(p) => Error::Config(format!("{}: {e}", p.display())),
        None => Error::Config(e.to_string()),
    }
}

/// Parses a scenario. `base` resolves a relative `robot_file`.
pub fn parse_scenario(text: &str, base: Option<&Path>) -> Result<Scenario> {
    let mut scn: Scenario = toml::from_str(text).map_err(|e| toml_error(None, e))?;
    if let Some(file) = scn.robot_file.take() {
        let path = match base {
            Some(dir) if file.is_relative() => dir.join(&file),
            _ => file.clone(),
        };
        scn.robot = load_robot(&path)?;
        scn.robot_file = Some(file);
    }
    scn.validate()?;
    Ok(scn)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text, path.parent()).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_robot(path: &Path) -> Result<RobotParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let p: RobotParams = toml::from_str(&text).map_err(|e| toml_error(Some(path), e))?;
    p.validate()?;
    Ok(p)
}

/// Looks up `name` as a path, then as `<dir>/<name>.toml` in each search dir.
pub fn resolve_scenario(name: &str, search: &[PathBuf]) -> Option<PathBuf> {
    let direct = PathBuf::from(name);
    if direct.is_file() {
        return Some(direct);
    }
    search.iter().map(|d| d.join(format!("{name}.toml"))).find(|p| p.is_file())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Experiment, Mode};

    #[test]
    fn diagonal_and_full_agree() {
        let d = WeightSpec::Diagonal(vec![1.0, 2.0]);
        let f = WeightSpec::Full(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(d.to_matrix::<2>("r").unwrap(), f.to_matrix::<2>("r").unwrap());
        assert!(WeightSpec::Diagonal(vec![1.0]).to_matrix::<2>("r").is_err());
    }

    #[test]
    fn default_weights_round_trip() {
        assert_eq!(WeightsConfig::default().to_weights().unwrap(), LqrWeights::default());
    }

    #[test]
    fn minimal_scenario() {
        let scn = parse_scenario("mode = \"networked\"\nexperiment = \"stabilization\"\n", None).unwrap();
        assert_eq!(scn.mode, Mode::Networked);
        assert_eq!(scn.experiment, Experiment::Stabilization);
    }

    #[test]
    fn missing_q_names_the_key() {
        let err = parse_scenario("[controller]\nr = [1e4, 1e4]\n", None).unwrap_err();
        assert!(err.to_string().contains("`q`"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_scenario("modee = \"local\"\n", None).unwrap_err();
        assert!(err.to_string().contains("modee"), "{err}");
        assert!(parse_scenario("[channel]\ntimeout = 0.03\nbogus = 1\n", None).is_err());
    }

    #[test]
    fn full_q_matrix_accepted() {
        let mut rows = String::new();
        for i in 0..6 {
            let row: Vec<String> = (0..6).map(|j| if i == j { "1.0".into() } else { "0.0".into() }).collect();
            rows.push_str(&format!("[{}],", row.join(",")));
        }
        let text = format!("[controller]\nq = [{rows}]\nr = [1.0, 1.0]\n");
        let scn = parse_scenario(&text, None).unwrap();
        assert_eq!(scn.controller.to_weights().unwrap().q, Matrix6::identity());
    }

    #[test]
    fn timeout_must_be_below_period() {
        assert!(parse_scenario("ts = 0.035\n[channel]\ntimeout = 0.04\n", None).is_err());
    }
}
