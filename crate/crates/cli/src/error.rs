//! Error type and exit-code mapping.

use thiserror::Error;

use trailopt_core::model::ModelError;
use trailopt_core::nutrition::NutritionError;
use trailopt_core::ocp::OcpError;
use trailopt_core::pmp::PmpError;
use trailopt_core::race::RaceError;
use trailopt_core::terrain::TerrainError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or invalid input; exit code 2.
    #[error("input error: {0}")]
    Input(String),
    /// The optimiser failed or did not converge; exit code 3.
    #[error("solver failure: {0}")]
    Solver(String),
    /// The PMP verifier rejected the trajectory; exit code 4.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Verification(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<TerrainError> for CliError {
    fn from(e: TerrainError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<NutritionError> for CliError {
    fn from(e: NutritionError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<OcpError> for CliError {
    fn from(e: OcpError) -> Self {
        match e {
            OcpError::InvalidProblem(_) => CliError::Input(e.to_string()),
            OcpError::Model(ModelError::NonFinite { .. }) | OcpError::Nlp(_) => CliError::Solver(e.to_string()),
            OcpError::Model(m) => m.into(),
        }
    }
}

impl From<RaceError> for CliError {
    fn from(e: RaceError) -> Self {
        match e {
            RaceError::Solver(s) => s.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<PmpError> for CliError {
    fn from(e: PmpError) -> Self {
        match e {
            PmpError::Malformed(_) | PmpError::Model(_) => CliError::Input(e.to_string()),
            other => CliError::Verification(other.to_string()),
        }
    }
}
