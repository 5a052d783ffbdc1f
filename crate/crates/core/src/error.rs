use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("equilibrium solve did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoEquilibrium { iterations: usize, residual: f64 },
    #[error("algebraic block cannot be eliminated: {0}")]
    SingularAlgebraicBlock(String),
    #[error("degenerate operating point: {0}")]
    DegenerateOperatingPoint(String),
    #[error("resolvent numerically singular at bin {bin} (omega = {omega:.6} rad/s, cond = {cond:.3e})")]
    ResonantBin { bin: usize, omega: f64, cond: f64 },
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e})")]
    PowerFlowDiverged { iterations: usize, mismatch: f64 },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("window must contain an odd number of samples, got {0}")]
    EvenSampleCount(usize),
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(f64),
    #[error("no grid bin inside [{lo:.6}, {hi:.6}] rad/s")]
    EmptyBand { lo: f64, hi: f64 },
    #[error("forcing frequency {0:.6} rad/s outside (0, max grid]")]
    BandOutOfRange(f64),
    #[error("missing or non-finite sample at row {0}")]
    MissingSample(usize),
    #[error("ingestion failed: {0}")]
    Ingest(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("FRF grid does not match spectral grid")]
    GridMismatch,
    #[error("covariance block at bin {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("injection bin {0} is not among the included bins")]
    InjectionOutsideBins(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("Hessian is not positive definite")]
    IndefiniteHessian,
    #[error("problem setup: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("integration diverged at t = {t:.4} s")]
    IntegrationDiverged { t: f64 },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// Top-level error for pipeline and I/O entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("config: {0}")]
    Config(String),
    #[error("generator {generator}: {source}")]
    Generator {
        generator: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
