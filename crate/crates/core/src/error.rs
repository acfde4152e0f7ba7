use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("spectrum has no levels")]
    EmptySpectrum,
    #[error("two levels share the energy {0}")]
    DuplicateEnergy(String),
    #[error("degeneracy {0} is not positive")]
    NonPositiveDegeneracy(i64),
    #[error("integer overflow: {0}")]
    Overflow(String),
    #[error("inverse temperature must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("state is not normalized (total mass {0})")]
    NotNormalized(f64),
    #[error("state blocks carry no energy labels")]
    NonThermalState,
    #[error("value {value} is outside the admissible range {range}")]
    OutOfRange { value: f64, range: String },
    #[error("energy shell keeps no probability mass")]
    EmptyShell,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("target is not majorized by the source")]
    NotMajorized,
    #[error("ladder needs at least one rung")]
    ZeroRungs,
    #[error("ladder window contains no rung")]
    EmptyWindow,
    #[error("ladder window reaches the ground rung (u - delta must be positive)")]
    WindowTouchesGround,
    #[error("ladder window reaches past the top rung {top}")]
    WindowTouchesTop { top: u64 },
    #[error("infeasible delta': {0}")]
    InfeasibleDeltaPrime(String),
    #[error("invalid protocol parameters: {0}")]
    InvalidParams(String),
    #[error("source shell dimension e^{log_src:.4} is not below destination shell dimension e^{log_dst:.4}")]
    DimOrderViolated { log_src: f64, log_dst: f64 },
    #[error("ladder of {num_rungs} rungs is too small: {detail}")]
    LadderTooSmall { num_rungs: u64, detail: String },
    #[error("branch shift moves rung {rung} by {shift} outside [0, {num_rungs}); increase num_rungs")]
    LadderBoundaryHit { rung: i64, shift: i64, num_rungs: u64 },
    #[error("state does not match the plan: {0}")]
    PlanMismatch(String),
    #[error("entropy difference is not negative, not a converse case")]
    NotAConverseCase,
    #[error("work {work} is infeasible for bath size M = {m}")]
    InfeasibleAtThisM { m: f64, work: f64 },
    #[error("band must lie in (0, 1/2), got {0}")]
    InvalidBand(f64),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid `{field}`: {msg}")]
    Validation { field: String, msg: String },
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
