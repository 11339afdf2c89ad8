//! Error types shared across the crate.

use thiserror::Error;

/// Errors from parsing or validating pulse notation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PulseError {
    #[error("empty pulse notation")]
    Empty,
    #[error("token {position}: expected a flip angle, found `{found}`")]
    ExpectedAngle { position: usize, found: String },
    #[error("token {position}: flip angle must be positive, got {value}")]
    NonPositiveAngle { position: usize, value: f64 },
    #[error("token {position}: unknown axis `{axis}`")]
    UnknownAxis { position: usize, axis: String },
    #[error("token {position}: malformed segment `{found}` (expected `<degrees>(<axis>)`)")]
    Malformed { position: usize, found: String },
    #[error("segment {index}: {reason}")]
    InvalidSegment { index: usize, reason: String },
    #[error("sequence has no segments")]
    NoSegments,
    #[error("nominal field must be positive, got {0}")]
    NonPositiveField(f64),
}

/// Errors from propagation, coordinate transforms and ensemble analyses.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("state is not on the unit sphere (|r| = {norm})")]
    NonUnitState { norm: f64 },
    #[error("field scale must be positive, got {0}")]
    NonPositiveFieldScale(f64),
    #[error("n_steps = {given} is too small (need at least {minimum})")]
    TooFewSteps { given: usize, minimum: usize },
    #[error("|eta| = {eta} exceeds 1")]
    EtaOutOfRange { eta: f64 },
    #[error("trajectory entered the pole band (1 - |eta| <= {tol}) at t = {t}")]
    PoleCrossing { t: f64, tol: f64 },
    #[error("state too close to a pole (eta = {eta}); phi-dynamics are singular there")]
    PoleProximity { eta: f64 },
    #[error("phi step of {delta} rad at sample {index} is too close to pi to unwrap")]
    AmbiguousUnwrap { index: usize, delta: f64 },
    #[error("sample at t = {t} lies on a segment boundary")]
    SampleOnBoundary { t: f64 },
    #[error("canonical momentum denominator vanished")]
    DegenerateMomentum,
    #[error("density matrix is not Hermitian with unit trace: {reason}")]
    InvalidDensity { reason: String },
    #[error("piecewise generator schedule is invalid: {reason}")]
    InvalidSchedule { reason: String },
    #[error("invalid ensemble: {reason}")]
    InvalidEnsemble { reason: String },
    #[error("time {t} is not a grid sample")]
    TimeNotOnGrid { t: f64 },
    #[error("patch boundary point {index} crossed the pole band at t = {t}")]
    PatchPoleCrossing { index: usize, t: f64 },
}

/// Errors from swarm propagation and stability-element extraction.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("degenerate separation at t_i: |delta| = {separation} below {threshold}")]
    DegenerateSeparation { separation: f64, threshold: f64 },
    #[error("invalid swarm spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("ensemble is not phi-aligned at t_i (spread {spread} rad); the eta-direction \
             protocol assumes the pulse keeps the central swarm in a line")]
    AlignmentViolated { spread: f64 },
    #[error("bin {index} over [{lower}, {upper}] contains no members")]
    EmptyBin { index: usize, lower: f64, upper: f64 },
    #[error("need at least {minimum} members, got {given}")]
    TooFewMembers { given: usize, minimum: usize },
    #[error("jacobian is singular at the pole (1 - |eta| = {margin})")]
    PoleSingularJacobian { margin: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Errors from experiment configuration files.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("line {line}: syntax error: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    InvalidValue { line: usize, key: String, reason: String },
    #[error("invalid pulse sequence: {0}")]
    Pulse(#[from] PulseError),
    #[error("invalid configuration: {reason}")]
    Invalid { reason: String },
}
