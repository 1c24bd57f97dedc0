use thiserror::Error;

use crate::models::ModelSpec;

pub type Result<T> = std::result::Result<T, BmdError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BmdError {
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("duplicate dose {0}")]
    DuplicateDose(f64),

    #[error("events exceed subjects at dose {dose}: y = {events}, n = {subjects}")]
    EventsExceedSubjects { dose: f64, events: u64, subjects: u64 },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("all doses are zero; cannot standardize")]
    AllDosesZero,

    #[error("invalid parameter vector for {spec}: {reason}")]
    InvalidParameters { spec: ModelSpec, reason: String },

    #[error("benchmark response must lie in (0, 1), got {0}")]
    InvalidBmr(f64),

    #[error("background probability is 1; extra risk undefined")]
    BackgroundCertain,

    #[error("extra risk never reaches {q} below dose {max_dose}")]
    BmrUnattainable { q: f64, max_dose: f64 },

    #[error("dose-response curve is constant in dose")]
    DegenerateCurve,

    #[error("dose-response slope vanishes at the benchmark dose")]
    FlatDoseResponseAtBmd,

    #[error("dose {dose} outside design range [{lo}, {hi}]")]
    OutsideDesignRange { dose: f64, lo: f64, hi: f64 },

    #[error("KL projection onto {spec} failed: {reason}")]
    ProjectionFailed { spec: ModelSpec, reason: String },

    #[error("information matrix is singular for {0}")]
    SingularInformation(ModelSpec),

    #[error("no converged fits available")]
    NoConvergedFits,

    #[error("risk matrix has no finite entries for this selector")]
    EmptyRiskMatrix,

    #[error("invalid curve constraints: {0}")]
    InvalidConstraints(String),

    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown model label `{0}`")]
    UnknownModel(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for BmdError {
    fn from(e: std::io::Error) -> Self {
        BmdError::Io(e.to_string())
    }
}

impl From<csv::Error> for BmdError {
    fn from(e: csv::Error) -> Self {
        BmdError::Io(e.to_string())
    }
}
