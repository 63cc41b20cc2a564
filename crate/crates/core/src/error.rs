use thiserror::Error;

pub type Result<T> = std::result::Result<T, DpwError>;

#[derive(Debug, Error)]
pub enum DpwError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "no noise multiplier in [{low}, {high}] meets epsilon {target} \
         (epsilon at low end {eps_at_low}, at high end {eps_at_high})"
    )]
    CalibrationFailed {
        target: f64,
        low: f64,
        high: f64,
        eps_at_low: f64,
        eps_at_high: f64,
    },

    #[error("privacy budget exhausted: next charge reaches epsilon {next} > {budget}")]
    BudgetExhausted { next: f64, budget: f64 },

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DpwError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        DpwError::InvalidParameter(msg.into())
    }
}
