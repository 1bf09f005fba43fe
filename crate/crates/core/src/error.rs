use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("adapters are already initialized")]
    AdaptersAlreadyInitialized,
    #[error("base weights must be frozen before attaching adapters")]
    NotFrozen,
    #[error("adapters are already merged")]
    AlreadyMerged,
    #[error("model has no adapters to merge")]
    NoAdapters,
    #[error("parameter vector has length {got}, model expects {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("gradient has length {got}, optimizer tracks {expected} parameters")]
    GradLength { expected: usize, got: usize },
    #[error("step {step} exceeds schedule length {total}")]
    ScheduleOverrun { step: u64, total: u64 },
    #[error("posterior became improper at index {index}: h + delta = {value}")]
    Instability { index: usize, value: f64 },
    #[error("negative variance scale tau = {0}")]
    NegativeTau(f64),
    #[error("prior variance must be positive, got {0}")]
    PriorVariance(f64),
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("ensemble size must be at least 1")]
    EmptyEnsemble,
    #[error("ensemble prediction needs a posterior variance; point estimates have none")]
    NoVariance,
    #[error("inputs and labels differ in length: {inputs} vs {labels}")]
    BatchLength { inputs: usize, labels: usize },
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics need at least one example")]
    EmptyBatch,
    #[error("number of bins must be at least 1")]
    NoBins,
}
