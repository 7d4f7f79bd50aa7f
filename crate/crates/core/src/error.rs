use thiserror::Error;

pub type Result<T> = std::result::Result<T, ImcError>;

#[derive(Debug, Error)]
pub enum ImcError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("at time step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<ImcError>,
    },

    #[error("stage `{stage}` failed (artifacts kept in {dir}): {source}")]
    Stage {
        stage: String,
        dir: String,
        #[source]
        source: Box<ImcError>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("zero-variance reference signal; FIT undefined")]
    ZeroVariance,

    #[error("no feasible equilibrium: best output mismatch {best_score:.3e} (tolerance {tol:.1e})")]
    EquilibriumNotFound { best_score: f64, tol: f64 },

    #[error("fixed-point iteration did not settle within {cap} steps (last increment {last_delta:.3e})")]
    Unsettled { cap: usize, last_delta: f64 },

    #[error("insufficient feasible set-points: needed {needed}, found {found}")]
    InsufficientSetPoints { needed: usize, found: usize },

    #[error("loss became NaN at epoch {epoch}; try a smaller learning rate (current {learning_rate:e})")]
    NanLoss { epoch: usize, learning_rate: f64 },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("certification failed: {0}")]
    Certification(String),

    #[error("simulation fault: {0}")]
    Simulation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ImcError {
    pub fn dims(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        ImcError::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        ImcError::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// The innermost error under any step or stage wrappers.
    pub fn root(&self) -> &ImcError {
        match self {
            ImcError::AtStep { source, .. } | ImcError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ImcError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
