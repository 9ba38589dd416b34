use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: parse error at row {row}: {message}")]
    Parse {
        context: String,
        row: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("constant predictor in column '{0}'")]
    ConstantPredictor(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("block {0} contains no SNPs")]
    EmptyBlock(i64),

    #[error("infeasible prior: {0}")]
    InfeasiblePrior(String),

    #[error("numerical failure (trait {trait_index:?}, predictor {predictor:?}, iteration {iteration}): {what}")]
    Numerical {
        trait_index: Option<usize>,
        predictor: Option<usize>,
        iteration: usize,
        what: String,
    },

    #[error("infeasible simulation spec: {0}")]
    InfeasibleSpec(String),

    #[error("heritability draw stayed above 1 - 1e-9 after {0} attempts")]
    DegenerateHeritability(usize),

    #[error("AUC undefined: truth contains a single class")]
    UndefinedAuc,

    #[error("relative change undefined for a zero baseline")]
    ZeroBaseline,

    #[error("exact oracle supports at most {max} predictors, got {got}")]
    OracleSize { max: usize, got: usize },

    #[error("block {block_id} failed")]
    BlockFailed {
        block_id: i64,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
