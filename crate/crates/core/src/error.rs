use std::path::PathBuf;

use thiserror::Error;
use trilevel_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("selector contract violated: {0}")]
    SelectorContract(String),
    #[error("{}: format error at byte {offset}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    #[error("example {id} is active but has no visit in the current window")]
    Staleness { id: usize },
    #[error("remove-and-restore schedule exhausted after {iterations} iterations")]
    ScheduleExhausted { iterations: usize },
    #[error("accounting bug at {location}: analytic {analytic} vs instrumented {instrumented} MACs")]
    Accounting {
        location: String,
        analytic: u64,
        instrumented: u64,
    },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
