use thiserror::Error;

/// Errors surfaced by the library.
///
/// Contract violations (dimension mismatches, non-finite inputs) panic via
/// assertions instead; these variants cover recoverable conditions the
/// caller can act on.
#[derive(Debug, Error)]
pub enum Error {
    #[error("gram matrix not positive definite after maximum jitter (size {size}, last jitter {last_jitter:e}): data is ill-conditioned")]
    IllConditioned { size: usize, last_jitter: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
