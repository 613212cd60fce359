use enki_core::EnkiError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Core(#[from] EnkiError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bound dominance fails at N={n}, eps={eps:e}: empirical {empirical:.6}, theoretical {theoretical:.6}")]
    Dominance { n: usize, eps: f64, empirical: f64, theoretical: f64 },
}

impl BenchError {
    /// 2 for bad input, 3 for a diverging run, 4 for a failed bound check.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Core(EnkiError::InvalidParameter(_)) => 2,
            BenchError::Core(EnkiError::Divergence { .. } | EnkiError::GuardExhausted { .. } | EnkiError::Forward { .. }) => 3,
            BenchError::Dominance { .. } => 4,
            _ => 1,
        }
    }
}
