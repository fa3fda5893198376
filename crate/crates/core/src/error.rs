use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration:\n{0}")]
    InvalidConfig(crate::Diagnostics),

    #[error("queue bound violated at station {station}: {queue} > buffer {buffer}")]
    QueueBound { station: usize, queue: u32, buffer: u32 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("state space too large: {states} states exceeds cap {cap}")]
    StateCap { states: u64, cap: u64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config file: {0}")]
    ConfigFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
