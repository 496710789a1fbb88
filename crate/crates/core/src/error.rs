use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event scheduled in the past (now={now}, fire_at={fire_at})")]
    PastEvent { now: u64, fire_at: u64 },

    #[error("index outside the resource grid: {0}")]
    IndexOutOfGrid(String),

    #[error("transport block of {bytes} bytes needs {needed} subchannels, grid has {available}")]
    OversizedTb {
        bytes: usize,
        needed: usize,
        available: usize,
    },

    #[error("selection window [{start}, {end}] contains no PSSCH subframe")]
    EmptySelectionWindow { start: u64, end: u64 },

    #[error("no feasible sidelink resource for request of {0}")]
    GrantDenied(String),

    #[error("logical channel space exhausted for {0}")]
    ConnectionRefused(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("runtime invariant violated: {0}")]
    InvariantBreach(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
