use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("unknown group kind `{0}` (expected mp, ep, esp or ep_esp)")]
    UnknownGroupKind(String),

    #[error("shape mismatch in {op}: rank {rank} has {found} elements, expected {expected}")]
    ShapeMismatch {
        op: &'static str,
        rank: usize,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {len} elements cannot be split into {parts} equal parts")]
    Indivisible { op: &'static str, len: u64, parts: u64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("placement not covered by the inequality analysis: {0}")]
    UnsupportedPlacement(String),

    #[error("saa phase count {phases} does not match AlltoAll group size {group}")]
    PhaseMismatch { phases: usize, group: usize },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("profile is missing entries: {}", .0.join(", "))]
    MissingProfile(Vec<String>),

    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error("empty sweep grid")]
    EmptyGrid,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}
