use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("label {label} at t={t} out of range for level {level} (K={k})")]
    LabelOutOfRange {
        level: usize,
        t: usize,
        label: i64,
        k: usize,
    },
    #[error("non-uniform sampling: expected t={expected}, found {found}")]
    NonUniformSampling { expected: usize, found: String },
    #[error("window length {window} exceeds series length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("invalid window parameters: {0}")]
    InvalidWindow(String),
    #[error("coarsening {k_fine} states by {factor} leaves fewer than two states")]
    FactorTooLarge { k_fine: usize, factor: usize },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("state {state} out of range (K_total={k_total})")]
    StateOutOfRange { state: usize, k_total: usize },
    #[error("timestep {t} out of range (length {len})")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("prompt slot at t={0} is already occupied")]
    SlotOccupied(usize),
    #[error("conflicting boundary prompt at t={0}")]
    ConflictingBoundary(usize),
    #[error("no {kind} prompt at t={t}")]
    NoSuchPrompt { t: usize, kind: &'static str },
    #[error("nothing to undo")]
    NothingToUndo,
    #[error("patch length {patch} exceeds window length {window}")]
    PatchTooLong { patch: usize, window: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
