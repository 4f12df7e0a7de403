use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library. Variants map one-to-one onto the failure
/// modes of the public operations; internal shape bugs panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("identity {identity} has {have} {modality} records, need {need}")]
    InsufficientSamples {
        identity: usize,
        modality: &'static str,
        have: usize,
        need: usize,
    },
    #[error("input resolution {got:?} does not match configured {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("records at indices {0:?} have no shape map")]
    MissingShapeMap(Vec<usize>),
    #[error("identity {identity} out of range (num_identities = {num_identities})")]
    UnknownIdentity {
        identity: usize,
        num_identities: usize,
    },
    #[error("row {row} has near-zero norm {norm:e}")]
    DegenerateRow { row: usize, norm: f64 },
    #[error("no positive samples for batch position {0}")]
    EmptyPositiveSet(usize),
    #[error("label {label} out of range (num_identities = {num_identities})")]
    LabelOutOfRange { label: usize, num_identities: usize },
    #[error("similarity matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },
    #[error("pairing mismatch: {0}")]
    PairingMismatch(String),
    #[error("anchor {0} has no positive in batch")]
    NoPositive(usize),
    #[error("anchor {0} has no negative in batch")]
    NoNegative(usize),
    #[error("non-finite loss at stage {stage}, epoch {epoch}, step {step}")]
    NonFiniteLoss {
        stage: u8,
        epoch: usize,
        step: usize,
    },
    #[error("epoch {epoch} out of range [0, {total})")]
    OutOfRange { epoch: usize, total: usize },
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("checkpoint write failed: {0}")]
    CheckpointWrite(String),
    #[error("no shape map found for record {0}")]
    MapNotFound(String),
    #[error("missing files (first {}): {files:?}", files.len())]
    MissingFile { files: Vec<String> },
    #[error("directory {0} does not match any known dataset layout")]
    UnknownLayout(String),
    #[error("gallery contains no valid entry for query identity {0}")]
    EmptyGalleryForIdentity(usize),
    #[error("protocol/dataset mismatch: {0}")]
    ProtocolMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
