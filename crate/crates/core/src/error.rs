use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sparse tensor: {0}")]
    Tensor(String),
    #[error("network: {0}")]
    Network(String),
    #[error("entropy coder: {0}")]
    Entropy(String),
    #[error("bitstream: {0}")]
    Bitstream(String),
    #[error("codec: {0}")]
    Codec(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("ply parse error at line {line}: {msg}")]
    PlyParse { line: usize, msg: String },
    #[error("training: {0}")]
    Training(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
