use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeerError {
    #[error(transparent)]
    Tensor(#[from] deer_tensor::TensorError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate region: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, DeerError>;
