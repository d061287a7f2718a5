use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid graph: {0}")]
    Graph(String),
}
