use thiserror::Error;

/// Errors produced by the library.
///
/// The split matters to callers: configuration and argument errors are the
/// caller's fault and are detectable before any heavy compute starts, while
/// numeric and divergence errors surface mid-run from the optimizers.
#[derive(Debug, Error)]
pub enum Error {
    /// A structural problem: mismatched dimensions, invalid schedules,
    /// malformed checkpoints and the like.
    #[error("configuration error: {0}")]
    Config(String),

    /// A well-formed call with an unusable value (e.g. removing more seams
    /// than the image has columns).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A non-finite value appeared during evaluation. `term` names the loss
    /// term or quantity that produced it.
    #[error("numeric error in {term}: {detail}")]
    Numeric { term: String, detail: String },

    /// An optimizer produced a non-finite or exploding loss.
    #[error("training diverged in {term} at epoch {epoch}: {detail}")]
    Diverged {
        term: String,
        epoch: usize,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            term: term.into(),
            detail: detail.into(),
        }
    }
}
