use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the retargeting pipeline, tagged by the subsystem that
/// produced them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Dataset(String),
    #[error("{0}")]
    Mask(String),
    #[error("{0}")]
    Ffc(String),
    #[error("{0}")]
    Generator(String),
    #[error("{0}")]
    Discriminator(String),
    #[error("{0}")]
    Loss(String),
    #[error("{0}")]
    Trainer(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Inference(String),
    #[error("{0}")]
    Seam(String),
    #[error("{0}")]
    Evaluation(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        module: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        module: &'static str,
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Name of the subsystem the error originated in.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Dataset(_) => "dataset_pipeline",
            Error::Mask(_) => "mask_generator",
            Error::Ffc(_) => "ffc_ops",
            Error::Generator(_) => "generator_net",
            Error::Discriminator(_) => "discriminator_net",
            Error::Loss(_) => "losses",
            Error::Trainer(_) | Error::Checkpoint(_) => "trainer",
            Error::Inference(_) => "retarget_inference",
            Error::Seam(_) => "seam_carving_baseline",
            Error::Evaluation(_) => "evaluation",
            Error::Config(_) => "cli",
            Error::Io { module, .. } | Error::Image { module, .. } => module,
        }
    }

    pub(crate) fn io(module: &'static str, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { module, path, source }
    }

    pub(crate) fn image(module: &'static str, path: impl Into<PathBuf>) -> impl FnOnce(image::ImageError) -> Error {
        let path = path.into();
        move |source| Error::Image { module, path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
