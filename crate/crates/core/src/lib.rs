//! Label-free dense nuclei detection and segmentation.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`ssl`] pretrains a block-structured encoder on an annotation-free proxy
//!    task (similarity between an image and its augmented view by default).
//! 2. [`saliency`] turns the gradients of a shallow encoder block into a
//!    self-activation map.
//! 3. [`pseudo`] fuses the colorized map with the raw image, clusters pixels
//!    with K-Means and reassigns cluster labels by their red-channel mean to
//!    obtain tri-state pseudo masks.
//! 4. [`detect`] trains a detection network on the pseudo masks, thresholds
//!    its probability map into a trimap, finds nuclei centers as strict local
//!    maxima and rasterizes Voronoi labels from them.
//! 5. [`segment`] trains the segmentation network under the joint
//!    Voronoi/background loss and extracts instances.
//!
//! [`metrics`] implements the evaluation suite and [`data`] the dataset
//! layouts plus a synthetic nuclei generator.

pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod io;
pub mod metrics;
pub mod net;
pub mod pseudo;
pub mod raster;
pub mod saliency;
pub mod segment;
pub mod ssl;
mod train;

pub use checkpoint::Checkpoint;
pub use raster::{
    connected_components, normalize, Connectivity, InstanceMap, Point, PointSet, ProbabilityMap,
    RasterImage, TriState, TriStateMask,
};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite training loss at epoch {epoch}; last good checkpoint retained")]
    NonFiniteLoss {
        epoch: usize,
        last_good: Box<Checkpoint>,
    },
    #[error("{} dataset problem(s): {}", .0.len(), .0.join("; "))]
    Dataset(Vec<String>),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] psam_nn::NnError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, found })
    }
}
