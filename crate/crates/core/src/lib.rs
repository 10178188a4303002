pub mod atlas;
pub mod autodiff;
pub mod dataio;
pub mod distance;
pub mod evalstats;
pub mod error;
pub mod losses;
pub mod network;
pub mod trainer;
pub mod volume;
pub mod warp;

pub use error::{Error, ErrorKind, Result};
pub use volume::{AffineTransform, BinaryMask, Grid, NormalizationConstants, Volume};
pub use warp::{DeformationField, SurfaceMesh};
