//! Deformation fields and everything that moves data through them: backward warping of
//! images, forward projection of surfaces, approximate inversion, and random smooth
//! fields for augmentation and synthesis.

mod field;
mod inverse;
mod surface;

pub use field::{
    field_gradient, jacobian_determinants, random_smooth_field, sample_trilinear, warp_volume, DeformationField,
    Jacobian,
};
pub(crate) use field::{sample_with_gradient, trilinear_corners};
pub use inverse::{invert_field, rasterize_projected_mask, rasterize_projected_mask_with, InversionOptions};
pub use surface::{marching_cubes_surface, project_surface, SurfaceMesh};
pub(crate) use surface::{dot, norm, sub};
