use crate::distance::{fast_marching_signed_distance, weight_map, DistanceMap, WeightMap};
use crate::error::Result;
use crate::volume::{BinaryMask, Volume};
use crate::warp::{marching_cubes_surface, SurfaceMesh};

/// Atlas image, segmentation and everything derived from the segmentation.
#[derive(Debug, Clone)]
pub struct AtlasBundle {
    pub image: Volume,
    pub mask: BinaryMask,
    pub distance: DistanceMap,
    pub weights: WeightMap,
    pub surface: SurfaceMesh,
}

impl AtlasBundle {
    /// Derives the signed distance map, weight map (thresholds in mm) and surface from `mask`.
    pub fn new(image: Volume, mask: BinaryMask, t_lower_mm: f64, t_upper_mm: f64) -> Result<Self> {
        image.grid().ensure_matches(mask.grid(), "atlas mask")?;
        let distance = fast_marching_signed_distance(&mask)?;
        let weights = weight_map(&distance, t_lower_mm, t_upper_mm)?;
        let surface = marching_cubes_surface(&mask)?;
        Ok(AtlasBundle { image, mask, distance, weights, surface })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.image.dims()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    #[test]
    fn weights_peak_at_boundary() {
        let g = Grid::unit([12, 12, 12]);
        let mask = BinaryMask::from_fn(g, |i, j, k| (3..9).contains(&i) && (3..9).contains(&j) && (3..9).contains(&k));
        let img = mask.to_volume();
        let a = AtlasBundle::new(img, mask, 1.0, 4.0).unwrap();
        assert_eq!(a.weights.0.at(3, 5, 5), 1.0);
        assert_eq!(a.weights.0.at(0, 0, 0), 0.5);
        assert!(!a.surface.is_empty());
        assert!(AtlasBundle::new(Volume::filled(Grid::unit([4, 4, 4]), 0.0), BinaryMask::empty(Grid::unit([4, 4, 4])), 1.0, 4.0).is_err());
    }
}
