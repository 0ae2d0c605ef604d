//! Occlusion mask from forward-warped visibility.

use ndarray::Array3;

use super::{reduce_flow_to_real, Flow3D};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, CameraModel};
use crate::mpi::{visibility_mask, warp_mpi, MultiPlaneImage};

/// Binary `Z × H × W` mask; 0 marks reference voxels hidden once the
/// reference MPI is moved by its flow.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask(pub Array3<f64>);

impl OcclusionMask {
    pub fn count_occluded(&self) -> usize {
        self.0.iter().filter(|&&v| v == 0.0).count()
    }
}

/// Forward-warp `m_ref` by `flow` within `camera`'s view, take the visibility
/// of the result and read it back at each reference voxel's destination
/// `(x + a, z + round(E[z']))`. Samples leaving the frame or the plane range
/// read as invisible.
pub fn occlusion_mask(
    m_ref: &MultiPlaneImage,
    flow: &Flow3D,
    camera: &CameraModel,
) -> Result<OcclusionMask> {
    let (zn, h, w) = m_ref.dim();
    if flow.dim() != (zn, h, w) {
        return Err(Error::dim(format!(
            "flow {:?} does not match MPI {:?}",
            flow.dim(),
            (zn, h, w)
        )));
    }
    if camera.width != w || camera.height != h {
        return Err(Error::dim(format!(
            "camera is {}×{}, MPI is {w}×{h}",
            camera.width, camera.height
        )));
    }
    let real = reduce_flow_to_real(flow, &m_ref.planes)?;
    let warped = warp_mpi(m_ref, camera, camera, Some(&real), &m_ref.planes)?;
    let vis = visibility_mask(&warped).0;

    let mut out = Array3::zeros((zn, h, w));
    for ((z, y, x), o) in out.indexed_iter_mut() {
        let tz = z as i64 + flow.expected_offset(z, y, x).round() as i64;
        if tz < 0 || tz >= zn as i64 {
            continue;
        }
        let sx = x as f64 + flow.xy[(z, y, x, 0)];
        let sy = y as f64 + flow.xy[(z, y, x, 1)];
        let v: f64 = bilinear_taps(sx, sy, w, h)
            .into_iter()
            .map(|(tx, ty, wt)| wt * vis[(tz as usize, ty, tx)])
            .sum();
        *o = if v > 0.5 { 1.0 } else { 0.0 };
    }
    Ok(OcclusionMask(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pinhole;
    use crate::mpi::{build_mpi, PlaneTable};
    use ndarray::{Array2, Array3};

    fn camera(w: usize, h: usize) -> CameraModel {
        CameraModel::identity(pinhole(50.0, 50.0, w as f64 / 2.0, h as f64 / 2.0), w, h).unwrap()
    }

    #[test]
    fn zero_flow_keeps_occupied_voxels_visible() {
        let rgb = Array3::from_shape_fn((6, 6, 3), |(y, x, c)| ((y + x + c) % 5) as f64 / 4.0);
        let depth = Array2::from_shape_fn((6, 6), |(y, x)| if x < 3 && y < 3 { 1.0 } else { 4.0 });
        let mpi = build_mpi(rgb.view(), depth.view(), 3, None).unwrap();
        let flow = Flow3D::zeros(3, 6, 6, 1);
        let o = occlusion_mask(&mpi, &flow, &camera(6, 6)).unwrap();
        for ((z, y, x), &a) in mpi.alpha.indexed_iter() {
            if a > 0.0 {
                assert_eq!(o.0[(z, y, x)], 1.0);
            }
        }
    }

    #[test]
    fn empty_mpi_is_fully_visible() {
        let planes = PlaneTable::inverse_uniform(1.0, 5.0, 2).unwrap();
        let mpi = MultiPlaneImage::empty(planes, 4, 5);
        let o = occlusion_mask(&mpi, &Flow3D::zeros(2, 4, 5, 1), &camera(5, 4)).unwrap();
        assert!(o.0.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let planes = PlaneTable::inverse_uniform(1.0, 5.0, 2).unwrap();
        let mpi = MultiPlaneImage::empty(planes, 4, 5);
        assert!(occlusion_mask(&mpi, &Flow3D::zeros(2, 4, 4, 1), &camera(5, 4)).is_err());
    }
}
