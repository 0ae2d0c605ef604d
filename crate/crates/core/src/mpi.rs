//! Multi-plane images built from RGB-D frames.
//!
//! Plane 0 is the nearest plane. Plane depths are uniform in inverse depth,
//! and every voxel carries its true depth in addition to colour and alpha.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::RealFlow;
use crate::geometry::{CameraModel, FlowVector3, Reprojector, SplatAccumulator};

/// Relative margin applied to a frame's own depth range when none is given.
pub const DEFAULT_RANGE_MARGIN: f64 = 1e-3;

/// Plane depth table, nearest plane first, uniform in inverse depth.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneTable {
    depths: Vec<f64>,
    inverse: Vec<f64>,
}

impl PlaneTable {
    pub fn inverse_uniform(near: f64, far: f64, num_planes: usize) -> Result<Self> {
        if num_planes < 2 {
            return Err(Error::domain(format!("need at least 2 planes, got {num_planes}")));
        }
        if !(near > 0.0) || !(far > near) || !far.is_finite() {
            return Err(Error::domain(format!(
                "invalid depth range [{near}, {far}]"
            )));
        }
        let (inv_near, inv_far) = (1.0 / near, 1.0 / far);
        let step = (inv_near - inv_far) / (num_planes - 1) as f64;
        let inverse: Vec<f64> = (0..num_planes)
            .map(|z| {
                if z == num_planes - 1 {
                    inv_far
                } else {
                    inv_near - z as f64 * step
                }
            })
            .collect();
        let depths = inverse.iter().map(|v| 1.0 / v).collect();
        Ok(Self { depths, inverse })
    }

    /// Arbitrary strictly increasing plane depths, nearest first.
    pub fn from_depths(depths: Vec<f64>) -> Result<Self> {
        if depths.len() < 2 {
            return Err(Error::domain("need at least 2 planes"));
        }
        if !depths.iter().all(|d| *d > 0.0 && d.is_finite())
            || depths.windows(2).any(|p| p[1] <= p[0])
        {
            return Err(Error::domain(format!(
                "plane depths must be positive and strictly increasing: {depths:?}"
            )));
        }
        let inverse = depths.iter().map(|d| 1.0 / d).collect();
        Ok(Self { depths, inverse })
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn inverse_depths(&self) -> &[f64] {
        &self.inverse
    }

    pub fn depth(&self, z: usize) -> f64 {
        self.depths[z]
    }

    /// Plane whose depth is nearest to `depth` in inverse depth. Ties go to
    /// the nearer plane; depths outside the table map to the boundary planes.
    pub fn nearest(&self, depth: f64) -> usize {
        let inv = 1.0 / depth;
        let mut best = 0;
        let mut best_err = f64::INFINITY;
        for (z, &p) in self.inverse.iter().enumerate() {
            let err = (inv - p).abs();
            if err < best_err {
                best = z;
                best_err = err;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiPlaneImage {
    /// `Z × H × W × 3`, values in [0, 1].
    pub color: Array4<f64>,
    /// `Z × H × W` true depth in metres.
    pub depth: Array3<f64>,
    /// `Z × H × W` occupancy in [0, 1].
    pub alpha: Array3<f64>,
    pub planes: PlaneTable,
}

impl MultiPlaneImage {
    pub fn empty(planes: PlaneTable, height: usize, width: usize) -> Self {
        let z = planes.len();
        Self {
            color: Array4::zeros((z, height, width, 3)),
            depth: Array3::zeros((z, height, width)),
            alpha: Array3::zeros((z, height, width)),
            planes,
        }
    }

    pub fn num_planes(&self) -> usize {
        self.alpha.dim().0
    }

    pub fn height(&self) -> usize {
        self.alpha.dim().1
    }

    pub fn width(&self) -> usize {
        self.alpha.dim().2
    }

    /// `(Z, H, W)`
    pub fn dim(&self) -> (usize, usize, usize) {
        self.alpha.dim()
    }

    pub fn check(&self) -> Result<()> {
        let (z, h, w) = self.alpha.dim();
        if self.color.dim() != (z, h, w, 3) || self.depth.dim() != (z, h, w) {
            return Err(Error::dim(format!(
                "MPI channels disagree: color {:?}, depth {:?}, alpha {:?}",
                self.color.dim(),
                self.depth.dim(),
                self.alpha.dim()
            )));
        }
        if self.planes.len() != z {
            return Err(Error::dim(format!(
                "plane table has {} entries for {z} planes",
                self.planes.len()
            )));
        }
        Ok(())
    }

    /// Per-pixel alpha summed over planes.
    pub fn alpha_sum(&self) -> Array2<f64> {
        self.alpha.sum_axis(Axis(0))
    }
}

/// Build a one-hot MPI from an RGB-D frame: each pixel goes to the plane
/// nearest (in inverse depth) to its true depth.
pub fn build_mpi(
    rgb: ArrayView3<f64>,
    depth: ArrayView2<f64>,
    num_planes: usize,
    depth_range: Option<(f64, f64)>,
) -> Result<MultiPlaneImage> {
    let (h, w, c) = rgb.dim();
    if c != 3 || depth.dim() != (h, w) {
        return Err(Error::dim(format!(
            "rgb {:?} and depth {:?} do not describe the same frame",
            rgb.dim(),
            depth.dim()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim("empty frame"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &d in depth.iter() {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::domain(format!("depth must be positive and finite, found {d}")));
        }
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let (near, far) = match depth_range {
        Some((near, far)) => {
            if near > lo || far < hi {
                return Err(Error::domain(format!(
                    "depth range [{near}, {far}] does not cover frame depths [{lo}, {hi}]"
                )));
            }
            (near, far)
        }
        None => (lo * (1.0 - DEFAULT_RANGE_MARGIN), hi * (1.0 + DEFAULT_RANGE_MARGIN)),
    };
    let planes = PlaneTable::inverse_uniform(near, far, num_planes)?;
    Ok(build_mpi_on(rgb, depth, &planes))
}

/// Build a one-hot MPI onto an existing plane table. Depths outside the
/// table land on the boundary planes.
pub fn build_mpi_on(
    rgb: ArrayView3<f64>,
    depth: ArrayView2<f64>,
    planes: &PlaneTable,
) -> MultiPlaneImage {
    let (h, w, _) = rgb.dim();
    let mut mpi = MultiPlaneImage::empty(planes.clone(), h, w);
    for row in 0..h {
        for col in 0..w {
            let d = depth[(row, col)];
            let z = planes.nearest(d);
            mpi.alpha[(z, row, col)] = 1.0;
            mpi.depth[(z, row, col)] = d;
            for ch in 0..3 {
                mpi.color[(z, row, col, ch)] = rgb[(row, col, ch)];
            }
        }
    }
    mpi
}

#[derive(Debug, Clone)]
pub struct Composite {
    /// `H × W × 3`
    pub rgb: Array3<f64>,
    /// True where accumulated alpha is below 0.5.
    pub hole_mask: Array2<bool>,
    /// Accumulated alpha `1 - Π(1 - α)`.
    pub coverage: Array2<f64>,
}

/// Back-to-front over-compositing of an MPI into a frame.
pub fn alpha_composite(mpi: &MultiPlaneImage) -> Result<Composite> {
    mpi.check()?;
    let (zn, h, w) = mpi.dim();
    let mut rgb = Array3::<f64>::zeros((h, w, 3));
    let mut transmit = Array2::<f64>::ones((h, w));
    for z in (0..zn).rev() {
        let alpha = mpi.alpha.index_axis(Axis(0), z);
        let color = mpi.color.index_axis(Axis(0), z);
        Zip::from(rgb.lanes_mut(Axis(2)))
            .and(color.lanes(Axis(2)))
            .and(&alpha)
            .and(&mut transmit)
            .for_each(|mut out, c, &a, t| {
                if a == 0.0 {
                    return;
                }
                for ch in 0..3 {
                    out[ch] = c[ch] * a + out[ch] * (1.0 - a);
                }
                *t *= 1.0 - a;
            });
    }
    let coverage = transmit.mapv(|t| 1.0 - t);
    let hole_mask = coverage.mapv(|c| c < 0.5);
    Ok(Composite {
        rgb,
        hole_mask,
        coverage,
    })
}

/// Visibility `v(x, z) = Π_{y<z} (1 - α(x, y))`, shape `Z × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMask(pub Array3<f64>);

pub fn visibility_mask(mpi: &MultiPlaneImage) -> VisibilityMask {
    let (zn, h, w) = mpi.dim();
    let mut vis = Array3::<f64>::ones((zn, h, w));
    for z in 1..zn {
        let (prev, mut cur) = vis.multi_slice_mut((s![z - 1, .., ..], s![z, .., ..]));
        Zip::from(&mut cur)
            .and(&prev)
            .and(mpi.alpha.index_axis(Axis(0), z - 1))
            .for_each(|c, &p, &a| *c = p * (1.0 - a));
    }
    VisibilityMask(vis)
}

/// Warped voxels covering less of a target pixel than this leave it empty.
pub const MIN_COVERAGE: f64 = 0.5;

struct WarpedVoxel {
    area: f64,
    target_plane: usize,
    x: f64,
    y: f64,
    payload: [f64; 4],
    weight: f64,
}

/// Forward-warp every occupied voxel of `mpi` from view `src` to view `dst`,
/// displaced by the optional local flow, splatting bilinearly in x-y onto the
/// target plane nearest to the reprojected depth. A target pixel takes part
/// of a plane only where the splatted footprint covers at least
/// [`MIN_COVERAGE`] of it, so edges stay sharp instead of bleeding by a
/// pixel. Its alpha is the splatted alpha mass over the bilinear kernel
/// mass, so stretched surfaces stay opaque.
pub fn warp_mpi(
    mpi: &MultiPlaneImage,
    src: &CameraModel,
    dst: &CameraModel,
    local_flow: Option<&RealFlow>,
    target_planes: &PlaneTable,
) -> Result<MultiPlaneImage> {
    mpi.check()?;
    let (zn, h, w) = mpi.dim();
    if target_planes.len() != zn {
        return Err(Error::dim(format!(
            "target plane table has {} planes, MPI has {zn}",
            target_planes.len()
        )));
    }
    if let Some(flow) = local_flow {
        if flow.0.dim() != (zn, h, w, 3) {
            return Err(Error::dim(format!(
                "local flow {:?} does not match MPI {:?}",
                flow.0.dim(),
                (zn, h, w)
            )));
        }
    }
    let reprojector = Reprojector::new(src, dst);
    let per_plane: Vec<Vec<WarpedVoxel>> = (0..zn)
        .into_par_iter()
        .map(|z| {
            let mut out = Vec::new();
            for row in 0..h {
                for col in 0..w {
                    let a = mpi.alpha[(z, row, col)];
                    if a <= 0.0 {
                        continue;
                    }
                    let u = local_flow.map_or(FlowVector3::ZERO, |f| f.at(z, row, col));
                    let Ok(p) = reprojector.project(col as f64, row as f64, mpi.depth[(z, row, col)], u)
                    else {
                        continue;
                    };
                    // Footprint of the voxel in the target, from its
                    // neighbours moved the same way.
                    let area = match (
                        reprojector.project(col as f64 + 1.0, row as f64, mpi.depth[(z, row, col)], u),
                        reprojector.project(col as f64, row as f64 + 1.0, mpi.depth[(z, row, col)], u),
                    ) {
                        (Ok(px), Ok(py)) => ((px.x - p.x) * (py.y - p.y) - (py.x - p.x) * (px.y - p.y)).abs(),
                        _ => 1.0,
                    };
                    out.push(WarpedVoxel {
                        area,
                        target_plane: target_planes.nearest(p.depth),
                        x: p.x,
                        y: p.y,
                        payload: [
                            mpi.color[(z, row, col, 0)],
                            mpi.color[(z, row, col, 1)],
                            mpi.color[(z, row, col, 2)],
                            p.depth,
                        ],
                        weight: a,
                    });
                }
            }
            out
        })
        .collect();

    let (tw, th) = (dst.width, dst.height);
    let planes: Vec<_> = (0..zn)
        .into_par_iter()
        .map(|tz| {
            let mut acc = SplatAccumulator::new(tw, th, 4);
            for voxel in per_plane.iter().flatten().filter(|v| v.target_plane == tz) {
                acc.add_with_area(voxel.x, voxel.y, &voxel.payload, voxel.weight, voxel.area);
            }
            acc.finish()
        })
        .collect();

    let mut out = MultiPlaneImage::empty(target_planes.clone(), th, tw);
    for (tz, splat) in planes.into_iter().enumerate() {
        for row in 0..th {
            for col in 0..tw {
                if !splat.valid[(row, col)] || splat.coverage[(row, col)] < MIN_COVERAGE {
                    continue;
                }
                out.alpha[(tz, row, col)] = (splat.weight[(row, col)] / splat.kernel[(row, col)]).clamp(0.0, 1.0);
                for ch in 0..3 {
                    out.color[(tz, row, col, ch)] = splat.payload[(row, col, ch)];
                }
                out.depth[(tz, row, col)] = splat.payload[(row, col, 3)];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pinhole;
    use nalgebra::Matrix4;

    fn gradient_rgb(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
            ((r * 13 + c * 7 + ch * 5) % 17) as f64 / 16.0
        })
    }

    #[test]
    fn inverse_depth_table_two_depth_scene() {
        let planes = PlaneTable::inverse_uniform(1.0, 10.0, 4).unwrap();
        let expect = [1.0, 10.0 / 7.0, 2.5, 10.0];
        for (got, want) in planes.depths().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let inv = planes.inverse_depths();
        for z in 1..3 {
            assert!(((inv[z + 1] - inv[z]) - (inv[z] - inv[z - 1])).abs() < 1e-9);
        }
        let rgb = gradient_rgb(2, 2);
        let depth = Array2::from_shape_vec((2, 2), vec![1.0, 10.0, 10.0, 1.0]).unwrap();
        let mpi = build_mpi(rgb.view(), depth.view(), 4, Some((1.0, 10.0))).unwrap();
        assert_eq!(mpi.alpha[(0, 0, 0)], 1.0);
        assert_eq!(mpi.alpha[(3, 0, 1)], 1.0);
        assert_eq!(mpi.alpha_sum(), Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn nearest_plane_ties_go_to_nearer_plane() {
        let planes = PlaneTable::inverse_uniform(1.0, 2.0, 2).unwrap();
        // midpoint in inverse depth: 0.75 → depth 4/3
        assert_eq!(planes.nearest(4.0 / 3.0), 0);
        assert_eq!(planes.nearest(0.1), 0);
        assert_eq!(planes.nearest(100.0), 1);
    }

    #[test]
    fn constant_depth_round_trips() {
        let rgb = gradient_rgb(5, 6);
        let depth = Array2::from_elem((5, 6), 5.0);
        let mpi = build_mpi(rgb.view(), depth.view(), 4, None).unwrap();
        let occupied: Vec<usize> = (0..4).filter(|&z| mpi.alpha.index_axis(Axis(0), z).sum() > 0.0).collect();
        assert_eq!(occupied.len(), 1);
        let comp = alpha_composite(&mpi).unwrap();
        assert_eq!(comp.rgb, rgb);
        assert!(comp.hole_mask.iter().all(|&h| !h));
    }

    #[test]
    fn build_rejects_bad_inputs() {
        let rgb = gradient_rgb(2, 2);
        let mut depth = Array2::from_elem((2, 2), 1.0);
        depth[(1, 1)] = 0.0;
        assert!(matches!(build_mpi(rgb.view(), depth.view(), 4, None), Err(Error::Domain(_))));
        let depth = Array2::from_elem((2, 2), 3.0);
        assert!(build_mpi(rgb.view(), depth.view(), 1, None).is_err());
        assert!(build_mpi(rgb.view(), depth.view(), 4, Some((4.0, 5.0))).is_err());
    }

    #[test]
    fn front_plane_occludes_and_empty_pixel_is_hole() {
        let planes = PlaneTable::inverse_uniform(1.0, 4.0, 3).unwrap();
        let mut mpi = MultiPlaneImage::empty(planes, 1, 2);
        mpi.alpha[(0, 0, 0)] = 1.0;
        mpi.alpha[(2, 0, 0)] = 1.0;
        mpi.color[(0, 0, 0, 0)] = 0.25;
        mpi.color[(2, 0, 0, 1)] = 0.75;
        let comp = alpha_composite(&mpi).unwrap();
        assert_eq!(comp.rgb.slice(s![0, 0, ..]).to_vec(), vec![0.25, 0.0, 0.0]);
        assert!(!comp.hole_mask[(0, 0)]);
        assert!(comp.hole_mask[(0, 1)]);
        assert_eq!(comp.rgb.slice(s![0, 1, ..]).to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn visibility_products() {
        let planes = PlaneTable::inverse_uniform(1.0, 4.0, 4).unwrap();
        let mut mpi = MultiPlaneImage::empty(planes, 1, 2);
        mpi.alpha[(0, 0, 0)] = 0.5;
        mpi.alpha[(1, 0, 0)] = 1.0;
        let v = visibility_mask(&mpi).0;
        assert_eq!(
            (0..4).map(|z| v[(z, 0, 0)]).collect::<Vec<_>>(),
            vec![1.0, 0.5, 0.0, 0.0]
        );
        assert!((0..4).all(|z| v[(z, 0, 1)] == 1.0));
    }

    #[test]
    fn one_hot_visibility() {
        let rgb = gradient_rgb(3, 3);
        let depth = Array2::from_shape_fn((3, 3), |(r, c)| 1.0 + (r + c) as f64);
        let mpi = build_mpi(rgb.view(), depth.view(), 4, None).unwrap();
        let v = visibility_mask(&mpi).0;
        for r in 0..3 {
            for c in 0..3 {
                let occ = (0..4).find(|&z| mpi.alpha[(z, r, c)] == 1.0).unwrap();
                for z in 0..4 {
                    assert_eq!(v[(z, r, c)], if z <= occ { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn identity_warp_preserves_channels() {
        let rgb = gradient_rgb(6, 7);
        let depth = Array2::from_shape_fn((6, 7), |(r, c)| 1.0 + 0.3 * ((r * c) % 5) as f64);
        let mpi = build_mpi(rgb.view(), depth.view(), 4, None).unwrap();
        let cam = CameraModel::new(pinhole(10.0, 10.0, 3.0, 3.0), Matrix4::identity(), 7, 6).unwrap();
        let warped = warp_mpi(&mpi, &cam, &cam, None, &mpi.planes).unwrap();
        assert_eq!(warped, mpi);
    }

    #[test]
    fn warp_rejects_mismatched_tables() {
        let rgb = gradient_rgb(2, 2);
        let depth = Array2::from_elem((2, 2), 2.0);
        let mpi = build_mpi(rgb.view(), depth.view(), 4, None).unwrap();
        let cam = CameraModel::new(pinhole(10.0, 10.0, 1.0, 1.0), Matrix4::identity(), 2, 2).unwrap();
        let other = PlaneTable::inverse_uniform(1.0, 3.0, 3).unwrap();
        assert!(matches!(warp_mpi(&mpi, &cam, &cam, None, &other), Err(Error::Dimension(_))));
    }
}
