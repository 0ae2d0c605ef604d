//! Local 3D object motion between two MPIs in the same camera view.
//!
//! A [`Flow3D`] stores, per voxel, a real x-y displacement and a categorical
//! distribution over plane offsets `z' ∈ [-s_z, s_z]`. Flows point from the
//! reference MPI (the latest frame) to the source MPI (the camera-compensated
//! past frame): reference voxel `(x, z)` corresponds to source voxel
//! `(x + a, z + z')`.

pub mod correlation;
pub mod loss;
pub mod matcher;
pub mod network;
pub mod occlusion;
pub mod pconv;

use ndarray::{Array4, Axis, Zip};

use crate::error::{Error, Result};
use crate::geometry::FlowVector3;
use crate::mpi::PlaneTable;

pub use correlation::{masked_correlation, CostVolume, SearchWindow};
pub use loss::{photometric_loss, smoothness_loss, total_flow_loss, LossWeights};
pub use matcher::{estimate_flow_matcher, MatcherConfig};
pub use network::{estimate_flow_network, FlowNetworkConfig, FlowNetworkWeights};
pub use occlusion::{occlusion_mask, OcclusionMask};
pub use pconv::{partial_conv3, ConvLayer};

/// Tolerance on `Σ b = 1` for depth distributions.
pub const DIST_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Flow3D {
    /// `Z × H × W × 2` pixel displacements (x, y).
    pub xy: Array4<f64>,
    /// `Z × H × W × (2 s_z + 1)`; entry `i` is the probability of offset `i - s_z`.
    pub depth_dist: Array4<f64>,
    pub s_z: usize,
}

impl Flow3D {
    /// Zero x-y flow with all depth mass on offset 0.
    pub fn zeros(planes: usize, height: usize, width: usize, s_z: usize) -> Self {
        let win = 2 * s_z + 1;
        let mut depth_dist = Array4::zeros((planes, height, width, win));
        depth_dist.index_axis_mut(Axis(3), s_z).fill(1.0);
        Self {
            xy: Array4::zeros((planes, height, width, 2)),
            depth_dist,
            s_z,
        }
    }

    pub fn window(&self) -> usize {
        2 * self.s_z + 1
    }

    /// `(Z, H, W)`
    pub fn dim(&self) -> (usize, usize, usize) {
        let (z, h, w, _) = self.xy.dim();
        (z, h, w)
    }

    pub fn check(&self) -> Result<()> {
        let (z, h, w, c) = self.xy.dim();
        if c != 2 || self.depth_dist.dim() != (z, h, w, self.window()) {
            return Err(Error::dim(format!(
                "flow shapes disagree: xy {:?}, depth_dist {:?}, s_z {}",
                self.xy.dim(),
                self.depth_dist.dim(),
                self.s_z
            )));
        }
        Ok(())
    }

    /// Largest deviation of any depth distribution from unit mass.
    pub fn max_normalization_error(&self) -> f64 {
        self.depth_dist
            .lanes(Axis(3))
            .into_iter()
            .map(|l| (l.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn expected_offset(&self, z: usize, y: usize, x: usize) -> f64 {
        (0..self.window())
            .map(|i| self.depth_dist[(z, y, x, i)] * (i as f64 - self.s_z as f64))
            .sum()
    }

    /// Most probable plane offset; ties go to the smaller offset magnitude.
    pub fn mode_offset(&self, z: usize, y: usize, x: usize) -> i64 {
        let s = self.s_z as i64;
        let mut best = 0i64;
        let mut best_p = f64::NEG_INFINITY;
        for i in 0..self.window() {
            let off = i as i64 - s;
            let p = self.depth_dist[(z, y, x, i)];
            if p > best_p || (p == best_p && off.abs() < best.abs()) {
                best = off;
                best_p = p;
            }
        }
        best
    }

    fn sample_dist(&self, z: usize, x: f64, y: f64, out: &mut [f64]) {
        let (_, h, w) = self.dim();
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (xx, yy, wt) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            if wt == 0.0 {
                continue;
            }
            for (i, v) in out.iter_mut().enumerate() {
                *v += wt * self.depth_dist[(z, yy, xx, i)];
            }
        }
    }
}

/// Real-valued 3D flow `Z × H × W × 3` (dx, dy in pixels, dz in metres).
#[derive(Debug, Clone, PartialEq)]
pub struct RealFlow(pub Array4<f64>);

impl RealFlow {
    pub fn zeros(planes: usize, height: usize, width: usize) -> Self {
        Self(Array4::zeros((planes, height, width, 3)))
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> FlowVector3 {
        FlowVector3::new(self.0[(z, y, x, 0)], self.0[(z, y, x, 1)], self.0[(z, y, x, 2)])
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        let (z, h, w, _) = self.0.dim();
        (z, h, w)
    }
}

/// Convert a flow to real-valued 3D vectors: x-y is copied and the depth
/// component is `Σ b_{z'} d(z + z') - d(z)`, with `z + z'` clamped to the
/// plane range.
pub fn reduce_flow_to_real(flow: &Flow3D, planes: &PlaneTable) -> Result<RealFlow> {
    flow.check()?;
    let (zn, h, w) = flow.dim();
    if planes.len() != zn {
        return Err(Error::dim(format!(
            "plane table has {} planes, flow has {zn}",
            planes.len()
        )));
    }
    let s = flow.s_z as i64;
    let mut out = Array4::zeros((zn, h, w, 3));
    for z in 0..zn {
        let dz = planes.depth(z);
        for y in 0..h {
            for x in 0..w {
                out[(z, y, x, 0)] = flow.xy[(z, y, x, 0)];
                out[(z, y, x, 1)] = flow.xy[(z, y, x, 1)];
                let expect: f64 = (0..flow.window())
                    .map(|i| {
                        let zz = (z as i64 + i as i64 - s).clamp(0, zn as i64 - 1) as usize;
                        flow.depth_dist[(z, y, x, i)] * planes.depth(zz)
                    })
                    .sum();
                out[(z, y, x, 2)] = expect - dz;
            }
        }
    }
    Ok(RealFlow(out))
}

/// Compose a residual flow estimated at one scale onto the (already
/// upsampled) flow of the coarser scale.
///
/// x-y displacements add. The depth distribution is the expectation, under
/// the residual distribution, of the previous distribution sampled at the
/// residually displaced voxel, with the offsets summed and clamped into the
/// window.
pub fn compose_residual_flow(prev: &Flow3D, residual: &Flow3D) -> Result<Flow3D> {
    prev.check()?;
    residual.check()?;
    if prev.dim() != residual.dim() || prev.s_z != residual.s_z {
        return Err(Error::dim(format!(
            "cannot compose flows of shape {:?}/s_z={} and {:?}/s_z={}",
            prev.dim(),
            prev.s_z,
            residual.dim(),
            residual.s_z
        )));
    }
    let (zn, h, w) = prev.dim();
    let s = prev.s_z as i64;
    let win = prev.window();
    let mut out = Flow3D::zeros(zn, h, w, prev.s_z);
    let mut sampled = vec![0.0; win];
    let mut acc = vec![0.0; win];
    for z in 0..zn {
        for y in 0..h {
            for x in 0..w {
                let rx = residual.xy[(z, y, x, 0)];
                let ry = residual.xy[(z, y, x, 1)];
                out.xy[(z, y, x, 0)] = prev.xy[(z, y, x, 0)] + rx;
                out.xy[(z, y, x, 1)] = prev.xy[(z, y, x, 1)] + ry;
                acc.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..win {
                    let br = residual.depth_dist[(z, y, x, i)];
                    if br == 0.0 {
                        continue;
                    }
                    let off_r = i as i64 - s;
                    let zz = (z as i64 + off_r).clamp(0, zn as i64 - 1) as usize;
                    prev.sample_dist(zz, x as f64 + rx, y as f64 + ry, &mut sampled);
                    for (j, &p) in sampled.iter().enumerate() {
                        let total = (off_r + j as i64 - s).clamp(-s, s);
                        acc[(total + s) as usize] += br * p;
                    }
                }
                let mass: f64 = acc.iter().sum();
                for (i, &v) in acc.iter().enumerate() {
                    out.depth_dist[(z, y, x, i)] = if mass > 0.0 { v / mass } else { 0.0 };
                }
                if !(mass > 0.0) {
                    out.depth_dist[(z, y, x, prev.s_z)] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsampling {
    Nearest,
    Bilinear,
}

/// Resample a flow to `height × width` in x-y (planes untouched). x-y
/// displacements are resampled with `xy_mode` and multiplied by `scale`;
/// depth distributions always use nearest-neighbour.
pub fn upsample_flow(
    flow: &Flow3D,
    height: usize,
    width: usize,
    scale: f64,
    xy_mode: Upsampling,
) -> Flow3D {
    let (zn, h, w) = flow.dim();
    let win = flow.window();
    let ry = h as f64 / height as f64;
    let rx = w as f64 / width as f64;
    let mut out = Flow3D::zeros(zn, height, width, flow.s_z);
    for z in 0..zn {
        for y in 0..height {
            let ny = ((y as f64 * ry).floor() as usize).min(h - 1);
            for x in 0..width {
                let nx = ((x as f64 * rx).floor() as usize).min(w - 1);
                for i in 0..win {
                    out.depth_dist[(z, y, x, i)] = flow.depth_dist[(z, ny, nx, i)];
                }
                for c in 0..2 {
                    let v = match xy_mode {
                        Upsampling::Nearest => flow.xy[(z, ny, nx, c)],
                        Upsampling::Bilinear => {
                            let sy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (h - 1) as f64);
                            let sx = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (w - 1) as f64);
                            bilinear_channel(&flow.xy, z, sx, sy, c)
                        }
                    };
                    out.xy[(z, y, x, c)] = v * scale;
                }
            }
        }
    }
    out
}

/// Border-clamped bilinear read of channel `c` from a `Z × H × W × C` array.
pub(crate) fn bilinear_channel(a: &Array4<f64>, z: usize, x: f64, y: f64, c: usize) -> f64 {
    let (_, h, w, _) = a.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut v = 0.0;
    for (xx, yy, wt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if wt != 0.0 {
            v += wt * a[(z, yy, xx, c)];
        }
    }
    v
}

/// Linear motion model: the flow for `k_prime` steps into the future is
/// `-(k'/k)` times the flow estimated towards the frame `k` steps back.
pub fn extrapolate_flow(u: &RealFlow, k: usize, k_prime: usize) -> Result<RealFlow> {
    if k == 0 {
        return Err(Error::domain("past frame gap k must be at least 1"));
    }
    let factor = -(k_prime as f64 / k as f64);
    let mut out = u.0.clone();
    Zip::from(&mut out).for_each(|v| *v *= factor);
    Ok(RealFlow(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_flow(z: usize, h: usize, w: usize, s_z: usize, offset: i64, a: (f64, f64)) -> Flow3D {
        let mut f = Flow3D::zeros(z, h, w, s_z);
        f.depth_dist.fill(0.0);
        f.depth_dist
            .index_axis_mut(Axis(3), (offset + s_z as i64) as usize)
            .fill(1.0);
        f.xy.index_axis_mut(Axis(3), 0).fill(a.0);
        f.xy.index_axis_mut(Axis(3), 1).fill(a.1);
        f
    }

    #[test]
    fn reduce_stationary_and_unit_shift() {
        let planes = PlaneTable::inverse_uniform(1.0, 4.0, 3).unwrap();
        let f = one_hot_flow(3, 2, 2, 1, 0, (1.5, -2.0));
        let u = reduce_flow_to_real(&f, &planes).unwrap();
        assert_eq!(u.at(1, 0, 0), FlowVector3::new(1.5, -2.0, 0.0));
        let f = one_hot_flow(3, 2, 2, 1, 1, (0.0, 0.0));
        let u = reduce_flow_to_real(&f, &planes).unwrap();
        assert_eq!(u.at(0, 1, 1).dz, planes.depth(1) - planes.depth(0));
        // boundary plane clamps onto itself
        assert_eq!(u.at(2, 0, 0).dz, 0.0);
    }

    #[test]
    fn reduce_half_half_mixture() {
        let planes = PlaneTable::from_depths(vec![1.0, 2.0, 4.0]).unwrap();
        let mut f = Flow3D::zeros(3, 1, 1, 1);
        f.depth_dist[(1, 0, 0, 0)] = 0.5;
        f.depth_dist[(1, 0, 0, 1)] = 0.5;
        f.depth_dist[(1, 0, 0, 2)] = 0.0;
        let u = reduce_flow_to_real(&f, &planes).unwrap();
        assert_eq!(u.at(1, 0, 0).dz, -0.5);
    }

    #[test]
    fn compose_identities() {
        let mut prev = one_hot_flow(3, 4, 5, 1, 1, (2.0, -1.0));
        prev.depth_dist[(1, 2, 2, 0)] = 0.25;
        prev.depth_dist[(1, 2, 2, 2)] = 0.75;
        let zero = Flow3D::zeros(3, 4, 5, 1);
        assert_eq!(compose_residual_flow(&prev, &zero).unwrap(), prev);
        assert_eq!(compose_residual_flow(&zero, &prev).unwrap(), prev);
    }

    #[test]
    fn compose_shifts_add_and_clamp() {
        let a = one_hot_flow(5, 3, 3, 1, 1, (0.0, 0.0));
        let c = compose_residual_flow(&a, &a).unwrap();
        // +1 then +1 clamps to the window edge +1
        assert_eq!(c.mode_offset(2, 1, 1), 1);
        assert_eq!(c.depth_dist[(2, 1, 1, 2)], 1.0);
        let b = one_hot_flow(5, 3, 3, 2, 1, (0.0, 0.0));
        let c = compose_residual_flow(&b, &b).unwrap();
        assert_eq!(c.mode_offset(2, 1, 1), 2);
    }

    #[test]
    fn compose_rejects_mismatched() {
        let a = Flow3D::zeros(2, 3, 3, 1);
        let b = Flow3D::zeros(2, 3, 4, 1);
        assert!(compose_residual_flow(&a, &b).is_err());
    }

    #[test]
    fn upsample_doubles_displacements() {
        let f = one_hot_flow(2, 2, 2, 1, -1, (1.0, 3.0));
        let up = upsample_flow(&f, 4, 4, 2.0, Upsampling::Nearest);
        assert!(up.xy.index_axis(Axis(3), 0).iter().all(|&v| v == 2.0));
        assert!(up.xy.index_axis(Axis(3), 1).iter().all(|&v| v == 6.0));
        assert_eq!(up.mode_offset(1, 3, 3), -1);
        let up = upsample_flow(&f, 3, 3, 2.0, Upsampling::Bilinear);
        assert!(up.xy.index_axis(Axis(3), 0).iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn extrapolation_arithmetic() {
        let mut u = RealFlow::zeros(1, 1, 1);
        u.0[(0, 0, 0, 0)] = 4.0;
        u.0[(0, 0, 0, 1)] = -2.0;
        u.0[(0, 0, 0, 2)] = 0.5;
        let e = extrapolate_flow(&u, 2, 1).unwrap();
        assert_eq!(e.at(0, 0, 0), FlowVector3::new(-2.0, 1.0, -0.25));
        let e = extrapolate_flow(&u, 2, 0).unwrap();
        assert!(e.0.iter().all(|&v| v == 0.0));
        assert!(matches!(extrapolate_flow(&u, 0, 1), Err(Error::Domain(_))));
    }
}
