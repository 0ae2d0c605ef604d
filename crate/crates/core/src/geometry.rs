//! Pinhole cameras, pose reprojection and forward bilinear splatting.
//!
//! Poses are world-to-camera rigid transforms and depth is the positive z
//! coordinate in the camera frame. Pixel coordinates place integer values at
//! pixel centres, so pixel `(i, j)` is column `i`, row `j`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3, Vector4};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Accumulated splat weight at or below this marks a pixel as a hole.
pub const SPLAT_EPSILON: f64 = 1e-6;

/// Splat targets this close to an integer grid position are snapped onto it,
/// so round-off from the reprojection does not leak sub-epsilon mass into the
/// neighbouring pixels.
pub const SPLAT_SNAP: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    /// World-to-camera transform.
    pub pose: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        pose: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        validate_intrinsics(&intrinsics)?;
        validate_pose(&pose)?;
        Ok(Self {
            intrinsics,
            pose,
            width,
            height,
        })
    }

    /// Camera at the world origin looking down +z.
    pub fn identity(intrinsics: Matrix3<f64>, width: usize, height: usize) -> Result<Self> {
        Self::new(intrinsics, Matrix4::identity(), width, height)
    }

    pub fn with_pose(&self, pose: Matrix4<f64>) -> Result<Self> {
        Self::new(self.intrinsics, pose, self.width, self.height)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }
}

pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
}

/// Build a world-to-camera pose from an axis-angle rotation and a translation.
pub fn rigid_transform(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Matrix4<f64> {
    let r = Rotation3::new(axis_angle);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
    m
}

/// Inverse of a rigid transform, computed as `[Rᵀ | -Rᵀt]`.
pub fn invert_rigid(t: &Matrix4<f64>) -> Matrix4<f64> {
    let r = t.fixed_view::<3, 3>(0, 0).transpose();
    let trans = -(r * t.fixed_view::<3, 1>(0, 3));
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
    m
}

pub fn validate_intrinsics(k: &Matrix3<f64>) -> Result<()> {
    let finite = k.iter().all(|v| v.is_finite());
    if !finite
        || k[(1, 0)] != 0.0
        || k[(2, 0)] != 0.0
        || k[(2, 1)] != 0.0
        || k[(2, 2)] != 1.0
        || k[(0, 0)] <= 0.0
        || k[(1, 1)] <= 0.0
    {
        return Err(Error::domain(format!(
            "intrinsics must be upper-triangular with positive focal lengths and K[2][2] = 1, got {k}"
        )));
    }
    Ok(())
}

pub fn validate_pose(t: &Matrix4<f64>) -> Result<()> {
    if !t.iter().all(|v| v.is_finite()) {
        return Err(Error::domain("pose contains non-finite entries"));
    }
    if t.fixed_view::<1, 4>(3, 0) != Vector4::new(0.0, 0.0, 0.0, 1.0).transpose() {
        return Err(Error::domain("pose last row must be (0, 0, 0, 1)"));
    }
    let r = t.fixed_view::<3, 3>(0, 0);
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(Error::domain(format!(
            "pose rotation is not orthonormal (|RᵀR - I| = {err:e})"
        )));
    }
    Ok(())
}

/// Per-point 3D displacement: `dx`, `dy` in pixels, `dz` in metres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowVector3 {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl FlowVector3 {
    pub const ZERO: Self = Self {
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dz: f64) -> Self {
        Self { dx, dy, dz }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dz.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Precomputed `K_dst · T_dst · T_src⁻¹ · K_src⁻¹` for repeated reprojection
/// between one pair of views.
#[derive(Debug, Clone)]
pub struct Reprojector {
    k_src_inv: Matrix3<f64>,
    k_dst: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    identity: bool,
}

impl Reprojector {
    pub fn new(src: &CameraModel, dst: &CameraModel) -> Self {
        let rel = dst.pose * invert_rigid(&src.pose);
        let k_src_inv = src
            .intrinsics
            .try_inverse()
            .expect("validated intrinsics are invertible");
        Self {
            k_src_inv,
            k_dst: dst.intrinsics,
            rotation: rel.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: rel.fixed_view::<3, 1>(0, 3).into_owned(),
            identity: src.pose == dst.pose && src.intrinsics == dst.intrinsics,
        }
    }

    /// True when source and destination views coincide; such warps only
    /// apply the flow and are exact.
    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn project(&self, x: f64, y: f64, depth: f64, u: FlowVector3) -> Result<Projection> {
        let d = depth + u.dz;
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::DegenerateProjection(d));
        }
        let (sx, sy) = (x + u.dx, y + u.dy);
        if self.identity {
            return Ok(Projection { x: sx, y: sy, depth: d });
        }
        let p_src = self.k_src_inv * Vector3::new(sx, sy, 1.0) * d;
        let p_dst = self.rotation * p_src + self.translation;
        let z = p_dst.z;
        if !(z > 0.0) {
            return Err(Error::BehindCamera(z));
        }
        let h = self.k_dst * p_dst;
        Ok(Projection {
            x: h.x / h.z,
            y: h.y / h.z,
            depth: z,
        })
    }
}

/// Map pixel `x` at `depth` in view `src`, displaced by the local flow `u`,
/// into view `dst`. Returns real-valued pixel coordinates (possibly outside
/// the image) and the depth in the destination camera.
pub fn reproject_point(
    x: [f64; 2],
    depth: f64,
    u: FlowVector3,
    src: &CameraModel,
    dst: &CameraModel,
) -> Result<Projection> {
    if !(depth > 0.0) {
        return Err(Error::DegenerateProjection(depth));
    }
    Reprojector::new(src, dst).project(x[0], x[1], depth, u)
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SPLAT_SNAP {
        r
    } else {
        v
    }
}

/// Bilinear taps of a real-valued position: up to four `(col, row, weight)`
/// entries with non-zero weight that fall inside a `width × height` grid.
#[inline]
pub(crate) fn bilinear_taps(
    x: f64,
    y: f64,
    width: usize,
    height: usize,
) -> impl Iterator<Item = (usize, usize, f64)> {
    let x = snap(x);
    let y = snap(y);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    taps.into_iter().filter_map(move |(tx, ty, w)| {
        (w > 0.0 && tx >= 0 && ty >= 0 && (tx as usize) < width && (ty as usize) < height)
            .then_some((tx as usize, ty as usize, w))
    })
}

/// Scatter accumulator for forward bilinear splatting of a multi-channel
/// payload onto a `height × width` grid.
#[derive(Debug, Clone)]
pub struct SplatAccumulator {
    width: usize,
    height: usize,
    channels: usize,
    payload: Vec<f64>,
    weight: Vec<f64>,
    kernel: Vec<f64>,
    coverage: Vec<f64>,
}

impl SplatAccumulator {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            payload: vec![0.0; width * height * channels],
            weight: vec![0.0; width * height],
            kernel: vec![0.0; width * height],
            coverage: vec![0.0; width * height],
        }
    }

    /// Distribute `values` with weight `w` onto the four neighbours of
    /// `(x, y)`. Taps outside the grid are dropped.
    pub fn add(&mut self, x: f64, y: f64, values: &[f64], w: f64) {
        self.add_with_area(x, y, values, w, 1.0);
    }

    /// Like [`add`](Self::add) for a source sample covering `area` target
    /// pixels, which only feeds the coverage map.
    pub fn add_with_area(&mut self, x: f64, y: f64, values: &[f64], w: f64, area: f64) {
        debug_assert_eq!(values.len(), self.channels);
        if !(w > 0.0) || !x.is_finite() || !y.is_finite() {
            return;
        }
        for (tx, ty, bw) in bilinear_taps(x, y, self.width, self.height) {
            let tw = bw * w;
            let idx = ty * self.width + tx;
            self.weight[idx] += tw;
            self.kernel[idx] += bw;
            self.coverage[idx] += bw * area;
            let base = idx * self.channels;
            for (acc, v) in self.payload[base..base + self.channels].iter_mut().zip(values) {
                *acc += tw * v;
            }
        }
    }

    pub fn finish(self) -> SplatOutput {
        let Self {
            width,
            height,
            channels,
            mut payload,
            weight,
            kernel,
            coverage,
        } = self;
        let mut valid = Array2::from_elem((height, width), false);
        for (idx, &w) in weight.iter().enumerate() {
            let slot = &mut payload[idx * channels..(idx + 1) * channels];
            if w > SPLAT_EPSILON {
                valid[(idx / width, idx % width)] = true;
                slot.iter_mut().for_each(|v| *v /= w);
            } else {
                slot.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        SplatOutput {
            payload: Array3::from_shape_vec((height, width, channels), payload)
                .expect("accumulator sized from its own dimensions"),
            weight: Array2::from_shape_vec((height, width), weight)
                .expect("accumulator sized from its own dimensions"),
            kernel: Array2::from_shape_vec((height, width), kernel)
                .expect("accumulator sized from its own dimensions"),
            coverage: Array2::from_shape_vec((height, width), coverage)
                .expect("accumulator sized from its own dimensions"),
            valid,
        }
    }
}

/// Result of a forward splat: payload normalised by accumulated weight, the
/// raw accumulated weight, and a validity map (false marks holes).
#[derive(Debug, Clone)]
pub struct SplatOutput {
    pub payload: Array3<f64>,
    pub weight: Array2<f64>,
    /// Accumulated bilinear kernel mass, ignoring the per-source weights.
    pub kernel: Array2<f64>,
    /// Kernel mass scaled by each sample's footprint area; about 1 inside a
    /// splatted surface and fractional along its edges.
    pub coverage: Array2<f64>,
    pub valid: Array2<bool>,
}

/// Forward-warp a `H × W × C` payload with per-pixel weights to the real
/// valued target coordinates `coords` (`H × W × 2`, x then y).
pub fn splat_forward(
    values: ArrayView3<f64>,
    weights: ArrayView2<f64>,
    coords: ArrayView3<f64>,
    target_size: (usize, usize),
) -> Result<SplatOutput> {
    let (h, w, c) = values.dim();
    if weights.dim() != (h, w) || coords.dim() != (h, w, 2) {
        return Err(Error::dim(format!(
            "splat inputs disagree: values {:?}, weights {:?}, coords {:?}",
            values.dim(),
            weights.dim(),
            coords.dim()
        )));
    }
    let (tw, th) = target_size;
    let mut acc = SplatAccumulator::new(tw, th, c);
    let mut buf = vec![0.0; c];
    for row in 0..h {
        for col in 0..w {
            let wt = weights[(row, col)];
            if wt <= 0.0 {
                continue;
            }
            let (x, y) = (coords[(row, col, 0)], coords[(row, col, 1)]);
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::domain(format!(
                    "non-finite splat target at ({col}, {row})"
                )));
            }
            for (ch, slot) in buf.iter_mut().enumerate() {
                *slot = values[(row, col, ch)];
            }
            acc.add(x, y, &buf, wt);
        }
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn cam(pose: Matrix4<f64>) -> CameraModel {
        CameraModel::new(pinhole(100.0, 100.0, 50.0, 50.0), pose, 100, 100).unwrap()
    }

    #[test]
    fn identity_pose_returns_input() {
        let c = cam(Matrix4::identity());
        let p = reproject_point([10.0, 20.0], 2.0, FlowVector3::ZERO, &c, &c).unwrap();
        assert_eq!((p.x, p.y, p.depth), (10.0, 20.0, 2.0));
    }

    #[test]
    fn rotation_about_optical_axis() {
        let src = cam(Matrix4::identity());
        let dst = cam(rigid_transform(
            Vector3::new(0.0, 0.0, std::f64::consts::PI),
            Vector3::zeros(),
        ));
        let p = reproject_point([0.0, 0.0], 1.0, FlowVector3::ZERO, &src, &dst).unwrap();
        assert_abs_diff_eq!(p.x, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.y, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.depth, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lateral_translation_shifts_by_focal_times_baseline_over_depth() {
        let src = cam(Matrix4::identity());
        // world-to-camera translation of -t moves the camera centre by +t
        let t = 0.3;
        let dst = cam(rigid_transform(Vector3::zeros(), Vector3::new(-t, 0.0, 0.0)));
        let d = 4.0;
        let p = reproject_point([30.0, 40.0], d, FlowVector3::ZERO, &src, &dst).unwrap();
        assert_abs_diff_eq!(p.x, 30.0 - 100.0 * t / d, epsilon = 1e-9);
        assert_abs_diff_eq!(p.y, 40.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_and_behind_camera() {
        let c = cam(Matrix4::identity());
        assert!(matches!(
            reproject_point([1.0, 1.0], 1.0, FlowVector3::new(0.0, 0.0, -1.0), &c, &c),
            Err(Error::DegenerateProjection(_))
        ));
        let behind = cam(rigid_transform(Vector3::zeros(), Vector3::new(0.0, 0.0, -5.0)));
        assert!(matches!(
            reproject_point([50.0, 50.0], 2.0, FlowVector3::ZERO, &c, &behind),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn invalid_camera_rejected() {
        let mut k = pinhole(100.0, 100.0, 50.0, 50.0);
        k[(2, 2)] = 2.0;
        assert!(CameraModel::new(k, Matrix4::identity(), 10, 10).is_err());
        let mut t = Matrix4::identity();
        t[(0, 0)] = 2.0;
        assert!(CameraModel::new(pinhole(1.0, 1.0, 0.0, 0.0), t, 10, 10).is_err());
    }

    #[test]
    fn half_pixel_splat_splits_evenly() {
        let values = Array3::from_elem((1, 1, 1), 1.0);
        let weights = Array2::from_elem((1, 1), 1.0);
        let coords = Array3::from_shape_vec((1, 1, 2), vec![0.5, 0.0]).unwrap();
        let out = splat_forward(values.view(), weights.view(), coords.view(), (3, 1)).unwrap();
        assert_eq!(out.weight[(0, 0)], 0.5);
        assert_eq!(out.weight[(0, 1)], 0.5);
        assert_eq!(out.payload[(0, 0, 0)], 1.0);
        assert_eq!(out.payload[(0, 1, 0)], 1.0);
        assert!(!out.valid[(0, 2)]);
    }

    #[test]
    fn colliding_samples_average() {
        let values = Array3::from_shape_vec((1, 2, 1), vec![2.0, 4.0]).unwrap();
        let weights = Array2::from_elem((1, 2), 1.0);
        let coords = Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let out = splat_forward(values.view(), weights.view(), coords.view(), (2, 1)).unwrap();
        assert_eq!(out.payload[(0, 1, 0)], 3.0);
        assert!(!out.valid[(0, 0)]);
    }

    #[test]
    fn integer_identity_splat_is_exact() {
        let values = Array3::from_shape_fn((3, 4, 2), |(r, c, ch)| (r * 7 + c * 3 + ch) as f64 * 0.1);
        let weights = Array2::from_elem((3, 4), 1.0);
        let coords = Array3::from_shape_fn((3, 4, 2), |(r, c, k)| if k == 0 { c as f64 } else { r as f64 });
        let out = splat_forward(values.view(), weights.view(), coords.view(), (4, 3)).unwrap();
        assert_eq!(out.payload, values);
        assert!(out.valid.iter().all(|&v| v));
    }

    #[test]
    fn out_of_bounds_dropped_and_shape_checked() {
        let values = Array3::from_elem((1, 1, 1), 1.0);
        let weights = Array2::from_elem((1, 1), 1.0);
        let coords = Array3::from_shape_vec((1, 1, 2), vec![-3.0, 0.0]).unwrap();
        let out = splat_forward(values.view(), weights.view(), coords.view(), (2, 2)).unwrap();
        assert_eq!(out.weight.sum(), 0.0);
        let bad = Array2::from_elem((2, 1), 1.0);
        assert!(matches!(
            splat_forward(values.view(), bad.view(), coords.view(), (2, 2)),
            Err(Error::Dimension(_))
        ));
    }
}
