//! Disocclusion infilling for warped MPIs.
//!
//! Each hole voxel gets a 2D vector pointing at a known voxel in the same
//! plane and copies its colour, alpha and depth from there. Vectors come
//! either from a nearest-valid search or from a small 3D U-Net.

use ndarray::{concatenate, s, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::pconv::{activate, conv3d, Activation, ConvLayer};
use crate::mpi::MultiPlaneImage;
use crate::weights::NamedTensors;

/// Pixels whose alpha summed over planes is below this are holes; voxels
/// with at least this alpha can be copied from.
pub const HOLE_EPSILON: f64 = 1e-6;

/// RGB·α and α.
pub const INFILL_INPUT_CHANNELS: usize = 4;

/// Default number of infill passes.
pub const DEFAULT_ITERATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct InfillVectors {
    /// `Z × H × W × 2` offsets `(dx, dy)`; zero off the holes.
    pub vectors: Array4<f64>,
    /// `Z × H × W`, 1 on hole voxels.
    pub disocclusion_mask: Array3<f64>,
}

#[derive(Debug, Clone)]
pub enum InfillMethod {
    NearestValid,
    Network(Box<InfillNetworkWeights>),
}

/// 1 at every plane of each pixel whose total alpha is below
/// [`HOLE_EPSILON`].
pub fn detect_disocclusions(mpi: &MultiPlaneImage) -> Array3<f64> {
    let (z, h, w) = mpi.dim();
    let sum = mpi.alpha_sum();
    Array3::from_shape_fn((z, h, w), |(_, y, x)| if sum[(y, x)] < HOLE_EPSILON { 1.0 } else { 0.0 })
}

/// Voxels that receive a copy: on a hole pixel and fully transparent.
fn fillable(mpi: &MultiPlaneImage, mask: &Array3<f64>, p: usize, y: usize, x: usize) -> bool {
    mask[(p, y, x)] == 1.0 && mpi.alpha[(p, y, x)] == 0.0
}

/// Offset from each hole voxel to the nearest copyable voxel of its plane
/// (Euclidean, ties to the first in scanline order). Holes are filled on
/// the farthest plane that has any copyable voxel, since a disocclusion
/// uncovers what lies behind; the mask is cleared on the other planes.
/// Planes without any copyable voxel get zero vectors.
pub fn nearest_valid_vectors(mpi: &MultiPlaneImage) -> InfillVectors {
    let (z, h, w) = mpi.dim();
    let mut mask = detect_disocclusions(mpi);
    let fill_plane = (0..z)
        .rev()
        .find(|&p| mpi.alpha.index_axis(Axis(0), p).iter().any(|&a| a >= HOLE_EPSILON));
    for (p, mut plane) in mask.axis_iter_mut(Axis(0)).enumerate() {
        if Some(p) != fill_plane {
            plane.fill(0.0);
        }
    }
    let mut vectors = Array4::zeros((z, h, w, 2));
    vectors
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut plane)| {
            let source = |y: i64, x: i64| {
                y >= 0
                    && x >= 0
                    && (y as usize) < h
                    && (x as usize) < w
                    && mpi.alpha[(p, y as usize, x as usize)] >= HOLE_EPSILON
            };
            if !mpi.alpha.index_axis(Axis(0), p).iter().any(|&a| a >= HOLE_EPSILON) {
                return;
            }
            for y in 0..h {
                for x in 0..w {
                    if !fillable(mpi, &mask, p, y, x) {
                        continue;
                    }
                    // Rings of growing Chebyshev radius; a ring at radius r
                    // cannot beat a squared distance below r².
                    let mut best: Option<(i64, i64, i64)> = None;
                    for r in 1..=(h.max(w) as i64) {
                        if best.is_some_and(|(d2, _, _)| r * r > d2) {
                            break;
                        }
                        let (cy, cx) = (y as i64, x as i64);
                        for yy in cy - r..=cy + r {
                            let edge_row = yy == cy - r || yy == cy + r;
                            let step = if edge_row { 1 } else { (2 * r) as usize };
                            for xx in (cx - r..=cx + r).step_by(step) {
                                if !source(yy, xx) {
                                    continue;
                                }
                                let d2 = (yy - cy).pow(2) + (xx - cx).pow(2);
                                if best.is_none_or(|b| (d2, yy, xx) < b) {
                                    best = Some((d2, yy, xx));
                                }
                            }
                        }
                    }
                    if let Some((_, sy, sx)) = best {
                        plane[(y, x, 0)] = (sx - x as i64) as f64;
                        plane[(y, x, 1)] = (sy - y as i64) as f64;
                    }
                }
            }
        });
    InfillVectors {
        vectors,
        disocclusion_mask: mask,
    }
}

/// Copy colour, alpha and depth along the vectors into fully transparent
/// hole voxels. Targets are rounded to the nearest pixel and clamped into
/// the frame; every other voxel is left as is.
pub fn apply_infill_vectors(mpi: &MultiPlaneImage, v: &InfillVectors) -> Result<MultiPlaneImage> {
    let (z, h, w) = mpi.dim();
    if v.vectors.dim() != (z, h, w, 2) || v.disocclusion_mask.dim() != (z, h, w) {
        return Err(Error::dim(format!(
            "infill vectors {:?} do not match MPI {:?}",
            v.vectors.dim(),
            mpi.dim()
        )));
    }
    let mut out = mpi.clone();
    for p in 0..z {
        for y in 0..h {
            for x in 0..w {
                if !fillable(mpi, &v.disocclusion_mask, p, y, x) {
                    continue;
                }
                let sx = (x as f64 + v.vectors[(p, y, x, 0)]).round().clamp(0.0, (w - 1) as f64) as usize;
                let sy = (y as f64 + v.vectors[(p, y, x, 1)]).round().clamp(0.0, (h - 1) as f64) as usize;
                out.alpha[(p, y, x)] = mpi.alpha[(p, sy, sx)];
                out.depth[(p, y, x)] = mpi.depth[(p, sy, sx)];
                for c in 0..3 {
                    out.color[(p, y, x, c)] = mpi.color[(p, sy, sx, c)];
                }
            }
        }
    }
    Ok(out)
}

/// One infill pass.
pub fn infill_step(mpi: &MultiPlaneImage, method: &InfillMethod) -> Result<MultiPlaneImage> {
    mpi.check()?;
    let vectors = match method {
        InfillMethod::NearestValid => nearest_valid_vectors(mpi),
        InfillMethod::Network(weights) => network_vectors(mpi, weights)?,
    };
    apply_infill_vectors(mpi, &vectors)
}

/// `g` infill passes, each fed the previous result.
pub fn infill_iterative(mpi: &MultiPlaneImage, method: &InfillMethod, g: usize) -> Result<MultiPlaneImage> {
    if g == 0 {
        return Err(Error::Config("infill needs at least one iteration".into()));
    }
    let mut cur = infill_step(mpi, method)?;
    for _ in 1..g {
        cur = infill_step(&cur, method)?;
    }
    Ok(cur)
}

/// Output filters of the nine U-Net layers.
pub const INFILL_FILTERS: [usize; 9] = [32, 64, 128, 128, 128, 128, 64, 32, 2];

/// Weights of the infilling U-Net. Layers 1–5 encode (layers 2–5 halve x-y),
/// layers 6–9 each upsample ×2 in x-y, concatenate the matching encoder
/// output (4, 3, 2, 1) and convolve. ReLU everywhere except the linear
/// 2-channel output.
#[derive(Debug, Clone, PartialEq)]
pub struct InfillNetworkWeights {
    pub layers: Vec<ConvLayer>,
}

impl InfillNetworkWeights {
    pub fn zeros() -> Self {
        let f = INFILL_FILTERS;
        let down = |i, o, k: usize, stride| ConvLayer::zeros(i, o, [k; 3], [1, stride, stride], [k / 2; 3]);
        let up = |i, o| ConvLayer::zeros(i, o, [3; 3], [1, 1, 1], [1; 3]);
        let layers = vec![
            down(INFILL_INPUT_CHANNELS, f[0], 7, 1),
            down(f[0], f[1], 5, 2),
            down(f[1], f[2], 3, 2),
            down(f[2], f[3], 3, 2),
            down(f[3], f[4], 3, 2),
            up(f[4] + f[3], f[5]),
            up(f[5] + f[2], f[6]),
            up(f[6] + f[1], f[7]),
            up(f[7] + f[0], f[8]),
        ];
        Self { layers }
    }

    pub fn seeded(seed: u64) -> Self {
        let mut w = Self::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut w.layers {
            layer.randomize(&mut rng);
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros();
        if self.layers.len() != reference.layers.len() {
            return Err(Error::Config(format!(
                "infill network needs {} layers, got {}",
                reference.layers.len(),
                self.layers.len()
            )));
        }
        for (i, (a, b)) in self.layers.iter().zip(&reference.layers).enumerate() {
            a.validate()?;
            if (a.in_channels, a.out_channels, a.kernel, a.stride, a.padding)
                != (b.in_channels, b.out_channels, b.kernel, b.stride, b.padding)
            {
                return Err(Error::Config(format!("infill.{} does not match the architecture", i + 1)));
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let mut t = NamedTensors::default();
        for (i, layer) in self.layers.iter().enumerate() {
            t.insert_layer(&format!("infill.{}", i + 1), layer);
        }
        t
    }

    pub fn from_tensors(t: &NamedTensors) -> Result<Self> {
        let mut w = Self::zeros();
        for (i, layer) in w.layers.iter_mut().enumerate() {
            t.load_layer(&format!("infill.{}", i + 1), layer)?;
        }
        Ok(w)
    }
}

/// Nearest ×2 in x-y, cropped to `(h, w)`.
fn upsample2(x: &Array4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (c, z, ch, cw) = x.dim();
    Array4::from_shape_fn((c, z, h, w), |(k, p, y, xx)| x[(k, p, (y / 2).min(ch - 1), (xx / 2).min(cw - 1))])
}

/// Run the U-Net and return its vectors on the hole voxels.
pub fn network_vectors(mpi: &MultiPlaneImage, weights: &InfillNetworkWeights) -> Result<InfillVectors> {
    weights.validate()?;
    let (z, h, w) = mpi.dim();
    let input = Array4::from_shape_fn((INFILL_INPUT_CHANNELS, z, h, w), |(c, p, y, x)| {
        let a = mpi.alpha[(p, y, x)];
        if c < 3 {
            mpi.color[(p, y, x, c)] * a
        } else {
            a
        }
    });
    let l = &weights.layers;
    let relu = |x| activate(x, Activation::Relu);
    let mut skips = vec![relu(conv3d(input.view(), &l[0])?)];
    for layer in &l[1..5] {
        let next = relu(conv3d(skips.last().unwrap().view(), layer)?);
        skips.push(next);
    }
    let mut x = skips.pop().unwrap();
    for (i, layer) in l[5..].iter().enumerate() {
        let skip = &skips[skips.len() - 1 - i];
        let (_, _, sh, sw) = skip.dim();
        let up = upsample2(&x, sh, sw);
        let cat = concatenate(Axis(0), &[up.view(), skip.view()]).map_err(|e| Error::dim(e.to_string()))?;
        let y = conv3d(cat.view(), layer)?;
        x = if i == 3 { y } else { relu(y) };
    }
    let mask = detect_disocclusions(mpi);
    let mut vectors = x.slice(s![0..2, .., .., ..]).permuted_axes([1, 2, 3, 0]).to_owned();
    for ((p, y, xx, _), v) in vectors.indexed_iter_mut() {
        if mask[(p, y, xx)] == 0.0 {
            *v = 0.0;
        }
    }
    Ok(InfillVectors {
        vectors,
        disocclusion_mask: mask,
    })
}
