//! Unsupervised flow losses: masked photometric error and edge-aware
//! smoothness.

use ndarray::{Array3, Axis};

use super::occlusion::OcclusionMask;
use super::{Flow3D, RealFlow};
use crate::error::{Error, Result};
use crate::geometry::bilinear_taps;
use crate::metrics::ssim;
use crate::mpi::MultiPlaneImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// MAE share of the photometric term.
    pub beta: f64,
    /// Edge sensitivity of the smoothness weight.
    pub edge_weight_a: f64,
    /// Smoothness multiplier in the total loss.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.15,
            edge_weight_a: 10.0,
            lambda: 10.0,
        }
    }
}

/// Per plane `β·MAE + (1 − β)(1 − SSIM)/2` on the colour of both MPIs
/// multiplied by `o`, averaged over planes.
pub fn photometric_loss(
    m_ref: &MultiPlaneImage,
    m_recon: &MultiPlaneImage,
    o: &OcclusionMask,
    beta: f64,
) -> Result<f64> {
    let (zn, h, w) = m_ref.dim();
    if m_recon.dim() != (zn, h, w) || o.0.dim() != (zn, h, w) {
        return Err(Error::dim(format!(
            "loss inputs disagree: {:?}, {:?}, mask {:?}",
            m_ref.dim(),
            m_recon.dim(),
            o.0.dim()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::domain(format!("beta = {beta} outside [0, 1]")));
    }
    if zn == 0 {
        return Ok(0.0);
    }
    if o.0.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for z in 0..zn {
        let mask = o.0.index_axis(Axis(0), z);
        let masked = |m: &MultiPlaneImage| {
            let c = m.color.index_axis(Axis(0), z);
            Array3::from_shape_fn((h, w, 3), |(y, x, ch)| c[(y, x, ch)] * mask[(y, x)])
        };
        let a = masked(m_ref);
        let b = masked(m_recon);
        let mae = a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        let s = ssim(a.view(), b.view())?;
        total += beta * mae + (1.0 - beta) * (1.0 - s) / 2.0;
    }
    Ok(total / zn as f64)
}

/// Mean over planes, pixels and the two in-plane axes of
/// `(1 − |∇α|)·exp(−a·|∇c|)·|∇u|`, with forward differences, `|∇c|` the
/// channel mean and `|∇u|` the mean over the three flow components.
pub fn smoothness_loss(flow: &RealFlow, m_ref: &MultiPlaneImage, edge_weight_a: f64) -> Result<f64> {
    let (zn, h, w) = m_ref.dim();
    if flow.dim() != (zn, h, w) {
        return Err(Error::dim(format!(
            "flow {:?} does not match MPI {:?}",
            flow.dim(),
            (zn, h, w)
        )));
    }
    let term = |z: usize, (y0, x0): (usize, usize), (y1, x1): (usize, usize)| {
        let da = (m_ref.alpha[(z, y1, x1)] - m_ref.alpha[(z, y0, x0)]).abs();
        let dc = (0..3)
            .map(|c| (m_ref.color[(z, y1, x1, c)] - m_ref.color[(z, y0, x0, c)]).abs())
            .sum::<f64>()
            / 3.0;
        let du = (0..3)
            .map(|c| (flow.0[(z, y1, x1, c)] - flow.0[(z, y0, x0, c)]).abs())
            .sum::<f64>()
            / 3.0;
        (1.0 - da) * (-edge_weight_a * dc).exp() * du
    };
    let mut axes = Vec::new();
    if w > 1 {
        let mut sum = 0.0;
        for z in 0..zn {
            for y in 0..h {
                for x in 0..w - 1 {
                    sum += term(z, (y, x), (y, x + 1));
                }
            }
        }
        axes.push(sum / (zn * h * (w - 1)) as f64);
    }
    if h > 1 {
        let mut sum = 0.0;
        for z in 0..zn {
            for y in 0..h - 1 {
                for x in 0..w {
                    sum += term(z, (y, x), (y + 1, x));
                }
            }
        }
        axes.push(sum / (zn * (h - 1) * w) as f64);
    }
    if axes.is_empty() || zn == 0 {
        return Ok(0.0);
    }
    Ok(axes.iter().sum::<f64>() / axes.len() as f64)
}

/// `L_ph + λ·L_smooth`.
pub fn total_flow_loss(
    m_ref: &MultiPlaneImage,
    m_recon: &MultiPlaneImage,
    o: &OcclusionMask,
    flow: &RealFlow,
    weights: &LossWeights,
) -> Result<f64> {
    let ph = photometric_loss(m_ref, m_recon, o, weights.beta)?;
    let sm = smoothness_loss(flow, m_ref, weights.edge_weight_a)?;
    Ok(combine(ph, sm, weights.lambda))
}

pub fn combine(photometric: f64, smoothness: f64, lambda: f64) -> f64 {
    photometric + lambda * smoothness
}

/// Rebuild the reference MPI by sampling `m_src` at each voxel's flow
/// target: bilinear in x-y, expectation over plane offsets. Colour is
/// sampled premultiplied and divided by the sampled alpha.
pub fn reconstruct_reference(m_src: &MultiPlaneImage, flow: &Flow3D) -> Result<MultiPlaneImage> {
    let (zn, h, w) = m_src.dim();
    if flow.dim() != (zn, h, w) {
        return Err(Error::dim(format!(
            "flow {:?} does not match MPI {:?}",
            flow.dim(),
            (zn, h, w)
        )));
    }
    let s_z = flow.s_z as i64;
    let mut out = MultiPlaneImage::empty(m_src.planes.clone(), h, w);
    for z in 0..zn {
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + flow.xy[(z, y, x, 0)];
                let sy = y as f64 + flow.xy[(z, y, x, 1)];
                let taps: Vec<_> = bilinear_taps(sx, sy, w, h).into_iter().collect();
                let (mut a, mut d) = (0.0f64, 0.0);
                let mut c = [0.0; 3];
                for i in 0..flow.window() {
                    let b = flow.depth_dist[(z, y, x, i)];
                    let tz = z as i64 + i as i64 - s_z;
                    if b == 0.0 || tz < 0 || tz >= zn as i64 {
                        continue;
                    }
                    let tz = tz as usize;
                    for &(tx, ty, wt) in &taps {
                        let k = b * wt * m_src.alpha[(tz, ty, tx)];
                        a += k;
                        d += k * m_src.depth[(tz, ty, tx)];
                        for (ch, v) in c.iter_mut().enumerate() {
                            *v += k * m_src.color[(tz, ty, tx, ch)];
                        }
                    }
                }
                if a > 0.0 {
                    out.alpha[(z, y, x)] = a.min(1.0);
                    out.depth[(z, y, x)] = d / a;
                    for (ch, v) in c.iter().enumerate() {
                        out.color[(z, y, x, ch)] = v / a;
                    }
                }
            }
        }
    }
    Ok(out)
}
