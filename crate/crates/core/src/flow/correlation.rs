//! Masked correlation cost volumes.

use ndarray::{Array4, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchWindow {
    pub radius_xy: usize,
    pub s_z: usize,
}

impl SearchWindow {
    pub fn new(radius_xy: usize, s_z: usize) -> Self {
        Self { radius_xy, s_z }
    }

    pub fn side(&self) -> usize {
        2 * self.radius_xy + 1
    }

    /// Number of displacements `(2r + 1)² (2 s_z + 1)`.
    pub fn len(&self) -> usize {
        self.side() * self.side() * (2 * self.s_z + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, dz: i64, dy: i64, dx: i64) -> usize {
        let r = self.radius_xy as i64;
        let side = self.side() as i64;
        (((dz + self.s_z as i64) * side + (dy + r)) * side + (dx + r)) as usize
    }

    /// `(dz, dy, dx)` for a displacement index.
    pub fn displacement(&self, idx: usize) -> (i64, i64, i64) {
        let side = self.side();
        let dx = (idx % side) as i64 - self.radius_xy as i64;
        let dy = ((idx / side) % side) as i64 - self.radius_xy as i64;
        let dz = (idx / (side * side)) as i64 - self.s_z as i64;
        (dz, dy, dx)
    }
}

/// Scores and validity for every reference voxel and displacement,
/// both shaped `D × Z × H × W` with `D = window.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub scores: Array4<f64>,
    pub validity: Array4<f64>,
    pub window: SearchWindow,
}

/// Correlate `h1` (with mask `mask1`) against displaced voxels of `h2`:
/// `cv = (h1·α1)ᵀ(h2·α2) / C` and `α_cv = α1·α2`. Displacements leaving the
/// volume have validity 0.
pub fn masked_correlation(
    h1: ArrayView4<f64>,
    mask1: ArrayView3<f64>,
    h2: ArrayView4<f64>,
    mask2: ArrayView3<f64>,
    window: SearchWindow,
) -> Result<CostVolume> {
    check_inputs(h1, mask1, h2, mask2)?;
    let (_, z, h, w) = h1.dim();
    if window.radius_xy >= h.max(w) || window.s_z >= z {
        return Err(Error::domain(format!(
            "search window (r = {}, s_z = {}) does not fit a {z}×{h}×{w} volume",
            window.radius_xy, window.s_z
        )));
    }
    Ok(correlate(h1, Some(mask1), h2, Some(mask2), window))
}

/// Plain correlation `h1ᵀh2 / C`; validity only reflects volume bounds.
pub fn dense_correlation(
    h1: ArrayView4<f64>,
    h2: ArrayView4<f64>,
    window: SearchWindow,
) -> Result<CostVolume> {
    if h1.dim() != h2.dim() {
        return Err(Error::dim(format!(
            "feature volumes differ: {:?} vs {:?}",
            h1.dim(),
            h2.dim()
        )));
    }
    Ok(correlate(h1, None, h2, None, window))
}

fn check_inputs(
    h1: ArrayView4<f64>,
    mask1: ArrayView3<f64>,
    h2: ArrayView4<f64>,
    mask2: ArrayView3<f64>,
) -> Result<()> {
    let (_, z, h, w) = h1.dim();
    if h1.dim() != h2.dim() || mask1.dim() != (z, h, w) || mask2.dim() != (z, h, w) {
        return Err(Error::dim(format!(
            "correlation inputs disagree: h1 {:?}, h2 {:?}, masks {:?}/{:?}",
            h1.dim(),
            h2.dim(),
            mask1.dim(),
            mask2.dim()
        )));
    }
    Ok(())
}

/// Correlation without the window-size check, for pyramid levels that can
/// be smaller than the search radius.
pub(crate) fn correlate(
    h1: ArrayView4<f64>,
    mask1: Option<ArrayView3<f64>>,
    h2: ArrayView4<f64>,
    mask2: Option<ArrayView3<f64>>,
    window: SearchWindow,
) -> CostVolume {
    let (c, z, h, w) = h1.dim();
    let d = window.len();
    let norm = 1.0 / c.max(1) as f64;
    let m1 = |p: (usize, usize, usize)| mask1.map_or(1.0, |m| m[p]);
    let m2 = |p: (usize, usize, usize)| mask2.map_or(1.0, |m| m[p]);
    let mut scores = Array4::<f64>::zeros((d, z, h, w));
    let mut validity = Array4::<f64>::zeros((d, z, h, w));
    scores
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(validity.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(idx, (mut sc, mut va))| {
            let (dz, dy, dx) = window.displacement(idx);
            for vz in 0..z {
                let tz = vz as i64 + dz;
                if tz < 0 || tz >= z as i64 {
                    continue;
                }
                for vy in 0..h {
                    let ty = vy as i64 + dy;
                    if ty < 0 || ty >= h as i64 {
                        continue;
                    }
                    for vx in 0..w {
                        let tx = vx as i64 + dx;
                        if tx < 0 || tx >= w as i64 {
                            continue;
                        }
                        let p1 = (vz, vy, vx);
                        let p2 = (tz as usize, ty as usize, tx as usize);
                        let valid = m1(p1) * m2(p2);
                        if valid == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += h1[(ch, p1.0, p1.1, p1.2)]
                                * m1(p1)
                                * h2[(ch, p2.0, p2.1, p2.2)]
                                * m2(p2);
                        }
                        sc[p1] = acc * norm;
                        va[p1] = valid;
                    }
                }
            }
        });
    CostVolume {
        scores,
        validity,
        window,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_indexing_round_trips() {
        let win = SearchWindow::new(2, 1);
        for idx in 0..win.len() {
            let (dz, dy, dx) = win.displacement(idx);
            assert_eq!(win.index(dz, dy, dx), idx);
        }
        assert_eq!(win.len(), 75);
    }

    #[test]
    fn zero_mask_zeroes_score_and_validity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h1 = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.gen_range(0.5..1.0));
        let h2 = h1.clone();
        let m1 = Array3::ones((2, 4, 4));
        let mut m2 = Array3::ones((2, 4, 4));
        m2[(0, 1, 2)] = 0.0;
        let win = SearchWindow::new(1, 1);
        let cv = masked_correlation(h1.view(), m1.view(), h2.view(), m2.view(), win).unwrap();
        // voxel (0,1,1) displaced by dx = +1 reads the masked voxel
        let idx = win.index(0, 0, 1);
        assert_eq!(cv.scores[(idx, 0, 1, 1)], 0.0);
        assert_eq!(cv.validity[(idx, 0, 1, 1)], 0.0);
        assert!(cv.scores[(win.index(0, 0, 0), 0, 1, 1)] > 0.0);
    }

    #[test]
    fn rejects_oversized_window_and_shapes() {
        let h = Array4::<f64>::zeros((1, 2, 3, 3));
        let m = Array3::<f64>::ones((2, 3, 3));
        assert!(matches!(
            masked_correlation(h.view(), m.view(), h.view(), m.view(), SearchWindow::new(3, 1)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            masked_correlation(h.view(), m.view(), h.view(), m.view(), SearchWindow::new(1, 2)),
            Err(Error::Domain(_))
        ));
        let other = Array4::<f64>::zeros((2, 2, 3, 3));
        assert!(matches!(
            masked_correlation(h.view(), m.view(), other.view(), m.view(), SearchWindow::new(1, 1)),
            Err(Error::Dimension(_))
        ));
    }
}
