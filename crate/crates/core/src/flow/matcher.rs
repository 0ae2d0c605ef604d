//! Deterministic coarse-to-fine matcher.
//!
//! Works on a factor-2 x-y pyramid of occupancy-masked colour; depth is never
//! downsampled. At each level every occupied reference voxel picks the
//! integer displacement with the best masked patch score around its own
//! upsampled coarse displacement and those of its neighbours, and the pass
//! repeats until the field stops changing. Coarse levels are median-filtered
//! in x-y. At full resolution, voxels without an exact-enough match (content
//! with no counterpart in the source) take the displacement of the nearest
//! confidently matched voxel in their plane. The result is one integer displacement per voxel: x-y flow plus a
//! one-hot plane offset.

use ndarray::{Array3, Array4};
use rayon::prelude::*;

use super::correlation::SearchWindow;
use super::Flow3D;
use crate::error::{Error, Result};
use crate::mpi::MultiPlaneImage;

/// Alpha at or above this counts as occupied when matching.
const OCCUPIED: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherConfig {
    /// Pyramid levels including full resolution.
    pub levels: usize,
    pub radius_xy: usize,
    pub s_z: usize,
    /// Descriptor patch half-size.
    pub patch_radius: usize,
    pub median_filter: bool,
    /// Extra rematching passes per level seeded by the previous pass;
    /// stops early once nothing changes.
    pub propagation_passes: usize,
    /// Full-resolution matches whose mean squared patch difference exceeds
    /// this are treated as unmatched.
    pub max_mismatch: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            radius_xy: 3,
            s_z: 1,
            patch_radius: 1,
            median_filter: true,
            propagation_passes: 16,
            max_mismatch: 1e-6,
        }
    }
}

impl MatcherConfig {
    /// Largest x-y displacement the pyramid can recover.
    pub fn effective_range(&self) -> usize {
        self.radius_xy * ((1usize << self.levels) - 1)
    }
}

struct Level {
    /// Straight (not premultiplied) colour, `Z × H × W × 3`.
    color: Array4<f64>,
    mask: Array3<f64>,
}

impl Level {
    fn from_mpi(mpi: &MultiPlaneImage) -> Self {
        Self {
            color: mpi.color.clone(),
            mask: mpi.alpha.mapv(|a| if a >= OCCUPIED { 1.0 } else { 0.0 }),
        }
    }

    /// 2×2 average of premultiplied colour and alpha.
    fn downsample(&self) -> Self {
        let (z, h, w) = self.mask.dim();
        let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
        let mut color = Array4::zeros((z, nh, nw, 3));
        let mut mask = Array3::zeros((z, nh, nw));
        for p in 0..z {
            for y in 0..nh {
                for x in 0..nw {
                    let mut a = 0.0;
                    let mut n = 0.0;
                    let mut c = [0.0; 3];
                    for (yy, xx) in [(2 * y, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x), (2 * y + 1, 2 * x + 1)] {
                        if yy >= h || xx >= w {
                            continue;
                        }
                        n += 1.0;
                        let m = self.mask[(p, yy, xx)];
                        a += m;
                        for (ch, slot) in c.iter_mut().enumerate() {
                            *slot += m * self.color[(p, yy, xx, ch)];
                        }
                    }
                    if a > 0.0 {
                        for (ch, v) in c.iter().enumerate() {
                            color[(p, y, x, ch)] = v / a;
                        }
                    }
                    mask[(p, y, x)] = if a / n >= OCCUPIED { 1.0 } else { 0.0 };
                }
            }
        }
        Self { color, mask }
    }

    fn dim(&self) -> (usize, usize, usize) {
        self.mask.dim()
    }
}

/// Integer voxel displacement `(dz, dy, dx)` per voxel, `None` where no
/// valid match exists.
type Displacements = Array3<Option<(i64, i64, i64)>>;

/// Best displacement per occupied reference voxel.
///
/// The score of a displacement is the negated mean squared RGB·α difference
/// over the patch taps occupied in both the reference patch and the
/// displaced source patch, so content hidden in either view does not count.
/// Candidates are the window around the voxel's own coarse displacement and
/// around those of its 3×3 neighbours in the same plane. Ties prefer more
/// shared taps, then the displacement closest to the voxel's own coarse
/// estimate, then the smaller one, then the lexicographically smaller one.
///
/// With `reuse`, voxels whose 3×3 neighbourhood is unchanged keep the given
/// previous result, which is exact because nothing else feeds their search.
fn match_level(
    rl: &Level,
    sl: &Level,
    patch: usize,
    coarse: &Displacements,
    window: SearchWindow,
    reuse: Option<(&Array3<bool>, &Displacements, &Array3<f64>)>,
) -> (Displacements, Array3<f64>) {
    let (z, h, w) = rl.dim();
    let s = window.s_z as i64;
    let p = patch as i64;
    let occupied = |l: &Level, zz: i64, yy: i64, xx: i64| {
        zz >= 0
            && yy >= 0
            && xx >= 0
            && (zz as usize) < z
            && (yy as usize) < h
            && (xx as usize) < w
            && l.mask[(zz as usize, yy as usize, xx as usize)] > 0.0
    };
    let score = |pz: usize, y: usize, x: usize, d: (i64, i64, i64)| -> Option<(f64, usize)> {
        let tz = pz as i64 + d.0;
        if !occupied(sl, tz, y as i64 + d.1, x as i64 + d.2) {
            return None;
        }
        let mut ssd = 0.0;
        let mut n = 0;
        for ty in -p..=p {
            for tx in -p..=p {
                let (ry, rx) = (y as i64 + ty, x as i64 + tx);
                let (sy, sx) = (ry + d.1, rx + d.2);
                if !occupied(rl, pz as i64, ry, rx) || !occupied(sl, tz, sy, sx) {
                    continue;
                }
                for ch in 0..3 {
                    let diff = rl.color[(pz, ry as usize, rx as usize, ch)]
                        - sl.color[(tz as usize, sy as usize, sx as usize, ch)];
                    ssd += diff * diff;
                }
                n += 1;
            }
        }
        Some((-ssd / (3 * n) as f64, n))
    };
    let rows: Vec<Vec<Option<((i64, i64, i64), f64)>>> = (0..z * h)
        .into_par_iter()
        .map(|row| {
            let (pz, y) = (row / h, row % h);
            let mut out = vec![None; w];
            let mut bases: Vec<(i64, i64, i64)> = Vec::with_capacity(9);
            let mut cands: Vec<(i64, i64, i64)> = Vec::new();
            for (x, slot) in out.iter_mut().enumerate() {
                if rl.mask[(pz, y, x)] == 0.0 {
                    continue;
                }
                if let Some((changed, prev, prev_mis)) = reuse {
                    let dirty = (y.saturating_sub(1)..(y + 2).min(h))
                        .any(|ny| (x.saturating_sub(1)..(x + 2).min(w)).any(|nx| changed[(pz, ny, nx)]));
                    if !dirty {
                        *slot = prev[(pz, y, x)].map(|d| (d, prev_mis[(pz, y, x)]));
                        continue;
                    }
                }
                let own = coarse[(pz, y, x)].unwrap_or((0, 0, 0));
                bases.clear();
                bases.push(own);
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        if let Some(b) = coarse[(pz, ny, nx)] {
                            if !bases.contains(&b) {
                                bases.push(b);
                            }
                        }
                    }
                }
                cands.clear();
                for &(bz, by, bx) in &bases {
                    for idx in 0..window.len() {
                        let (dz, dy, dx) = window.displacement(idx);
                        let d = (bz + dz, by + dy, bx + dx);
                        if d.0.abs() <= s {
                            cands.push(d);
                        }
                    }
                }
                if bases.len() > 1 {
                    cands.sort_unstable();
                    cands.dedup();
                }
                let mut best: Option<(f64, usize, i64, i64, (i64, i64, i64))> = None;
                for &d in &cands {
                    let Some((sc, n)) = score(pz, y, x, d) else {
                        continue;
                    };
                    let from_own = (d.0 - own.0).abs() + (d.1 - own.1).abs() + (d.2 - own.2).abs();
                    let size = d.0.abs() + d.1.abs() + d.2.abs();
                    let better = match best {
                        None => true,
                        Some((bs, bn, bo, bsz, bd)) => {
                            sc > bs
                                || (sc == bs
                                    && (std::cmp::Reverse(n), from_own, size, d) < (std::cmp::Reverse(bn), bo, bsz, bd))
                        }
                    };
                    if better {
                        best = Some((sc, n, from_own, size, d));
                    }
                }
                *slot = best.map(|b| (b.4, -b.0));
            }
            out
        })
        .collect();
    let flat: Vec<_> = rows.into_iter().flatten().collect();
    let mismatch = Array3::from_shape_vec((z, h, w), flat.iter().map(|v| v.map_or(f64::INFINITY, |b| b.1)).collect())
        .expect("row layout");
    let found = Array3::from_shape_vec((z, h, w), flat.into_iter().map(|v| v.map(|b| b.0)).collect())
        .expect("row layout");
    (found, mismatch)
}

/// Give every occupied voxel without a confident match the displacement of
/// the nearest confident voxel in its plane (Euclidean, ties to scanline
/// order). Planes without confident voxels are left unchanged.
fn fill_unconfident(found: &Displacements, mismatch: &Array3<f64>, occupied: &Array3<f64>, limit: f64) -> Displacements {
    let (z, h, w) = found.dim();
    let confident = |p: usize, y: i64, x: i64| {
        y >= 0
            && x >= 0
            && (y as usize) < h
            && (x as usize) < w
            && found[(p, y as usize, x as usize)].is_some()
            && mismatch[(p, y as usize, x as usize)] <= limit
    };
    let mut out = found.clone();
    for p in 0..z {
        if !(0..h).any(|y| (0..w).any(|x| confident(p, y as i64, x as i64))) {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                if occupied[(p, y, x)] == 0.0 || confident(p, y as i64, x as i64) {
                    continue;
                }
                let (cy, cx) = (y as i64, x as i64);
                let mut best: Option<(i64, i64, i64)> = None;
                for r in 1..=(h.max(w) as i64) {
                    if best.is_some_and(|(d2, _, _)| r * r > d2) {
                        break;
                    }
                    for yy in cy - r..=cy + r {
                        let step = if yy == cy - r || yy == cy + r { 1 } else { (2 * r) as usize };
                        for xx in (cx - r..=cx + r).step_by(step) {
                            if !confident(p, yy, xx) {
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
                    out[(p, y, x)] = found[(p, sy as usize, sx as usize)];
                }
            }
        }
    }
    out
}

/// 3×3 lower-median of the x-y displacements over matched neighbours in
/// the same plane.
fn median_filter(res: &Displacements) -> Displacements {
    let (z, h, w) = res.dim();
    Array3::from_shape_fn((z, h, w), |(p, y, x)| {
        let (dz, _, _) = res[(p, y, x)]?;
        let mut xs = Vec::with_capacity(9);
        let mut ys = Vec::with_capacity(9);
        for ny in y.saturating_sub(1)..(y + 2).min(h) {
            for nx in x.saturating_sub(1)..(x + 2).min(w) {
                if let Some((_, ry, rx)) = res[(p, ny, nx)] {
                    ys.push(ry);
                    xs.push(rx);
                }
            }
        }
        xs.sort_unstable();
        ys.sort_unstable();
        let mid = (xs.len() - 1) / 2;
        Some((dz, ys[mid], xs[mid]))
    })
}

/// Nearest-neighbour upsampling of coarse displacements to `(h, w)`, with
/// x-y doubled.
fn upsample_displacements(d: &Displacements, h: usize, w: usize) -> Displacements {
    let (z, ch, cw) = d.dim();
    Array3::from_shape_fn((z, h, w), |(p, y, x)| {
        d[(p, (y / 2).min(ch - 1), (x / 2).min(cw - 1))].map(|(dz, dy, dx)| (dz, 2 * dy, 2 * dx))
    })
}

fn to_flow(d: &Displacements, s_z: usize) -> Flow3D {
    let (z, h, w) = d.dim();
    let mut f = Flow3D::zeros(z, h, w, s_z);
    for ((p, y, x), v) in d.indexed_iter() {
        if let Some((dz, dy, dx)) = *v {
            f.xy[(p, y, x, 0)] = dx as f64;
            f.xy[(p, y, x, 1)] = dy as f64;
            f.depth_dist[(p, y, x, s_z)] = 0.0;
            f.depth_dist[(p, y, x, (dz + s_z as i64) as usize)] = 1.0;
        }
    }
    f
}

pub fn estimate_flow_matcher(
    m_ref: &MultiPlaneImage,
    m_src: &MultiPlaneImage,
    config: &MatcherConfig,
) -> Result<Flow3D> {
    Ok(matcher_levels(m_ref, m_src, config)?.pop().expect("at least one level"))
}

/// Flow after each level, coarsest first.
pub(crate) fn matcher_levels(
    m_ref: &MultiPlaneImage,
    m_src: &MultiPlaneImage,
    config: &MatcherConfig,
) -> Result<Vec<Flow3D>> {
    m_ref.check()?;
    m_src.check()?;
    if m_ref.planes != m_src.planes {
        return Err(Error::domain(
            "reference and source MPIs must share one plane table",
        ));
    }
    if m_ref.dim() != m_src.dim() {
        return Err(Error::dim(format!(
            "MPI shapes differ: {:?} vs {:?}",
            m_ref.dim(),
            m_src.dim()
        )));
    }
    if config.levels == 0 {
        return Err(Error::Config("matcher needs at least one level".into()));
    }
    let window = SearchWindow::new(config.radius_xy, config.s_z);

    let mut ref_levels = vec![Level::from_mpi(m_ref)];
    let mut src_levels = vec![Level::from_mpi(m_src)];
    for _ in 1..config.levels {
        let r = ref_levels.last().unwrap().downsample();
        let s = src_levels.last().unwrap().downsample();
        ref_levels.push(r);
        src_levels.push(s);
    }

    let mut out = Vec::new();
    let mut current: Option<Displacements> = None;
    for level in (0..config.levels).rev() {
        let (rl, sl) = (&ref_levels[level], &src_levels[level]);
        let (z, h, w) = rl.dim();
        let coarse = match &current {
            None => Array3::from_elem((z, h, w), None),
            Some(d) => upsample_displacements(d, h, w),
        };
        let (mut found, mut mismatch) = match_level(rl, sl, config.patch_radius, &coarse, window, None);
        let mut input = coarse;
        for _ in 0..config.propagation_passes {
            let changed = ndarray::Zip::from(&input).and(&found).map_collect(|a, b| a != b);
            let (next, next_mismatch) =
                match_level(rl, sl, config.patch_radius, &found, window, Some((&changed, &found, &mismatch)));
            if next == found {
                break;
            }
            input = std::mem::replace(&mut found, next);
            mismatch = next_mismatch;
        }
        if level > 0 {
            if config.median_filter {
                found = median_filter(&found);
            }
        } else {
            found = fill_unconfident(&found, &mismatch, &rl.mask, config.max_mismatch);
        }
        out.push(to_flow(&found, config.s_z));
        current = Some(found);
    }
    Ok(out)
}
