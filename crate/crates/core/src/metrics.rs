//! Frame and flow quality measures.

use std::path::Path;

use ndarray::{Array, Array2, Array3, ArrayView, ArrayView2, ArrayView3, ArrayView4, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation margins in pixels: top/bottom and left/right.
pub const CROP_TOP_BOTTOM: usize = 40;
pub const CROP_LEFT_RIGHT: usize = 60;
/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Remove `top_bottom` rows from each of the top and bottom and
/// `left_right` columns from each side. Works on any array whose first two
/// axes are rows and columns.
pub fn crop_with_margins<A: Clone, D: Dimension>(
    frame: ArrayView<A, D>,
    top_bottom: usize,
    left_right: usize,
) -> Result<Array<A, D>> {
    if frame.ndim() < 2 {
        return Err(Error::dim("crop needs at least two axes"));
    }
    let (h, w) = (frame.len_of(Axis(0)), frame.len_of(Axis(1)));
    if h <= 2 * top_bottom || w <= 2 * left_right {
        return Err(Error::domain(format!(
            "{w}×{h} frame is too small for {left_right}/{top_bottom} pixel margins"
        )));
    }
    let mut v = frame;
    v.slice_axis_inplace(Axis(0), (top_bottom..h - top_bottom).into());
    v.slice_axis_inplace(Axis(1), (left_right..w - left_right).into());
    Ok(v.to_owned())
}

/// The standard evaluation crop (40 px top and bottom, 60 px left and right).
pub fn crop_eval_region<A: Clone, D: Dimension>(frame: ArrayView<A, D>) -> Result<Array<A, D>> {
    crop_with_margins(frame, CROP_TOP_BOTTOM, CROP_LEFT_RIGHT)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Frames were identical; `db` holds the cap.
    pub exact: bool,
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("shapes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        return Psnr { db: PSNR_CAP, exact: true };
    }
    Psnr {
        db: (10.0 * (1.0 / mse).log10()).min(PSNR_CAP),
        exact: false,
    }
}

/// PSNR with peak value 1.
pub fn psnr(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<Psnr> {
    same_shape(a.shape(), b.shape())?;
    if a.is_empty() {
        return Err(Error::dim("empty frames"));
    }
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// PSNR over the pixels where `mask` is true. `None` when the mask is empty.
pub fn psnr_masked(a: ArrayView3<f64>, b: ArrayView3<f64>, mask: ArrayView2<bool>) -> Result<Option<Psnr>> {
    same_shape(a.shape(), b.shape())?;
    same_shape(&a.shape()[..2], mask.shape())?;
    let c = a.len_of(Axis(2));
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for ch in 0..c {
            sum += (a[(y, x, ch)] - b[(y, x, ch)]).powi(2);
        }
        n += c;
    }
    Ok((n > 0).then(|| psnr_from_mse(sum / n as f64)))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Window side used for an `h × w` image: 11, or the largest odd size that
/// fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Separable "valid" filtering of a single channel.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            tmp[(y, x)] = (0..n).map(|i| k[i] * img[(y, x + i)]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[(y, x)] = (0..n).map(|i| k[i] * tmp[(y + i, x)]).sum();
        }
    }
    out
}

fn ssim_channel(a: &Array2<f64>, b: &Array2<f64>, k: &[f64]) -> f64 {
    let mu_a = filter_valid(a, k);
    let mu_b = filter_valid(b, k);
    let aa = filter_valid(&(a * a), k);
    let bb = filter_valid(&(b * b), k);
    let ab = filter_valid(&(a * b), k);
    let mut sum = 0.0;
    for (i, &ma) in mu_a.iter().enumerate() {
        let mb = mu_b.as_slice().unwrap()[i];
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    sum / mu_a.len() as f64
}

/// Mean SSIM over valid Gaussian windows, averaged over channels.
pub fn ssim(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let (h, w, c) = a.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::dim("empty frames"));
    }
    let k = gaussian_kernel(ssim_window(h, w), SSIM_SIGMA);
    let total: f64 = (0..c)
        .map(|ch| {
            let ca = a.index_axis(Axis(2), ch).to_owned();
            let cb = b.index_axis(Axis(2), ch).to_owned();
            ssim_channel(&ca, &cb, &k)
        })
        .sum();
    Ok(total / c as f64)
}

/// Mean x-y endpoint error over `valid` pixels; `None` if none are valid.
pub fn aepe(est: ArrayView3<f64>, gt: ArrayView3<f64>, valid: ArrayView2<bool>) -> Result<Option<f64>> {
    same_shape(est.shape(), gt.shape())?;
    same_shape(&est.shape()[..2], valid.shape())?;
    if est.len_of(Axis(2)) < 2 {
        return Err(Error::dim("flow needs at least two channels"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((y, x), &v) in valid.indexed_iter() {
        if v {
            let dx = est[(y, x, 0)] - gt[(y, x, 0)];
            let dy = est[(y, x, 1)] - gt[(y, x, 1)];
            sum += dx.hypot(dy);
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Per-pixel x-y flow taken from the nearest plane with alpha ≥ 0.5.
/// Returns the `H × W × 2` flow and the mask of pixels that had one.
pub fn composite_flow_to_pixels(
    flow: ArrayView4<f64>,
    alpha: ArrayView3<f64>,
) -> Result<(Array3<f64>, Array2<bool>)> {
    let (z, h, w, c) = flow.dim();
    if alpha.dim() != (z, h, w) || c < 2 {
        return Err(Error::dim(format!(
            "flow {:?} does not match alpha {:?}",
            flow.dim(),
            alpha.dim()
        )));
    }
    let mut out = Array3::zeros((h, w, 2));
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if let Some(p) = (0..z).find(|&p| alpha[(p, y, x)] >= 0.5) {
                out[(y, x, 0)] = flow[(p, y, x, 0)];
                out[(y, x, 1)] = flow[(p, y, x, 1)];
                valid[(y, x)] = true;
            }
        }
    }
    Ok((out, valid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub psnr: f64,
    pub exact: bool,
    pub ssim: f64,
    pub aepe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub frames: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_aepe: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
}

impl EvalReport {
    /// Score one predicted frame against its ground truth.
    pub fn evaluate_frame(
        &mut self,
        frame_index: usize,
        pred: ArrayView3<f64>,
        gt: ArrayView3<f64>,
        aepe: Option<f64>,
    ) -> Result<&FrameMetrics> {
        let p = psnr(pred, gt)?;
        let s = ssim(pred, gt)?;
        self.frames.push(FrameMetrics {
            frame_index,
            psnr: p.db,
            exact: p.exact,
            ssim: s,
            aepe,
        });
        Ok(self.frames.last().unwrap())
    }

    pub fn aggregate(&self) -> Aggregate {
        let n = self.frames.len();
        let mean = |f: &dyn Fn(&FrameMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.frames.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let aepes: Vec<f64> = self.frames.iter().filter_map(|f| f.aepe).collect();
        Aggregate {
            frames: n,
            mean_psnr: mean(&|f| f.psnr),
            mean_ssim: mean(&|f| f.ssim),
            mean_aepe: (!aepes.is_empty()).then(|| aepes.iter().sum::<f64>() / aepes.len() as f64),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
        w.write_record(["frame_index", "psnr", "ssim", "aepe"])
            .map_err(|e| Error::Serde(e.to_string()))?;
        for f in &self.frames {
            w.write_record([
                f.frame_index.to_string(),
                format!("{:.6}", f.psnr),
                format!("{:.6}", f.ssim),
                f.aepe.map_or(String::new(), |v| format!("{v:.6}")),
            ])
            .map_err(|e| Error::Serde(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            aggregate: Aggregate,
            frames: &'a [FrameMetrics],
        }
        serde_json::to_string_pretty(&Doc {
            aggregate: self.aggregate(),
            frames: &self.frames,
        })
        .map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-window SSIM with the 2-D Gaussian written out.
    fn ssim_oracle(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let (h, w, c) = a.dim();
        let n = ssim_window(h, w);
        let half = (n as f64 - 1.0) / 2.0;
        let mut g = vec![vec![0.0; n]; n];
        let mut gs = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let r2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
                *v = (-r2 / (2.0 * 1.5 * 1.5)).exp();
                gs += *v;
            }
        }
        let mut total = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            let mut count = 0.0;
            for y in 0..=h - n {
                for x in 0..=w - n {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let wt = g[i][j] / gs;
                            let (p, q) = (a[(y + i, x + j, ch)], b[(y + i, x + j, ch)]);
                            ma += wt * p;
                            mb += wt * q;
                            saa += wt * p * p;
                            sbb += wt * q * q;
                            sab += wt * p * q;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    let c1 = 1e-4;
                    let c2 = 9e-4;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1.0;
                }
            }
            total += acc / count;
        }
        total / c as f64
    }

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn crop_sizes() {
        let f = Array3::<f64>::zeros((1080, 1920, 3));
        assert_eq!(crop_eval_region(f.view()).unwrap().dim(), (1000, 1800, 3));
        let f = Array3::<f64>::zeros((436, 1024, 3));
        assert_eq!(crop_eval_region(f.view()).unwrap().dim(), (356, 904, 3));
        let small = Array3::<f64>::zeros((80, 300, 3));
        assert!(matches!(crop_eval_region(small.view()), Err(Error::Domain(_))));
    }

    #[test]
    fn crop_of_crop_is_doubled_margins() {
        let f = Array2::from_shape_fn((300, 400), |(y, x)| (y * 400 + x) as f64);
        let twice = crop_eval_region(crop_eval_region(f.view()).unwrap().view()).unwrap();
        let once = crop_with_margins(f.view(), 80, 120).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn psnr_identical_and_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_frame(&mut rng, 8, 9).mapv(|v| v * 0.8);
        let p = psnr(a.view(), a.view()).unwrap();
        assert!(p.exact);
        assert_eq!(p.db, PSNR_CAP);
        let b = a.mapv(|v| v + 0.1);
        assert_abs_diff_eq!(psnr(a.view(), b.view()).unwrap().db, 20.0, epsilon = 1e-9);
        assert_eq!(psnr(a.view(), b.view()).unwrap(), psnr(b.view(), a.view()).unwrap());
    }

    #[test]
    fn ssim_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w) in [(16, 16), (20, 13), (7, 9)] {
            let a = random_frame(&mut rng, h, w);
            let b = a.mapv(|v| (v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0));
            assert_abs_diff_eq!(ssim(a.view(), b.view()).unwrap(), ssim_oracle(&a, &b), epsilon = 1e-6);
            assert_abs_diff_eq!(ssim(a.view(), a.view()).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ssim_is_channel_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_frame(&mut rng, 14, 14);
        let b = random_frame(&mut rng, 14, 14);
        let perm = |f: &Array3<f64>| Array3::from_shape_fn(f.dim(), |(y, x, c)| f[(y, x, (c + 1) % 3)]);
        assert_abs_diff_eq!(
            ssim(a.view(), b.view()).unwrap(),
            ssim(perm(&a).view(), perm(&b).view()).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn aepe_cases() {
        let gt = Array3::<f64>::zeros((4, 5, 2));
        let mut est = gt.clone();
        let all = Array2::from_elem((4, 5), true);
        assert_eq!(aepe(est.view(), gt.view(), all.view()).unwrap(), Some(0.0));
        est.index_axis_mut(Axis(2), 0).fill(3.0);
        est.index_axis_mut(Axis(2), 1).fill(4.0);
        assert_eq!(aepe(est.view(), gt.view(), all.view()).unwrap(), Some(5.0));
        let none = Array2::from_elem((4, 5), false);
        assert_eq!(aepe(est.view(), gt.view(), none.view()).unwrap(), None);
    }

    #[test]
    fn report_serialises() {
        let mut r = EvalReport::default();
        let a = Array3::from_elem((12, 12, 3), 0.5);
        r.evaluate_frame(3, a.view(), a.view(), Some(0.0)).unwrap();
        let agg = r.aggregate();
        assert_eq!(agg.frames, 1);
        assert_abs_diff_eq!(agg.mean_ssim, 1.0, epsilon = 1e-12);
        let dir = tempfile::tempdir().unwrap();
        r.write_csv(&dir.path().join("r.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.starts_with("frame_index,psnr,ssim,aepe\n3,99.000000,1.000000,0.000000"));
        assert!(r.to_json().unwrap().contains("\"mean_psnr\": 99.0"));
    }
}
