//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tvs_core::flow::{ConvLayer, Flow3D};
use tvs_core::mpi::{MultiPlaneImage, PlaneTable};

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_rgbd(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Array3<f64>, Array2<f64>) {
    let rgb = Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>());
    let depth = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.5..50.0));
    (rgb, depth)
}

/// Random MPI with fractional alphas and some empty voxels.
pub fn random_mpi(rng: &mut ChaCha8Rng, z: usize, h: usize, w: usize) -> MultiPlaneImage {
    let planes = PlaneTable::inverse_uniform(1.0, 20.0, z).unwrap();
    let mut m = MultiPlaneImage::empty(planes.clone(), h, w);
    for p in 0..z {
        for y in 0..h {
            for x in 0..w {
                if rng.gen_bool(0.3) {
                    continue;
                }
                m.alpha[(p, y, x)] = rng.gen_range(0.05..=1.0);
                m.depth[(p, y, x)] = planes.depth(p) * rng.gen_range(0.95..1.05);
                for c in 0..3 {
                    m.color[(p, y, x, c)] = rng.gen();
                }
            }
        }
    }
    m
}

/// `cv[d, v] = Σ_c h1[c, v]·m1[v]·h2[c, v+d]·m2[v+d] / C` by direct loops.
pub fn correlation_oracle(
    h1: ArrayView4<f64>,
    m1: ArrayView3<f64>,
    h2: ArrayView4<f64>,
    m2: ArrayView3<f64>,
    r: i64,
    s: i64,
) -> (Array4<f64>, Array4<f64>) {
    let (c, z, h, w) = h1.dim();
    let side = 2 * r + 1;
    let d = ((2 * s + 1) * side * side) as usize;
    let mut scores = Array4::zeros((d, z, h, w));
    let mut valid = Array4::zeros((d, z, h, w));
    for dz in -s..=s {
        for dy in -r..=r {
            for dx in -r..=r {
                let idx = (((dz + s) * side + (dy + r)) * side + (dx + r)) as usize;
                for vz in 0..z as i64 {
                    for vy in 0..h as i64 {
                        for vx in 0..w as i64 {
                            let (tz, ty, tx) = (vz + dz, vy + dy, vx + dx);
                            if tz < 0 || ty < 0 || tx < 0 || tz >= z as i64 || ty >= h as i64 || tx >= w as i64 {
                                continue;
                            }
                            let a = (vz as usize, vy as usize, vx as usize);
                            let b = (tz as usize, ty as usize, tx as usize);
                            let mut dot = 0.0;
                            for ch in 0..c {
                                dot += h1[(ch, a.0, a.1, a.2)] * m1[a] * h2[(ch, b.0, b.1, b.2)] * m2[b];
                            }
                            scores[(idx, a.0, a.1, a.2)] = dot / c as f64;
                            valid[(idx, a.0, a.1, a.2)] = m1[a] * m2[b];
                        }
                    }
                }
            }
        }
    }
    (scores, valid)
}

/// Partial convolution by direct loops: masked taps rescaled by
/// in-volume taps / Σ mask, zero where no tap is valid; the output mask is
/// the centre-tap input mask.
pub fn partial_conv_oracle(x: ArrayView4<f64>, m: ArrayView3<f64>, layer: &ConvLayer) -> (Array4<f64>, Array3<f64>) {
    let (cin, z, h, w) = x.dim();
    let dims = [z as i64, h as i64, w as i64];
    let out_dim = |a: usize| ((dims[a] + 2 * layer.padding[a] as i64 - layer.kernel[a] as i64) / layer.stride[a] as i64 + 1) as usize;
    let (oz, oy, ox) = (out_dim(0), out_dim(1), out_dim(2));
    let [kz, ky, kx] = layer.kernel;
    let taps = kz * ky * kx;
    let mut out = Array4::zeros((layer.out_channels, oz, oy, ox));
    let mut mask = Array3::zeros((oz, oy, ox));
    for a in 0..oz {
        for b in 0..oy {
            for c in 0..ox {
                let o = [a, b, c];
                let base: Vec<i64> = (0..3).map(|i| (o[i] * layer.stride[i]) as i64 - layer.padding[i] as i64).collect();
                let centre: Vec<i64> = (0..3).map(|i| base[i] + (layer.kernel[i] / 2) as i64).collect();
                if (0..3).all(|i| centre[i] >= 0 && centre[i] < dims[i]) {
                    mask[(a, b, c)] = m[(centre[0] as usize, centre[1] as usize, centre[2] as usize)];
                }
                for oc in 0..layer.out_channels {
                    let mut acc = 0.0;
                    let mut inside = 0.0;
                    let mut msum = 0.0;
                    for tz in 0..kz {
                        for ty in 0..ky {
                            for tx in 0..kx {
                                let p = [base[0] + tz as i64, base[1] + ty as i64, base[2] + tx as i64];
                                if (0..3).any(|i| p[i] < 0 || p[i] >= dims[i]) {
                                    continue;
                                }
                                let p = (p[0] as usize, p[1] as usize, p[2] as usize);
                                inside += 1.0;
                                msum += m[p];
                                let tap = (tz * ky + ty) * kx + tx;
                                for ic in 0..cin {
                                    acc += layer.weight[(oc, ic * taps + tap)] * x[(ic, p.0, p.1, p.2)] * m[p];
                                }
                            }
                        }
                    }
                    out[(oc, a, b, c)] = if msum > 0.0 { acc * inside / msum + layer.bias[oc] } else { 0.0 };
                }
            }
        }
    }
    (out, mask)
}

/// Single-channel SSIM with the full 2-D Gaussian window written out.
fn ssim_direct(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    let mut n = h.min(w).min(11);
    if n % 2 == 0 {
        n -= 1;
    }
    let c = (n as f64 - 1.0) / 2.0;
    let mut g = Array2::from_shape_fn((n, n), |(i, j)| {
        (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp()
    });
    let s = g.sum();
    g.mapv_inplace(|v| v / s);
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let (p, q, k) = (a[(y + i, x + j)], b[(y + i, x + j)], g[(i, j)]);
                    ma += k * p;
                    mb += k * q;
                    aa += k * p * p;
                    bb += k * q * q;
                    ab += k * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn ssim_oracle(a: ArrayView3<f64>, b: ArrayView3<f64>) -> f64 {
    let c = a.dim().2;
    (0..c)
        .map(|ch| {
            ssim_direct(
                &a.index_axis(ndarray::Axis(2), ch).to_owned(),
                &b.index_axis(ndarray::Axis(2), ch).to_owned(),
            )
        })
        .sum::<f64>()
        / c as f64
}

pub fn photometric_oracle(m_ref: &MultiPlaneImage, m_rec: &MultiPlaneImage, o: &Array3<f64>, beta: f64) -> f64 {
    let (zn, h, w) = m_ref.dim();
    if o.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut total = 0.0;
    for z in 0..zn {
        let a = Array3::from_shape_fn((h, w, 3), |(y, x, c)| m_ref.color[(z, y, x, c)] * o[(z, y, x)]);
        let b = Array3::from_shape_fn((h, w, 3), |(y, x, c)| m_rec.color[(z, y, x, c)] * o[(z, y, x)]);
        let mae = a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        total += beta * mae + (1.0 - beta) * (1.0 - ssim_oracle(a.view(), b.view())) / 2.0;
    }
    total / zn as f64
}

/// Edge-aware smoothness with explicit gradient images per axis.
pub fn smoothness_oracle(flow: &Array4<f64>, m: &MultiPlaneImage, a: f64) -> f64 {
    let (zn, h, w) = m.dim();
    let mut per_axis = Vec::new();
    for (dy, dx) in [(0usize, 1usize), (1, 0)] {
        if h <= dy || w <= dx {
            continue;
        }
        let mut vals = Vec::new();
        for z in 0..zn {
            for y in 0..h - dy {
                for x in 0..w - dx {
                    let q = (z, y + dy, x + dx);
                    let p = (z, y, x);
                    let grad_a = (m.alpha[q] - m.alpha[p]).abs();
                    let grad_c: f64 = (0..3).map(|c| (m.color[(q.0, q.1, q.2, c)] - m.color[(p.0, p.1, p.2, c)]).abs()).sum::<f64>() / 3.0;
                    let grad_u: f64 = (0..3).map(|c| (flow[(q.0, q.1, q.2, c)] - flow[(p.0, p.1, p.2, c)]).abs()).sum::<f64>() / 3.0;
                    vals.push((1.0 - grad_a) * (-a * grad_c).exp() * grad_u);
                }
            }
        }
        per_axis.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    per_axis.iter().sum::<f64>() / per_axis.len() as f64
}

/// Integer one-hot flow: voxel `(z, y, x)` moves by `(dx, dy)` pixels and
/// `dz` planes.
pub fn one_hot_flow(zn: usize, h: usize, w: usize, s_z: usize, f: impl Fn(usize, usize, usize) -> (i64, i64, i64)) -> Flow3D {
    let mut flow = Flow3D::zeros(zn, h, w, s_z);
    for z in 0..zn {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy, dz) = f(z, y, x);
                flow.xy[(z, y, x, 0)] = dx as f64;
                flow.xy[(z, y, x, 1)] = dy as f64;
                for i in 0..2 * s_z + 1 {
                    flow.depth_dist[(z, y, x, i)] = if i as i64 == dz + s_z as i64 { 1.0 } else { 0.0 };
                }
            }
        }
    }
    flow
}

/// Visibility oracle for integer one-hot flows: a voxel is unoccluded iff
/// its destination lies inside the volume and no occupied voxel lands on a
/// nearer plane at the same pixel.
pub fn occlusion_oracle(alpha: &Array3<f64>, moves: impl Fn(usize, usize, usize) -> (i64, i64, i64)) -> Array3<f64> {
    let (zn, h, w) = alpha.dim();
    let mut nearest_landing = Array2::from_elem((h, w), usize::MAX);
    for ((z, y, x), &a) in alpha.indexed_iter() {
        if a <= 0.0 {
            continue;
        }
        let (dx, dy, dz) = moves(z, y, x);
        let (tx, ty) = (x as i64 + dx, y as i64 + dy);
        if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
            continue;
        }
        let tz = (z as i64 + dz).clamp(0, zn as i64 - 1) as usize;
        let cell = &mut nearest_landing[(ty as usize, tx as usize)];
        *cell = (*cell).min(tz);
    }
    Array3::from_shape_fn((zn, h, w), |(z, y, x)| {
        let (dx, dy, dz) = moves(z, y, x);
        let (tx, ty, tz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
        if tx < 0 || ty < 0 || tz < 0 || tx >= w as i64 || ty >= h as i64 || tz >= zn as i64 {
            return 0.0;
        }
        if nearest_landing[(ty as usize, tx as usize)] < tz as usize {
            0.0
        } else {
            1.0
        }
    })
}
