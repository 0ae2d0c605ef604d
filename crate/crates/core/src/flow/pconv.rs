//! 3D convolutions over `C × Z × H × W` feature volumes.
//!
//! The partial variant only reads voxels whose mask is 1 and rescales each
//! output by the number of in-volume taps over the number of valid taps.
//! Output masks are the input mask sampled at each output's centre tap, so a
//! layer never dilates its mask.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Output rows evaluated per im2col block.
const ROW_BLOCK: usize = 256;

pub const LEAKY_SLOPE: f64 = 0.1;

/// One 3D convolution layer. Kernel, stride and padding are ordered
/// `(z, y, x)`; the weight tensor is `out × in × kz × ky × kx` flattened
/// row-major into `out × (in·kz·ky·kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvLayer {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        let taps = kernel.iter().product::<usize>();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Array2::zeros((out_channels, in_channels * taps)),
            bias: Array1::zeros(out_channels),
        }
    }

    /// Uniform He-style initialisation scaled by fan-in.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R) {
        let fan_in = self.weight.ncols().max(1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        self.weight.mapv_inplace(|_| rng.gen_range(-bound..bound));
        self.bias.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::dim(format!(
                "kernel {:?} and stride {:?} must be non-zero",
                self.kernel, self.stride
            )));
        }
        if self.weight.dim() != (self.out_channels, self.in_channels * self.taps())
            || self.bias.len() != self.out_channels
        {
            return Err(Error::dim(format!(
                "layer tensors {:?}/{} do not match {}→{} with kernel {:?}",
                self.weight.dim(),
                self.bias.len(),
                self.in_channels,
                self.out_channels,
                self.kernel
            )));
        }
        Ok(())
    }

    /// Output `(Z, H, W)` for an input of `(Z, H, W)`.
    pub fn output_dim(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let dims = [input.0, input.1, input.2];
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::dim(format!(
                    "kernel {:?} larger than padded input {:?}",
                    self.kernel, input
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok((out[0], out[1], out[2]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu => {
                if v >= 0.0 {
                    v
                } else {
                    LEAKY_SLOPE * v
                }
            }
        }
    }
}

/// Partial 3D convolution. Returns the features and the (non-dilated)
/// output mask.
pub fn partial_conv3(
    input: ArrayView4<f64>,
    mask: ArrayView3<f64>,
    layer: &ConvLayer,
) -> Result<(Array4<f64>, Array3<f64>)> {
    let (c, z, h, w) = input.dim();
    if mask.dim() != (z, h, w) {
        return Err(Error::dim(format!(
            "mask {:?} does not match features {:?}",
            mask.dim(),
            input.dim()
        )));
    }
    check_channels(c, layer)?;
    let out = convolve(input, Some(mask), layer)?;
    Ok((out, strided_mask(mask, layer)?))
}

/// Plain zero-padded 3D convolution.
pub fn conv3d(input: ArrayView4<f64>, layer: &ConvLayer) -> Result<Array4<f64>> {
    check_channels(input.dim().0, layer)?;
    convolve(input, None, layer)
}

fn check_channels(c: usize, layer: &ConvLayer) -> Result<()> {
    layer.validate()?;
    if c != layer.in_channels {
        return Err(Error::dim(format!(
            "layer expects {} input channels, got {c}",
            layer.in_channels
        )));
    }
    Ok(())
}

/// Input mask sampled at each output voxel's centre tap.
pub fn strided_mask(mask: ArrayView3<f64>, layer: &ConvLayer) -> Result<Array3<f64>> {
    let (oz, oy, ox) = layer.output_dim(mask.dim())?;
    let (z, h, w) = mask.dim();
    let dims = [z, h, w];
    let centre = |o: usize, a: usize| -> Option<usize> {
        let p = (o * layer.stride[a] + layer.kernel[a] / 2) as i64 - layer.padding[a] as i64;
        (p >= 0 && (p as usize) < dims[a]).then_some(p as usize)
    };
    Ok(Array3::from_shape_fn((oz, oy, ox), |(a, b, c)| {
        match (centre(a, 0), centre(b, 1), centre(c, 2)) {
            (Some(pz), Some(py), Some(px)) => mask[(pz, py, px)],
            _ => 0.0,
        }
    }))
}

fn convolve(
    input: ArrayView4<f64>,
    mask: Option<ArrayView3<f64>>,
    layer: &ConvLayer,
) -> Result<Array4<f64>> {
    let (c, z, h, w) = input.dim();
    let (oz, oy, ox) = layer.output_dim((z, h, w))?;
    let [kz, ky, kx] = layer.kernel;
    let taps = layer.taps();
    let cols = c * taps;
    let n_out = oz * oy * ox;
    let wt = layer.weight.t();
    let origin = |o: usize, a: usize| o as i64 * layer.stride[a] as i64 - layer.padding[a] as i64;

    let blocks: Vec<Array2<f64>> = (0..n_out.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let start = b * ROW_BLOCK;
            let end = (start + ROW_BLOCK).min(n_out);
            let rows = end - start;
            let mut patch = Array2::<f64>::zeros((rows, cols));
            // scale < 0 marks an output with no valid taps
            let mut scale = vec![1.0f64; rows];
            for r in 0..rows {
                let o = start + r;
                let (vz, rem) = (o / (oy * ox), o % (oy * ox));
                let (vy, vx) = (rem / ox, rem % ox);
                let (bz, by, bx) = (origin(vz, 0), origin(vy, 1), origin(vx, 2));
                let mut inside = 0usize;
                let mut valid = 0.0;
                let mut row = patch.row_mut(r);
                for dz in 0..kz {
                    let iz = bz + dz as i64;
                    if iz < 0 || iz >= z as i64 {
                        continue;
                    }
                    for dy in 0..ky {
                        let iy = by + dy as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for dx in 0..kx {
                            let ix = bx + dx as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                            inside += 1;
                            let m = mask.map_or(1.0, |m| m[(iz, iy, ix)]);
                            if m == 0.0 {
                                continue;
                            }
                            valid += m;
                            let tap = (dz * ky + dy) * kx + dx;
                            for ch in 0..c {
                                row[ch * taps + tap] = input[(ch, iz, iy, ix)] * m;
                            }
                        }
                    }
                }
                if mask.is_some() {
                    scale[r] = if valid > 0.0 { inside as f64 / valid } else { -1.0 };
                }
            }
            let mut out = patch.dot(&wt);
            for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                if scale[r] < 0.0 {
                    row.fill(0.0);
                } else {
                    row.zip_mut_with(&layer.bias, |v, b| *v = *v * scale[r] + b);
                }
            }
            out
        })
        .collect();

    let mut out = Array4::<f64>::zeros((layer.out_channels, oz, oy, ox));
    for (b, block) in blocks.into_iter().enumerate() {
        for (r, row) in block.axis_iter(Axis(0)).enumerate() {
            let o = b * ROW_BLOCK + r;
            let (vz, rem) = (o / (oy * ox), o % (oy * ox));
            let (vy, vx) = (rem / ox, rem % ox);
            out.slice_mut(s![.., vz, vy, vx]).assign(&row);
        }
    }
    Ok(out)
}

pub fn activate(mut x: Array4<f64>, act: Activation) -> Array4<f64> {
    if act != Activation::Linear {
        x.mapv_inplace(|v| act.apply(v));
    }
    x
}
