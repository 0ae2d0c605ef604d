//! Neural flow backend: a six-level partial-convolution feature pyramid and
//! a shared decoder with dense skip concatenations, run coarse to fine.
//!
//! Residuals are estimated at pyramid levels 6 down to 2 (1/64 to 1/4 of
//! the input resolution, depth never strided). The level-2 flow is
//! upsampled four times to the input grid.

use ndarray::{concatenate, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::correlation::{correlate, SearchWindow};
use super::pconv::{activate, conv3d, partial_conv3, Activation, ConvLayer};
use super::{compose_residual_flow, upsample_flow, Flow3D, Upsampling};
use crate::error::{Error, Result};
use crate::mpi::MultiPlaneImage;
use crate::weights::NamedTensors;

pub const PYRAMID_FILTERS: [usize; 6] = [16, 32, 64, 96, 128, 192];
pub const REDUCED_CHANNELS: usize = 32;
pub const DECODER_FILTERS: [usize; 5] = [128, 128, 96, 64, 32];
/// Input features per voxel: RGB·α.
pub const INPUT_CHANNELS: usize = 3;
/// Finest pyramid level with a residual estimate.
pub const FINEST_LEVEL: usize = 2;
const LEVELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowNetworkConfig {
    pub radius_xy: usize,
    pub s_z: usize,
}

impl Default for FlowNetworkConfig {
    fn default() -> Self {
        Self { radius_xy: 4, s_z: 1 }
    }
}

impl FlowNetworkConfig {
    pub fn window(&self) -> SearchWindow {
        SearchWindow::new(self.radius_xy, self.s_z)
    }

    pub fn decoder_input_channels(&self) -> usize {
        self.window().len() + REDUCED_CHANNELS + 2 + (2 * self.s_z + 1)
    }
}

/// Selects partial convolutions with masked correlation, or their dense
/// counterparts (used to cross-check the masked path).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    Partial,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetworkWeights {
    pub config: FlowNetworkConfig,
    /// Layers 1a, 1b, 2a, ..., 6b.
    pub pyramid: Vec<ConvLayer>,
    /// 1×1×1 reductions for levels 2..=6, index 0 is level 2.
    pub reducers: Vec<ConvLayer>,
    pub decoder: Vec<ConvLayer>,
}

fn pyramid_name(i: usize) -> String {
    format!("pyramid.{}{}", i / 2 + 1, if i % 2 == 0 { 'a' } else { 'b' })
}

impl FlowNetworkWeights {
    pub fn zeros(config: FlowNetworkConfig) -> Self {
        let mut pyramid = Vec::with_capacity(2 * LEVELS);
        let mut cin = INPUT_CHANNELS;
        for &f in &PYRAMID_FILTERS {
            pyramid.push(ConvLayer::zeros(cin, f, [3, 3, 3], [1, 2, 2], [1, 1, 1]));
            pyramid.push(ConvLayer::zeros(f, f, [3, 3, 3], [1, 1, 1], [1, 1, 1]));
            cin = f;
        }
        let reducers = PYRAMID_FILTERS[FINEST_LEVEL - 1..]
            .iter()
            .map(|&f| ConvLayer::zeros(f, REDUCED_CHANNELS, [1, 1, 1], [1, 1, 1], [0, 0, 0]))
            .collect();
        let win = 2 * config.s_z + 1;
        let [d1, d2, d3, d4, d5] = DECODER_FILTERS;
        let dec = |i, o| ConvLayer::zeros(i, o, [3, 3, 3], [1, 1, 1], [1, 1, 1]);
        let decoder = vec![
            dec(config.decoder_input_channels(), d1),
            dec(d1, d2),
            dec(d2 + d1, d3),
            dec(d3 + d2, d4),
            dec(d4 + d3, d5),
            dec(d5 + d4, 2 + win),
        ];
        Self {
            config,
            pyramid,
            reducers,
            decoder,
        }
    }

    /// Fixed-seed random initialisation.
    pub fn seeded(config: FlowNetworkConfig, seed: u64) -> Self {
        let mut w = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in w.layers_mut() {
            layer.randomize(&mut rng);
        }
        w
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.pyramid
            .iter_mut()
            .chain(self.reducers.iter_mut())
            .chain(self.decoder.iter_mut())
    }

    fn named_layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out: Vec<(String, &ConvLayer)> = self
            .pyramid
            .iter()
            .enumerate()
            .map(|(i, l)| (pyramid_name(i), l))
            .collect();
        for (i, l) in self.reducers.iter().enumerate() {
            out.push((format!("reduce.{}", i + FINEST_LEVEL), l));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{}", i + 1), l));
        }
        out
    }

    /// Every layer must have exactly the architecture's shape.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(self.config);
        let mine = self.named_layers();
        let want = reference.named_layers();
        if mine.len() != want.len() {
            return Err(Error::Config(format!(
                "flow network has {} layers, expected {}",
                mine.len(),
                want.len()
            )));
        }
        for ((name, l), (_, r)) in mine.iter().zip(&want) {
            l.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
            if l.weight.dim() != r.weight.dim()
                || l.kernel != r.kernel
                || l.stride != r.stride
                || l.padding != r.padding
            {
                return Err(Error::Config(format!(
                    "{name}: weight {:?} does not match architecture {:?}",
                    l.weight.dim(),
                    r.weight.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let mut t = NamedTensors::default();
        t.insert_scalar("meta.radius_xy", self.config.radius_xy as f64);
        t.insert_scalar("meta.s_z", self.config.s_z as f64);
        for (name, layer) in self.named_layers() {
            t.insert_layer(&name, layer);
        }
        t
    }

    pub fn from_tensors(t: &NamedTensors) -> Result<Self> {
        let config = FlowNetworkConfig {
            radius_xy: t.scalar_usize("meta.radius_xy")?,
            s_z: t.scalar_usize("meta.s_z")?,
        };
        let mut w = Self::zeros(config);
        let names: Vec<String> = w.named_layers().into_iter().map(|(n, _)| n).collect();
        for (name, layer) in names.iter().zip(w.layers_mut()) {
            t.load_layer(name, layer)?;
        }
        w.validate()?;
        Ok(w)
    }
}

fn mask_of(mpi: &MultiPlaneImage) -> Array3<f64> {
    mpi.alpha.mapv(|a| if a >= 0.5 { 1.0 } else { 0.0 })
}

fn input_features(mpi: &MultiPlaneImage, mask: &Array3<f64>) -> Array4<f64> {
    let (z, h, w) = mpi.dim();
    Array4::from_shape_fn((INPUT_CHANNELS, z, h, w), |(c, p, y, x)| {
        mpi.color[(p, y, x, c)] * mask[(p, y, x)]
    })
}

fn conv(
    x: ArrayView4<f64>,
    mask: ArrayView3<f64>,
    layer: &ConvLayer,
    mode: LayerMode,
    act: Activation,
) -> Result<(Array4<f64>, Array3<f64>)> {
    let (y, m) = match mode {
        LayerMode::Partial => partial_conv3(x, mask, layer)?,
        LayerMode::Dense => {
            let y = conv3d(x, layer)?;
            let m = super::pconv::strided_mask(mask, layer)?;
            (y, m)
        }
    };
    Ok((activate(y, act), m))
}

fn pyramid(
    mpi: &MultiPlaneImage,
    weights: &FlowNetworkWeights,
    mode: LayerMode,
) -> Result<Vec<(Array4<f64>, Array3<f64>)>> {
    let mut mask = mask_of(mpi);
    let mut x = input_features(mpi, &mask);
    let mut out = Vec::with_capacity(LEVELS);
    for pair in weights.pyramid.chunks(2) {
        let (y, m) = conv(x.view(), mask.view(), &pair[0], mode, Activation::LeakyRelu)?;
        let (y, m) = conv(y.view(), m.view(), &pair[1], mode, Activation::LeakyRelu)?;
        out.push((y.clone(), m.clone()));
        x = y;
        mask = m;
    }
    Ok(out)
}

/// Backward-warp source features with a flow: bilinear in x-y, expectation
/// over the plane-offset distribution in depth, renormalised by the warped
/// mask. Voxels whose warped mask falls below 0.5 are masked out.
fn warp_features(
    feat: &Array4<f64>,
    mask: &Array3<f64>,
    flow: &Flow3D,
) -> (Array4<f64>, Array3<f64>) {
    let (c, z, h, w) = feat.dim();
    let s = flow.s_z as i64;
    let mut out = Array4::zeros((c, z, h, w));
    let mut out_mask = Array3::zeros((z, h, w));
    let mut acc = vec![0.0; c];
    for p in 0..z {
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + flow.xy[(p, y, x, 0)];
                let sy = y as f64 + flow.xy[(p, y, x, 1)];
                acc.iter_mut().for_each(|v| *v = 0.0);
                let mut den = 0.0;
                for i in 0..flow.window() {
                    let b = flow.depth_dist[(p, y, x, i)];
                    let tz = p as i64 + i as i64 - s;
                    if b == 0.0 || tz < 0 || tz >= z as i64 {
                        continue;
                    }
                    let tz = tz as usize;
                    for (tx, ty, wt) in crate::geometry::bilinear_taps(sx, sy, w, h) {
                        let m = mask[(tz, ty, tx)];
                        if m == 0.0 {
                            continue;
                        }
                        let k = b * wt * m;
                        den += k;
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += k * feat[(ch, tz, ty, tx)];
                        }
                    }
                }
                if den >= 0.5 {
                    out_mask[(p, y, x)] = 1.0;
                    for (ch, a) in acc.iter().enumerate() {
                        out[(ch, p, y, x)] = a / den;
                    }
                }
            }
        }
    }
    (out, out_mask)
}

fn softmax_residual(raw: &Array4<f64>, s_z: usize) -> Flow3D {
    let (_, z, h, w) = raw.dim();
    let win = 2 * s_z + 1;
    let mut f = Flow3D::zeros(z, h, w, s_z);
    for p in 0..z {
        for y in 0..h {
            for x in 0..w {
                f.xy[(p, y, x, 0)] = raw[(0, p, y, x)];
                f.xy[(p, y, x, 1)] = raw[(1, p, y, x)];
                let max = (0..win).map(|i| raw[(2 + i, p, y, x)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..win {
                    let e = (raw[(2 + i, p, y, x)] - max).exp();
                    f.depth_dist[(p, y, x, i)] = e;
                    sum += e;
                }
                for i in 0..win {
                    f.depth_dist[(p, y, x, i)] /= sum;
                }
            }
        }
    }
    f
}

fn decode(
    input: Array4<f64>,
    mask: ArrayView3<f64>,
    weights: &FlowNetworkWeights,
    mode: LayerMode,
) -> Result<Flow3D> {
    let d = &weights.decoder;
    let lrelu = Activation::LeakyRelu;
    let (x1, _) = conv(input.view(), mask, &d[0], mode, lrelu)?;
    let (x2, _) = conv(x1.view(), mask, &d[1], mode, lrelu)?;
    let cat = |a: &Array4<f64>, b: &Array4<f64>| concatenate(Axis(0), &[a.view(), b.view()]);
    let (x3, _) = conv(cat(&x2, &x1).map_err(shape)?.view(), mask, &d[2], mode, lrelu)?;
    let (x4, _) = conv(cat(&x3, &x2).map_err(shape)?.view(), mask, &d[3], mode, lrelu)?;
    let (x5, _) = conv(cat(&x4, &x3).map_err(shape)?.view(), mask, &d[4], mode, lrelu)?;
    let (x6, _) = conv(
        cat(&x5, &x4).map_err(shape)?.view(),
        mask,
        &d[5],
        mode,
        Activation::Linear,
    )?;
    Ok(softmax_residual(&x6, weights.config.s_z))
}

fn shape(e: ndarray::ShapeError) -> Error {
    Error::dim(e.to_string())
}

/// Estimate the flow from `m_ref` to `m_src` with the given weights.
pub fn estimate_flow_network(
    m_ref: &MultiPlaneImage,
    m_src: &MultiPlaneImage,
    weights: &FlowNetworkWeights,
) -> Result<Flow3D> {
    run_network(m_ref, m_src, weights, LayerMode::Partial)
}

pub fn run_network(
    m_ref: &MultiPlaneImage,
    m_src: &MultiPlaneImage,
    weights: &FlowNetworkWeights,
    mode: LayerMode,
) -> Result<Flow3D> {
    weights.validate()?;
    m_ref.check()?;
    m_src.check()?;
    if m_ref.planes != m_src.planes {
        return Err(Error::domain("reference and source MPIs must share one plane table"));
    }
    if m_ref.dim() != m_src.dim() {
        return Err(Error::dim(format!(
            "MPI shapes differ: {:?} vs {:?}",
            m_ref.dim(),
            m_src.dim()
        )));
    }
    let cfg = weights.config;
    let window = cfg.window();
    let pyr_ref = pyramid(m_ref, weights, mode)?;
    let pyr_src = pyramid(m_src, weights, mode)?;

    let mut flow: Option<Flow3D> = None;
    for level in (FINEST_LEVEL..=LEVELS).rev() {
        let (fr, mr) = &pyr_ref[level - 1];
        let (fs, ms) = &pyr_src[level - 1];
        let (_, z, h, w) = fr.dim();
        let prev = match flow.take() {
            None => Flow3D::zeros(z, h, w, cfg.s_z),
            Some(f) => upsample_flow(&f, h, w, 2.0, Upsampling::Bilinear),
        };
        let (warped, warped_mask) = warp_features(fs, ms, &prev);
        let cv = match mode {
            LayerMode::Partial => correlate(fr.view(), Some(mr.view()), warped.view(), Some(warped_mask.view()), window),
            LayerMode::Dense => correlate(fr.view(), None, warped.view(), None, window),
        };
        let (reduced, _) = conv(
            fr.view(),
            mr.view(),
            &weights.reducers[level - FINEST_LEVEL],
            mode,
            Activation::LeakyRelu,
        )?;
        let prev_xy = prev.xy.view().permuted_axes([3, 0, 1, 2]);
        let prev_b = prev.depth_dist.view().permuted_axes([3, 0, 1, 2]);
        let input = concatenate(
            Axis(0),
            &[cv.scores.view(), reduced.view(), prev_xy, prev_b],
        )
        .map_err(shape)?;
        let residual = decode(input, mr.view(), weights, mode)?;
        flow = Some(compose_residual_flow(&prev, &residual)?);
    }
    let (_, h, w) = m_ref.dim();
    let coarse = flow.expect("at least one residual level");
    Ok(upsample_flow(&coarse, h, w, 4.0, Upsampling::Bilinear))
}
