//! Deterministic layered test scenes with exact depth, motion and
//! visibility.
//!
//! A scene is a stack of fronto-parallel textured layers. Layers are placed
//! in the pixel grid of the world-aligned camera: a layer point with
//! texture coordinates `(s, r)` sits at pixel `(x0 + s + vx·t, y0 + r + vy·t)`
//! of that camera and at depth `d0 + vz·t`. The background layer is
//! unbounded. Frame `t` is seen through a camera whose world-to-camera pose
//! is the rigid transform with rotation `ω·t` and translation `τ·t`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{pinhole, rigid_transform, CameraModel};

/// Texture coordinates this close to an integer are snapped onto it.
const TEX_SNAP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub seed: u64,
    /// Lattice spacing of the value noise in pixels; 1 gives per-pixel noise.
    pub cell: f64,
    pub base: [f64; 3],
    pub contrast: f64,
}

impl Texture {
    pub fn new(seed: u64, cell: f64) -> Self {
        Self {
            seed,
            cell,
            base: [0.5; 3],
            contrast: 1.0,
        }
    }

    fn lattice(&self, ch: u64, ix: i64, iy: i64) -> f64 {
        let h = splitmix64(
            self.seed
                ^ ch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ (ix as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
                ^ (iy as u64).wrapping_mul(0x1656_67B1_9E37_79F9),
        );
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn sample(&self, s: f64, r: f64) -> [f64; 3] {
        let gx = s / self.cell;
        let gy = r / self.cell;
        let (x0, y0) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - x0, gy - y0);
        let (ix, iy) = (x0 as i64, y0 as i64);
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let c = ch as u64;
            let mut n = self.lattice(c, ix, iy) * (1.0 - fx) * (1.0 - fy);
            if fx > 0.0 {
                n += self.lattice(c, ix + 1, iy) * fx * (1.0 - fy);
            }
            if fy > 0.0 {
                n += self.lattice(c, ix, iy + 1) * (1.0 - fx) * fy;
            }
            if fx > 0.0 && fy > 0.0 {
                n += self.lattice(c, ix + 1, iy + 1) * fx * fy;
            }
            *o = (self.base[ch] + self.contrast * (n - 0.5)).clamp(0.0, 1.0);
        }
        out
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(x0, y0, width, height)` in pixels; `None` for the unbounded
    /// background.
    pub rect: Option<[f64; 4]>,
    pub depth: f64,
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Metres per frame.
    pub depth_velocity: f64,
    pub texture: Texture,
}

impl Layer {
    pub fn background(depth: f64, texture: Texture) -> Self {
        Self {
            rect: None,
            depth,
            velocity: [0.0; 2],
            depth_velocity: 0.0,
            texture,
        }
    }

    pub fn rect(rect: [f64; 4], depth: f64, velocity: [f64; 2], texture: Texture) -> Self {
        Self {
            rect: Some(rect),
            depth,
            velocity,
            depth_velocity: 0.0,
            texture,
        }
    }

    pub fn depth_at(&self, t: f64) -> f64 {
        self.depth + self.depth_velocity * t
    }

    fn origin_at(&self, t: f64) -> [f64; 2] {
        let [x0, y0] = self.rect.map_or([0.0, 0.0], |r| [r[0], r[1]]);
        [x0 + self.velocity[0] * t, y0 + self.velocity[1] * t]
    }

    fn contains(&self, s: f64, r: f64) -> bool {
        match self.rect {
            None => true,
            Some([_, _, w, h]) => s >= -0.5 && s < w - 0.5 && r >= -0.5 && r < h - 0.5,
        }
    }

    fn overlaps(&self, other: &Layer, t: f64) -> bool {
        let (Some(a), Some(b)) = (self.rect, other.rect) else {
            return true;
        };
        let (pa, pb) = (self.origin_at(t), other.origin_at(t));
        pa[0] < pb[0] + b[2] && pb[0] < pa[0] + a[2] && pa[1] < pb[1] + b[3] && pb[1] < pa[1] + a[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Per-frame camera translation (world-to-camera).
    pub camera_translation: [f64; 3],
    /// Per-frame camera rotation, axis-angle.
    pub camera_rotation: [f64; 3],
    /// Index 0 is the background.
    pub layers: Vec<Layer>,
}

/// One rendered frame. `layer_id` and `tex` identify the surface point seen
/// at each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub rgb: Array3<f64>,
    pub depth: Array2<f64>,
    pub layer_id: Array2<usize>,
    /// `H × W × 2` texture coordinates `(s, r)`.
    pub tex: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct RenderedSequence {
    pub frames: Vec<RenderedFrame>,
    pub poses: Vec<Matrix4<f64>>,
    pub intrinsics: Matrix3<f64>,
    /// `flows[t]`: object motion from frame `t` to `t + 1` seen in view `t`,
    /// `H × W × 3` (pixels, pixels, metres).
    pub flows: Vec<Array3<f64>>,
    /// `disocclusions[t]`: pixels of frame `t + 1` whose surface was not
    /// visible in frame `t`.
    pub disocclusions: Vec<Array2<bool>>,
}

impl RenderedSequence {
    pub fn camera(&self, t: usize) -> CameraModel {
        let (h, w) = self.frames[t].depth.dim();
        CameraModel {
            intrinsics: self.intrinsics,
            pose: self.poses[t],
            width: w,
            height: h,
        }
    }
}

fn snap_tex(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < TEX_SNAP {
        r
    } else {
        v
    }
}

impl SyntheticScene {
    /// Static camera, 10 m background, no moving layers.
    pub fn new(width: usize, height: usize, frames: usize) -> Self {
        Self {
            width,
            height,
            frames,
            focal: 100.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            camera_translation: [0.0; 3],
            camera_rotation: [0.0; 3],
            layers: vec![Layer::background(10.0, Texture { contrast: 0.6, ..Texture::new(1, 8.0) })],
        }
    }

    /// A textured square moving with an integer velocity over a smooth
    /// background, seen from a camera with the given translation per frame.
    pub fn moving_square(
        width: usize,
        height: usize,
        frames: usize,
        square: [f64; 4],
        depth: f64,
        velocity: [f64; 2],
        camera_translation: [f64; 3],
    ) -> Self {
        let mut s = Self::new(width, height, frames);
        s.camera_translation = camera_translation;
        s.layers.push(Layer::rect(square, depth, velocity, Texture::new(7, 1.0)));
        s
    }

    /// Random two-layer scene whose square moves by whole pixels inside the
    /// frame for every frame, with an optional sideways camera translation
    /// chosen so both layers shift by whole pixels.
    pub fn random_translating(seed: u64, width: usize, height: usize, frames: usize, max_speed: i64, camera: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self::new(width, height, frames);
        s.layers[0].texture.seed = rng.gen::<u32>() as u64;
        let side = rng.gen_range(16..=(width.min(height) / 4).max(17)) as f64;
        let v = [rng.gen_range(-max_speed..=max_speed) as f64, rng.gen_range(-max_speed..=max_speed) as f64];
        let span = frames.saturating_sub(1) as f64;
        let lo = |vel: f64| (2.0 - vel.min(0.0) * span).max(2.0);
        let hi = |vel: f64, n: usize| n as f64 - side - 2.0 - vel.max(0.0) * span;
        let x0 = rng.gen_range(lo(v[0])..=hi(v[0], width).max(lo(v[0]))).round();
        let y0 = rng.gen_range(lo(v[1])..=hi(v[1], height).max(lo(v[1]))).round();
        let depth = [2.0, 2.5, 4.0, 5.0][rng.gen_range(0..4)];
        let mut tex = Texture::new(rng.gen::<u32>() as u64, 1.0);
        tex.base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        s.layers.push(Layer::rect([x0, y0, side, side], depth, v, tex));
        if camera {
            // Shifts of f·t/d pixels: 100·0.2/10 = 2 for the background and
            // an integer for every square depth above.
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            s.camera_translation = [0.2 * sign, 0.0, 0.0];
        }
        s
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        pinhole(self.focal, self.focal, self.cx, self.cy)
    }

    pub fn pose(&self, t: usize) -> Matrix4<f64> {
        let t = t as f64;
        rigid_transform(
            Vector3::from(self.camera_rotation) * t,
            Vector3::from(self.camera_translation) * t,
        )
    }

    pub fn camera(&self, t: usize) -> Result<CameraModel> {
        CameraModel::new(self.intrinsics(), self.pose(t), self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::Config("scene needs a positive size and frame count".into()));
        }
        if self.layers.is_empty() || self.layers[0].rect.is_some() {
            return Err(Error::Config("layer 0 must be the unbounded background".into()));
        }
        if self.layers[1..].iter().any(|l| l.rect.is_none()) {
            return Err(Error::Config("only the background may be unbounded".into()));
        }
        for l in &self.layers {
            if !(l.texture.cell > 0.0) {
                return Err(Error::Config("texture cell size must be positive".into()));
            }
        }
        for t in 0..self.frames {
            let tf = t as f64;
            for (i, a) in self.layers.iter().enumerate() {
                if !(a.depth_at(tf) > 0.0) {
                    return Err(Error::domain(format!("layer {i} has depth {} at frame {t}", a.depth_at(tf))));
                }
                for (j, b) in self.layers.iter().enumerate().skip(i + 1) {
                    if a.depth_at(tf) == b.depth_at(tf) && a.overlaps(b, tf) {
                        return Err(Error::domain(format!(
                            "layers {i} and {j} overlap at the same depth in frame {t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// World position of layer point `(s, r)` at time `t`.
    pub fn layer_point(&self, layer: usize, s: f64, r: f64, t: f64) -> Vector3<f64> {
        let l = &self.layers[layer];
        let [ox, oy] = l.origin_at(t);
        let d = l.depth_at(t);
        Vector3::new((ox + s - self.cx) / self.focal * d, (oy + r - self.cy) / self.focal * d, d)
    }

    pub fn render_frame(&self, t: usize) -> Result<RenderedFrame> {
        let (h, w) = (self.height, self.width);
        let pose = self.pose(t);
        let rot = pose.fixed_view::<3, 3>(0, 0).into_owned();
        let trans = pose.fixed_view::<3, 1>(0, 3).into_owned();
        let centre = -(rot.transpose() * trans);
        let tf = t as f64;
        let mut frame = RenderedFrame {
            rgb: Array3::zeros((h, w, 3)),
            depth: Array2::zeros((h, w)),
            layer_id: Array2::zeros((h, w)),
            tex: Array3::zeros((h, w, 2)),
        };
        for y in 0..h {
            for x in 0..w {
                let ray_cam = Vector3::new((x as f64 - self.cx) / self.focal, (y as f64 - self.cy) / self.focal, 1.0);
                let dir = rot.transpose() * ray_cam;
                let mut best: Option<(f64, usize, f64, f64)> = None;
                for (id, layer) in self.layers.iter().enumerate() {
                    if dir.z.abs() < 1e-12 {
                        continue;
                    }
                    let d = layer.depth_at(tf);
                    let lambda = (d - centre.z) / dir.z;
                    if !(lambda > 0.0) {
                        continue;
                    }
                    let p = centre + dir * lambda;
                    let [ox, oy] = layer.origin_at(tf);
                    let s = snap_tex(self.focal * p.x / d + self.cx - ox);
                    let r = snap_tex(self.focal * p.y / d + self.cy - oy);
                    if !layer.contains(s, r) {
                        continue;
                    }
                    if best.is_none_or(|b| lambda < b.0) {
                        best = Some((lambda, id, s, r));
                    }
                }
                let Some((depth, id, s, r)) = best else {
                    return Err(Error::domain(format!("pixel ({x}, {y}) of frame {t} sees no layer")));
                };
                let c = self.layers[id].texture.sample(s, r);
                for ch in 0..3 {
                    frame.rgb[(y, x, ch)] = c[ch];
                }
                frame.depth[(y, x)] = depth;
                frame.layer_id[(y, x)] = id;
                frame.tex[(y, x, 0)] = s;
                frame.tex[(y, x, 1)] = r;
            }
        }
        Ok(frame)
    }

    /// Motion of the surface seen at each pixel of frame `from` between
    /// times `from` and `to`, expressed in view `from`: `H × W × 3` with
    /// pixel displacements and the change of camera depth.
    pub fn object_flow(&self, frame: &RenderedFrame, from: usize, to: usize) -> Array3<f64> {
        let (h, w) = (self.height, self.width);
        let pose = self.pose(from);
        let k = self.intrinsics();
        let mut out = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let id = frame.layer_id[(y, x)];
                let p = self.layer_point(id, frame.tex[(y, x, 0)], frame.tex[(y, x, 1)], to as f64);
                let cam = pose.fixed_view::<3, 3>(0, 0) * p + pose.fixed_view::<3, 1>(0, 3);
                let q = k * cam;
                out[(y, x, 0)] = snap_tex(q.x / q.z - x as f64);
                out[(y, x, 1)] = snap_tex(q.y / q.z - y as f64);
                out[(y, x, 2)] = cam.z - frame.depth[(y, x)];
            }
        }
        out
    }

    /// Pixels of `target` (rendered at time `t_target`) whose surface point
    /// is hidden or outside the frame at time `t_source`.
    pub fn disocclusion_mask(
        &self,
        target: &RenderedFrame,
        t_target: usize,
        source: &RenderedFrame,
        t_source: usize,
    ) -> Array2<bool> {
        let (h, w) = (self.height, self.width);
        let pose = self.pose(t_source);
        let k = self.intrinsics();
        let _ = t_target;
        Array2::from_shape_fn((h, w), |(y, x)| {
            let id = target.layer_id[(y, x)];
            let p = self.layer_point(id, target.tex[(y, x, 0)], target.tex[(y, x, 1)], t_source as f64);
            let cam = pose.fixed_view::<3, 3>(0, 0) * p + pose.fixed_view::<3, 1>(0, 3);
            if !(cam.z > 0.0) {
                return true;
            }
            let q = k * cam;
            let (qx, qy) = ((q.x / q.z).round(), (q.y / q.z).round());
            if qx < 0.0 || qy < 0.0 || qx >= w as f64 || qy >= h as f64 {
                return true;
            }
            source.layer_id[(qy as usize, qx as usize)] != id
        })
    }

    pub fn render_sequence(&self) -> Result<RenderedSequence> {
        self.validate()?;
        let frames = (0..self.frames).map(|t| self.render_frame(t)).collect::<Result<Vec<_>>>()?;
        let mut flows = Vec::new();
        let mut disocclusions = Vec::new();
        for t in 0..self.frames.saturating_sub(1) {
            flows.push(self.object_flow(&frames[t], t, t + 1));
            disocclusions.push(self.disocclusion_mask(&frames[t + 1], t + 1, &frames[t], t));
        }
        Ok(RenderedSequence {
            poses: (0..self.frames).map(|t| self.pose(t)).collect(),
            intrinsics: self.intrinsics(),
            frames,
            flows,
            disocclusions,
        })
    }

    /// Parse the flat `key = value` scene format (see [`Self::to_config`]).
    pub fn from_config(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |key: &str| -> Result<Option<f64>> {
            kv.get(key)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a number"))))
                .transpose()
        };
        let vec = |key: &str, n: usize| -> Result<Option<Vec<f64>>> {
            let Some(v) = kv.get(key) else { return Ok(None) };
            let vals = v
                .split_whitespace()
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a list of numbers")))?;
            if vals.len() != n {
                return Err(Error::Config(format!("`{key}` needs {n} numbers, got {}", vals.len())));
            }
            Ok(Some(vals))
        };
        let count = |key: &str, default: usize| -> Result<usize> {
            match num(key)? {
                None => Ok(default),
                Some(v) if v >= 0.0 && v.fract() == 0.0 => Ok(v as usize),
                Some(v) => Err(Error::Config(format!("`{key}` must be a whole number, got {v}"))),
            }
        };
        let width = count("width", 128)?;
        let height = count("height", 128)?;
        let mut scene = Self::new(width, height, count("frames", 3)?);
        if let Some(f) = num("focal")? {
            scene.focal = f;
        }
        if let Some(v) = num("cx")? {
            scene.cx = v;
        }
        if let Some(v) = num("cy")? {
            scene.cy = v;
        }
        if let Some(v) = vec("camera.translation", 3)? {
            scene.camera_translation = [v[0], v[1], v[2]];
        }
        if let Some(v) = vec("camera.rotation", 3)? {
            scene.camera_rotation = [v[0], v[1], v[2]];
        }

        let mut layer_keys: BTreeMap<usize, ()> = BTreeMap::new();
        for key in kv.keys() {
            let known_top = [
                "width", "height", "frames", "focal", "cx", "cy", "camera.translation", "camera.rotation",
            ];
            if known_top.contains(&key.as_str()) || key.starts_with("background.") {
                continue;
            }
            let Some(rest) = key.strip_prefix("layer.") else {
                return Err(Error::Config(format!("unknown key `{key}`")));
            };
            let idx = rest
                .split('.')
                .next()
                .and_then(|i| i.parse::<usize>().ok())
                .ok_or_else(|| Error::Config(format!("bad layer key `{key}`")))?;
            layer_keys.insert(idx, ());
        }

        let read_layer = |prefix: &str, mut layer: Layer| -> Result<Layer> {
            const FIELDS: [&str; 9] =
                ["depth", "rect", "velocity", "depth_velocity", "seed", "cell", "color", "contrast", "kind"];
            for key in kv.keys().filter(|k| k.starts_with(&format!("{prefix}."))) {
                let field = &key[prefix.len() + 1..];
                if !FIELDS.contains(&field) {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
            if let Some(v) = num(&format!("{prefix}.depth"))? {
                layer.depth = v;
            }
            if let Some(v) = vec(&format!("{prefix}.rect"), 4)? {
                layer.rect = Some([v[0], v[1], v[2], v[3]]);
            }
            if let Some(v) = vec(&format!("{prefix}.velocity"), 2)? {
                layer.velocity = [v[0], v[1]];
            }
            if let Some(v) = num(&format!("{prefix}.depth_velocity"))? {
                layer.depth_velocity = v;
            }
            if let Some(v) = kv.get(&format!("{prefix}.seed")) {
                layer.texture.seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("`{prefix}.seed`: `{v}` is not an unsigned integer")))?;
            }
            if let Some(v) = num(&format!("{prefix}.cell"))? {
                layer.texture.cell = v;
            }
            if let Some(v) = vec(&format!("{prefix}.color"), 3)? {
                layer.texture.base = [v[0], v[1], v[2]];
            }
            if let Some(v) = num(&format!("{prefix}.contrast"))? {
                layer.texture.contrast = v;
            }
            Ok(layer)
        };
        scene.layers[0] = read_layer("background", scene.layers[0].clone())?;
        if scene.layers[0].rect.is_some() {
            return Err(Error::Config("the background cannot have a rect".into()));
        }
        for (&idx, _) in &layer_keys {
            let prefix = format!("layer.{idx}");
            let layer = read_layer(&prefix, Layer::rect([0.0; 4], 1.0, [0.0; 2], Texture::new(7 + idx as u64, 1.0)))?;
            if !kv.contains_key(&format!("{prefix}.rect")) {
                return Err(Error::Config(format!("`{prefix}.rect` is required")));
            }
            scene.layers.push(layer);
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_config(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "focal = {}", self.focal);
        let _ = writeln!(s, "cx = {}", self.cx);
        let _ = writeln!(s, "cy = {}", self.cy);
        let [a, b, c] = self.camera_translation;
        let _ = writeln!(s, "camera.translation = {a} {b} {c}");
        let [a, b, c] = self.camera_rotation;
        let _ = writeln!(s, "camera.rotation = {a} {b} {c}");
        for (i, l) in self.layers.iter().enumerate() {
            let prefix = if i == 0 { "background".to_string() } else { format!("layer.{}", i - 1) };
            let _ = writeln!(s, "{prefix}.depth = {}", l.depth);
            if let Some([x, y, w, h]) = l.rect {
                let _ = writeln!(s, "{prefix}.rect = {x} {y} {w} {h}");
                let _ = writeln!(s, "{prefix}.velocity = {} {}", l.velocity[0], l.velocity[1]);
            }
            let _ = writeln!(s, "{prefix}.depth_velocity = {}", l.depth_velocity);
            let _ = writeln!(s, "{prefix}.seed = {}", l.texture.seed);
            let _ = writeln!(s, "{prefix}.cell = {}", l.texture.cell);
            let [r, g, b] = l.texture.base;
            let _ = writeln!(s, "{prefix}.color = {r} {g} {b}");
            let _ = writeln!(s, "{prefix}.contrast = {}", l.texture.contrast);
        }
        s
    }
}

/// Independent point-cloud renderer: unproject every pixel, move it to
/// `dst` and keep the nearest point per integer target pixel.
#[derive(Debug, Clone)]
pub struct OracleWarp {
    pub rgb: Array3<f64>,
    pub depth: Array2<f64>,
    pub hole: Array2<bool>,
}

pub fn oracle_pose_warp(
    rgb: &Array3<f64>,
    depth: &Array2<f64>,
    src: &CameraModel,
    dst: &CameraModel,
) -> Result<OracleWarp> {
    let (h, w, c) = rgb.dim();
    if depth.dim() != (h, w) {
        return Err(Error::dim(format!("rgb {:?} vs depth {:?}", rgb.dim(), depth.dim())));
    }
    let (th, tw) = (dst.height, dst.width);
    let k_inv = src
        .intrinsics
        .try_inverse()
        .ok_or_else(|| Error::domain("singular source intrinsics"))?;
    let src_inv = src
        .pose
        .try_inverse()
        .ok_or_else(|| Error::domain("singular source pose"))?;
    let rel = dst.pose * src_inv;
    let mut out = OracleWarp {
        rgb: Array3::zeros((th, tw, c)),
        depth: Array2::from_elem((th, tw), f64::INFINITY),
        hole: Array2::from_elem((th, tw), true),
    };
    for y in 0..h {
        for x in 0..w {
            let d = depth[(y, x)];
            let p = k_inv * Vector3::new(x as f64, y as f64, 1.0) * d;
            let q = rel * p.push(1.0);
            if !(q.z > 0.0) {
                continue;
            }
            let pix = dst.intrinsics * Vector3::new(q.x, q.y, q.z);
            let (u, v) = ((pix.x / pix.z).round(), (pix.y / pix.z).round());
            if u < 0.0 || v < 0.0 || u >= tw as f64 || v >= th as f64 {
                continue;
            }
            let (u, v) = (u as usize, v as usize);
            if q.z < out.depth[(v, u)] {
                out.depth[(v, u)] = q.z;
                out.hole[(v, u)] = false;
                for ch in 0..c {
                    out.rgb[(v, u, ch)] = rgb[(y, x, ch)];
                }
            }
        }
    }
    out.depth.mapv_inplace(|d| if d.is_finite() { d } else { 0.0 });
    Ok(out)
}
