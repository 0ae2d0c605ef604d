//! Sequence loading and future-frame prediction.
//!
//! A prediction reads exactly two frames, `n` and `n - k`, plus the camera
//! poses of every frame involved, and produces frames `n + k'` for each
//! requested step `k'`.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use nalgebra::{Matrix3, Matrix4};
use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::error::{Error, Result, StageExt};
use crate::flow::{
    estimate_flow_matcher, estimate_flow_network, extrapolate_flow, reduce_flow_to_real, Flow3D,
    FlowNetworkWeights, MatcherConfig, RealFlow,
};
use crate::geometry::CameraModel;
use crate::infill::{detect_disocclusions, infill_iterative, infill_step, InfillMethod, DEFAULT_ITERATIONS};
use crate::io;
use crate::mpi::{alpha_composite, build_mpi, build_mpi_on, warp_mpi, MultiPlaneImage};
use crate::synthetic::RenderedSequence;

pub const DEFAULT_PLANES: usize = 4;
pub const DEFAULT_S_Z: usize = 1;

#[derive(Debug, Clone)]
enum FrameStore {
    Memory {
        rgb: Vec<Array3<f64>>,
        depth: Vec<Array2<f64>>,
    },
    Directory {
        rgb: Vec<PathBuf>,
        depth: Vec<PathBuf>,
    },
}

/// Frames `0..len` with their depth maps, one world-to-camera pose per frame
/// (and optionally further poses for frames not rendered yet) and shared
/// intrinsics. Every frame read is logged so callers can check which frames
/// a computation touched.
#[derive(Debug)]
pub struct SequenceDataset {
    store: FrameStore,
    pub poses: Vec<Matrix4<f64>>,
    pub intrinsics: Matrix3<f64>,
    pub width: usize,
    pub height: usize,
    pub frame_rate: Option<f64>,
    reads: Mutex<Vec<usize>>,
}

impl SequenceDataset {
    pub fn in_memory(
        rgb: Vec<Array3<f64>>,
        depth: Vec<Array2<f64>>,
        poses: Vec<Matrix4<f64>>,
        intrinsics: Matrix3<f64>,
    ) -> Result<Self> {
        if rgb.len() != depth.len() {
            return Err(Error::Input(format!("{} frames but {} depth maps", rgb.len(), depth.len())));
        }
        let (height, width) = match rgb.first() {
            Some(f) => (f.dim().0, f.dim().1),
            None => return Err(Error::Input("sequence has no frames".into())),
        };
        for (i, (f, d)) in rgb.iter().zip(&depth).enumerate() {
            if f.dim() != (height, width, 3) || d.dim() != (height, width) {
                return Err(Error::Input(format!(
                    "frame {i} is {:?} with depth {:?}, expected {height}×{width}",
                    f.dim(),
                    d.dim()
                )));
            }
        }
        Self::finish(FrameStore::Memory { rgb, depth }, poses, intrinsics, width, height)
    }

    pub fn from_synthetic(seq: &RenderedSequence) -> Result<Self> {
        Self::in_memory(
            seq.frames.iter().map(|f| f.rgb.clone()).collect(),
            seq.frames.iter().map(|f| f.depth.clone()).collect(),
            seq.poses.clone(),
            seq.intrinsics,
        )
    }

    fn finish(
        store: FrameStore,
        poses: Vec<Matrix4<f64>>,
        intrinsics: Matrix3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let ds = Self {
            store,
            poses,
            intrinsics,
            width,
            height,
            frame_rate: None,
            reads: Mutex::new(Vec::new()),
        };
        if ds.poses.len() < ds.len() {
            return Err(Error::Input(format!("{} frames but only {} poses", ds.len(), ds.poses.len())));
        }
        crate::geometry::validate_intrinsics(&ds.intrinsics)?;
        for (i, p) in ds.poses.iter().enumerate() {
            crate::geometry::validate_pose(p).map_err(|e| Error::Input(format!("pose {i}: {e}")))?;
        }
        Ok(ds)
    }

    /// Open a directory of `NNNN.png` frames numbered from 0 with
    /// `NNNN.dpt` or `NNNN.pfm` depth, `poses.txt`, `intrinsics.txt` and an
    /// optional `frame_rate.txt`. Frames are loaded on demand.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut rgb = Vec::new();
        let mut depth = Vec::new();
        loop {
            let stem = io::frame_stem(rgb.len());
            let png = dir.join(format!("{stem}.png"));
            if !png.is_file() {
                break;
            }
            let d = ["dpt", "pfm"]
                .iter()
                .map(|e| dir.join(format!("{stem}.{e}")))
                .find(|p| p.is_file())
                .ok_or_else(|| Error::Input(format!("frame {stem} has no .dpt or .pfm depth map")))?;
            rgb.push(png);
            depth.push(d);
        }
        if rgb.is_empty() {
            return Err(Error::Input(format!("{} has no 0000.png", dir.display())));
        }
        let poses = io::read_poses(&dir.join("poses.txt"))?;
        let intrinsics = io::read_intrinsics(&dir.join("intrinsics.txt"))?;
        let first = io::read_png(&rgb[0])?;
        let (height, width, _) = first.dim();
        let mut ds = Self::finish(FrameStore::Directory { rgb, depth }, poses, intrinsics, width, height)?;
        let rate = dir.join("frame_rate.txt");
        if rate.is_file() {
            let text = std::fs::read_to_string(&rate).map_err(|e| Error::io(&rate, e))?;
            ds.frame_rate = Some(
                text.trim()
                    .parse()
                    .map_err(|_| Error::Input(format!("{}: not a number", rate.display())))?,
            );
        }
        Ok(ds)
    }

    /// Write the dataset in the layout [`Self::open`] reads. Frames go
    /// through 8-bit PNG and depth through `f32`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for i in 0..self.len() {
            let (rgb, depth) = self.load(i)?;
            let stem = io::frame_stem(i);
            io::write_png(&dir.join(format!("{stem}.png")), rgb.view())?;
            io::write_dpt(&dir.join(format!("{stem}.dpt")), depth.view())?;
        }
        io::write_poses(&dir.join("poses.txt"), &self.poses)?;
        io::write_intrinsics(&dir.join("intrinsics.txt"), &self.intrinsics)?;
        if let Some(rate) = self.frame_rate {
            let path = dir.join("frame_rate.txt");
            std::fs::write(&path, format!("{rate}\n")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.store {
            FrameStore::Memory { rgb, .. } => rgb.len(),
            FrameStore::Directory { rgb, .. } => rgb.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn load(&self, i: usize) -> Result<(Array3<f64>, Array2<f64>)> {
        if i >= self.len() {
            return Err(Error::Input(format!("frame {i} is past the end of a {}-frame sequence", self.len())));
        }
        let (rgb, depth) = match &self.store {
            FrameStore::Memory { rgb, depth } => (rgb[i].clone(), depth[i].clone()),
            FrameStore::Directory { rgb, depth } => (io::read_png(&rgb[i])?, io::read_depth(&depth[i])?),
        };
        if rgb.dim() != (self.height, self.width, 3) || depth.dim() != (self.height, self.width) {
            return Err(Error::Input(format!(
                "frame {i} is {:?} with depth {:?}, expected {}×{}",
                rgb.dim(),
                depth.dim(),
                self.height,
                self.width
            )));
        }
        Ok((rgb, depth))
    }

    /// RGB and depth of frame `i`; the read is logged.
    pub fn frame(&self, i: usize) -> Result<(Array3<f64>, Array2<f64>)> {
        self.reads.lock().expect("read log").push(i);
        self.load(i)
    }

    /// Frame indices read through [`Self::frame`] so far, in order.
    pub fn frames_read(&self) -> Vec<usize> {
        self.reads.lock().expect("read log").clone()
    }

    pub fn clear_read_log(&self) {
        self.reads.lock().expect("read log").clear();
    }

    pub fn camera(&self, i: usize) -> Result<CameraModel> {
        let pose = self
            .poses
            .get(i)
            .ok_or_else(|| Error::Input(format!("no camera pose for frame {i}")))?;
        CameraModel::new(self.intrinsics, *pose, self.width, self.height)
    }
}

#[derive(Debug, Clone)]
pub enum FlowBackend {
    Matcher(MatcherConfig),
    Network(Box<FlowNetworkWeights>),
}

impl FlowBackend {
    pub fn name(&self) -> &'static str {
        match self {
            FlowBackend::Matcher(_) => "matcher",
            FlowBackend::Network(_) => "network",
        }
    }

    fn s_z(&self) -> usize {
        match self {
            FlowBackend::Matcher(c) => c.s_z,
            FlowBackend::Network(w) => w.config.s_z,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictionRequest {
    /// Index `n` of the latest rendered frame.
    pub index: usize,
    /// Frame-rate upsampling factor `k`; frame `n - k` is the past input.
    pub factor: usize,
    /// Steps `k'` to predict, each in `1..k`.
    pub steps: Vec<usize>,
    pub num_planes: usize,
    /// Optional fixed `(near, far)` depth range for the plane table.
    pub depth_range: Option<(f64, f64)>,
    pub backend: FlowBackend,
    pub infill: InfillMethod,
    pub iterations: usize,
    /// Keep the per-stage composites.
    pub keep_intermediates: bool,
}

impl PredictionRequest {
    /// All steps `1..k` with the default planes, matcher and nearest-valid
    /// infilling.
    pub fn new(index: usize, factor: usize) -> Self {
        Self {
            index,
            factor,
            steps: (1..factor).collect(),
            num_planes: DEFAULT_PLANES,
            depth_range: None,
            backend: FlowBackend::Matcher(MatcherConfig {
                s_z: DEFAULT_S_Z,
                ..MatcherConfig::default()
            }),
            infill: InfillMethod::NearestValid,
            iterations: DEFAULT_ITERATIONS,
            keep_intermediates: false,
        }
    }

    pub fn validate(&self, dataset: &SequenceDataset) -> Result<()> {
        let (n, k) = (self.index, self.factor);
        if k < 2 {
            return Err(Error::Config(format!("upsampling factor must be at least 2, got {k}")));
        }
        if n < k {
            return Err(Error::Input(format!("frame {n} has no frame {k} steps before it")));
        }
        if n >= dataset.len() {
            return Err(Error::Input(format!("frame {n} is not in a {}-frame sequence", dataset.len())));
        }
        if self.steps.is_empty() {
            return Err(Error::Config("no prediction steps requested".into()));
        }
        for &s in &self.steps {
            if s == 0 || s >= k {
                return Err(Error::Config(format!("step {s} is outside 1..{k}")));
            }
            if n + s >= dataset.poses.len() {
                return Err(Error::Input(format!("no camera pose for frame {}", n + s)));
            }
        }
        if self.num_planes < 2 {
            return Err(Error::Config("at least two planes are needed".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("infill needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Composites of the stages leading to one predicted frame.
#[derive(Debug, Clone)]
pub struct Intermediates {
    /// Past frame `n - k` seen from view `n`.
    pub camera_compensated: Array3<f64>,
    /// Frame `n` moved by the extrapolated local motion only.
    pub local_motion: Array3<f64>,
    /// Frame `n` moved by local motion and camera motion, before infilling.
    pub total_motion: Array3<f64>,
    pub infilled: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictedFrame {
    pub step: usize,
    pub frame_index: usize,
    pub rgb: Array3<f64>,
    /// Pixels that were holes before infilling.
    pub infilled_mask: Array2<bool>,
    /// Pixels still holes after infilling.
    pub hole_mask: Array2<bool>,
    pub intermediates: Option<Intermediates>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameDiagnostics {
    pub step: usize,
    pub frame_index: usize,
    pub holes_before_infill: usize,
    pub holes_after_infill: usize,
    /// Nearest-valid pass applied after the selected method left holes.
    pub nearest_fallback: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub index: usize,
    pub factor: usize,
    pub plane_depths: Vec<f64>,
    pub backend: String,
    pub infill: String,
    pub iterations: usize,
    pub frames_read: Vec<usize>,
    pub occupied_voxels: usize,
    pub mean_flow_magnitude: f64,
    pub max_flow_magnitude: f64,
    pub frames: Vec<FrameDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub frames: Vec<PredictedFrame>,
    /// Estimated flow from `m_n` towards the camera-compensated `m_{n-k}`.
    pub flow: Flow3D,
    pub real_flow: RealFlow,
    pub diagnostics: Diagnostics,
}

fn infill_name(m: &InfillMethod) -> &'static str {
    match m {
        InfillMethod::NearestValid => "nearest",
        InfillMethod::Network(_) => "network",
    }
}

fn count(mask: &Array2<bool>) -> usize {
    mask.iter().filter(|&&v| v).count()
}

/// Predict frames `n + k'` from frames `n` and `n - k`.
pub fn predict_frames(dataset: &SequenceDataset, request: &PredictionRequest) -> Result<Prediction> {
    request.validate(dataset).stage("request")?;
    let (n, k) = (request.index, request.factor);
    let reads_before = dataset.frames_read().len();

    let (rgb_n, depth_n) = dataset.frame(n).stage("load")?;
    let (rgb_p, depth_p) = dataset.frame(n - k).stage("load")?;
    let cam_n = dataset.camera(n).stage("load")?;
    let cam_p = dataset.camera(n - k).stage("load")?;

    let m_n = build_mpi(rgb_n.view(), depth_n.view(), request.num_planes, request.depth_range).stage("build-mpi")?;
    let planes = m_n.planes.clone();
    let m_p = build_mpi_on(rgb_p.view(), depth_p.view(), &planes);

    let m_p_warped = warp_mpi(&m_p, &cam_p, &cam_n, None, &planes).stage("camera-compensation")?;

    let flow = match &request.backend {
        FlowBackend::Matcher(cfg) => estimate_flow_matcher(&m_n, &m_p_warped, cfg),
        FlowBackend::Network(w) => estimate_flow_network(&m_n, &m_p_warped, w),
    }
    .stage("flow-estimation")?;
    debug_assert_eq!(flow.s_z, request.backend.s_z());
    let real = reduce_flow_to_real(&flow, &planes).stage("flow-estimation")?;

    let camera_compensated = if request.keep_intermediates {
        Some(alpha_composite(&m_p_warped).stage("composite")?.rgb)
    } else {
        None
    };

    let mut frames = Vec::with_capacity(request.steps.len());
    let mut frame_diag = Vec::with_capacity(request.steps.len());
    for &step in &request.steps {
        let target = n + step;
        let cam_t = dataset.camera(target).stage("load")?;
        let u = extrapolate_flow(&real, k, step).stage("extrapolation")?;
        let warped = warp_mpi(&m_n, &cam_n, &cam_t, Some(&u), &planes).stage("warp")?;
        let before = alpha_composite(&warped).stage("composite")?;
        let mut filled = infill_iterative(&warped, &request.infill, request.iterations).stage("infill")?;
        let mut fallback = false;
        if !matches!(request.infill, InfillMethod::NearestValid)
            && detect_disocclusions(&filled).iter().any(|&v| v == 1.0)
        {
            filled = infill_step(&filled, &InfillMethod::NearestValid).stage("infill")?;
            fallback = true;
        }
        let after = alpha_composite(&filled).stage("composite")?;
        let intermediates = match &camera_compensated {
            Some(cc) => {
                let local = warp_mpi(&m_n, &cam_n, &cam_n, Some(&u), &planes).stage("warp")?;
                Some(Intermediates {
                    camera_compensated: cc.clone(),
                    local_motion: alpha_composite(&local).stage("composite")?.rgb,
                    total_motion: before.rgb.clone(),
                    infilled: after.rgb.clone(),
                })
            }
            None => None,
        };
        frame_diag.push(FrameDiagnostics {
            step,
            frame_index: target,
            holes_before_infill: count(&before.hole_mask),
            holes_after_infill: count(&after.hole_mask),
            nearest_fallback: fallback,
        });
        frames.push(PredictedFrame {
            step,
            frame_index: target,
            rgb: after.rgb,
            infilled_mask: before.hole_mask,
            hole_mask: after.hole_mask,
            intermediates,
        });
    }

    let (occupied, mean_mag, max_mag) = flow_stats(&flow, &m_n);
    let diagnostics = Diagnostics {
        index: n,
        factor: k,
        plane_depths: planes.depths().to_vec(),
        backend: request.backend.name().into(),
        infill: infill_name(&request.infill).into(),
        iterations: request.iterations,
        frames_read: dataset.frames_read()[reads_before..].to_vec(),
        occupied_voxels: occupied,
        mean_flow_magnitude: mean_mag,
        max_flow_magnitude: max_mag,
        frames: frame_diag,
    };
    Ok(Prediction {
        frames,
        flow,
        real_flow: real,
        diagnostics,
    })
}

/// Occupied voxel count and mean / max x-y flow length over them.
fn flow_stats(flow: &Flow3D, mpi: &MultiPlaneImage) -> (usize, f64, f64) {
    let mut n = 0;
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for ((p, y, x), &a) in mpi.alpha.indexed_iter() {
        if a > 0.0 {
            let m = flow.xy[(p, y, x, 0)].hypot(flow.xy[(p, y, x, 1)]);
            n += 1;
            sum += m;
            max = max.max(m);
        }
    }
    (n, if n == 0 { 0.0 } else { sum / n as f64 }, max)
}

/// Write predicted frames as `NNNN.png`, plus `diagnostics.json` and, when
/// kept, per-stage composites and the raw flow under `intermediates/`.
pub fn write_prediction(pred: &Prediction, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for f in &pred.frames {
        let path = out_dir.join(format!("{}.png", io::frame_stem(f.frame_index)));
        io::write_png(&path, f.rgb.view())?;
        written.push(path);
        if let Some(im) = &f.intermediates {
            let dir = out_dir.join("intermediates");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let stem = io::frame_stem(f.frame_index);
            for (name, img) in [
                ("camera-compensated", &im.camera_compensated),
                ("local-motion", &im.local_motion),
                ("total-motion", &im.total_motion),
                ("infilled", &im.infilled),
            ] {
                let p = dir.join(format!("{stem}_{name}.png"));
                io::write_png(&p, img.view())?;
                written.push(p);
            }
            let mask = f.infilled_mask.mapv(|v| if v { 1.0 } else { 0.0 });
            let p = dir.join(format!("{stem}_holes.png"));
            io::write_gray_png(&p, mask.view())?;
            written.push(p);
        }
    }
    if pred.frames.iter().any(|f| f.intermediates.is_some()) {
        let dir = out_dir.join("intermediates");
        let p = dir.join("flow_xy.raw");
        io::write_raw(&p, pred.flow.xy.view().into_dyn())?;
        written.push(p);
        let p = dir.join("flow_depth_dist.raw");
        io::write_raw(&p, pred.flow.depth_dist.view().into_dyn())?;
        written.push(p);
        let p = dir.join("flow_real.raw");
        io::write_raw(&p, pred.real_flow.0.view().into_dyn())?;
        written.push(p);
    }
    let p = out_dir.join("diagnostics.json");
    let json = serde_json::to_string_pretty(&pred.diagnostics).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(written)
}
