//! Quick self-checks run by `tvs selftest`.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flow::correlation::dense_correlation;
use crate::flow::pconv::conv3d;
use crate::flow::{
    estimate_flow_matcher, estimate_flow_network, extrapolate_flow, masked_correlation, partial_conv3, ConvLayer,
    FlowNetworkConfig, FlowNetworkWeights, MatcherConfig, RealFlow, SearchWindow,
};
use crate::geometry::{pinhole, CameraModel};
use crate::infill::{detect_disocclusions, infill_iterative, InfillMethod};
use crate::metrics::composite_flow_to_pixels;
use crate::mpi::{alpha_composite, build_mpi, build_mpi_on, warp_mpi};
use crate::pipeline::{predict_frames, PredictionRequest, SequenceDataset};
use crate::synthetic::SyntheticScene;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Array3<f64>, Array2<f64>) {
    let rgb = Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>());
    let depth = Array2::from_shape_fn((h, w), |_| rng.gen_range(1.0..20.0));
    (rgb, depth)
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn run_selftest() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    out.push(check("mpi round trip", || {
        let mut worst: f64 = 0.0;
        for z in [2, 4, 8] {
            let (rgb, depth) = random_frame(&mut rng, 24, 32);
            let m = build_mpi(rgb.view(), depth.view(), z, None)?;
            worst = worst.max(max_abs_diff(alpha_composite(&m)?.rgb.iter(), rgb.iter()));
        }
        Ok((worst == 0.0, format!("max error {worst:e}")))
    }));

    out.push(check("identity warp", || {
        let (rgb, depth) = random_frame(&mut rng, 20, 24);
        let m = build_mpi(rgb.view(), depth.view(), 4, None)?;
        let cam = CameraModel::identity(pinhole(30.0, 30.0, 12.0, 10.0), 24, 20)?;
        let w = warp_mpi(&m, &cam, &cam, None, &m.planes)?;
        let err = max_abs_diff(w.color.iter(), m.color.iter())
            .max(max_abs_diff(w.alpha.iter(), m.alpha.iter()))
            .max(max_abs_diff(w.depth.iter(), m.depth.iter()));
        Ok((err <= 1e-6, format!("max error {err:e}")))
    }));

    out.push(check("masked correlation on full masks", || {
        let h1 = Array4::from_shape_fn((5, 3, 9, 8), |_| rng.gen_range(-1.0..1.0));
        let h2 = Array4::from_shape_fn((5, 3, 9, 8), |_| rng.gen_range(-1.0..1.0));
        let ones = Array3::ones((3, 9, 8));
        let win = SearchWindow::new(2, 1);
        let a = masked_correlation(h1.view(), ones.view(), h2.view(), ones.view(), win)?;
        let b = dense_correlation(h1.view(), h2.view(), win)?;
        let err = max_abs_diff(a.scores.iter(), b.scores.iter());
        Ok((err <= 1e-6, format!("max error {err:e}")))
    }));

    out.push(check("partial conv on full mask", || {
        let x = Array4::from_shape_fn((3, 4, 10, 9), |_| rng.gen_range(-1.0..1.0));
        let mut layer = ConvLayer::zeros(3, 6, [3, 3, 3], [1, 2, 2], [1, 1, 1]);
        layer.randomize(&mut rng);
        let ones = Array3::ones((4, 10, 9));
        let (a, m) = partial_conv3(x.view(), ones.view(), &layer)?;
        let b = conv3d(x.view(), &layer)?;
        let err = max_abs_diff(a.iter(), b.iter());
        Ok((err <= 1e-6 && m.iter().all(|&v| v == 1.0), format!("max error {err:e}")))
    }));

    out.push(check("matcher exactness", || {
        let mut worst: f64 = 0.0;
        for seed in 0..2 {
            let scene = SyntheticScene::random_translating(seed, 96, 96, 2, 4, false);
            let seq = scene.render_sequence()?;
            let (f1, f0) = (&seq.frames[1], &seq.frames[0]);
            let m_ref = build_mpi(f1.rgb.view(), f1.depth.view(), 4, None)?;
            let m_src = build_mpi_on(f0.rgb.view(), f0.depth.view(), &m_ref.planes);
            let flow = estimate_flow_matcher(&m_ref, &m_src, &MatcherConfig::default())?;
            let (est, _) = composite_flow_to_pixels(flow.xy.view(), m_ref.alpha.view())?;
            let gt = scene.object_flow(f1, 1, 0);
            let hidden = scene.disocclusion_mask(f1, 1, f0, 0);
            for ((y, x), &h) in hidden.indexed_iter() {
                if !h {
                    worst = worst
                        .max((est[(y, x, 0)] - gt[(y, x, 0)]).abs())
                        .max((est[(y, x, 1)] - gt[(y, x, 1)]).abs());
                }
            }
        }
        Ok((worst == 0.0, format!("max x-y error {worst}")))
    }));

    out.push(check("flow extrapolation", || {
        let u = RealFlow(Array4::from_shape_fn((2, 4, 5, 3), |_| rng.gen_range(-5.0..5.0)));
        let mut ok = true;
        for kp in 1..5 {
            let e = extrapolate_flow(&u, 5, kp)?;
            ok &= e.0.iter().zip(u.0.iter()).all(|(a, b)| *a == -(kp as f64 / 5.0) * b);
        }
        Ok((ok, "k = 5, k' = 1..4".into()))
    }));

    out.push(check("zero-weight flow network", || {
        let cfg = FlowNetworkConfig { radius_xy: 2, s_z: 1 };
        let (rgb, depth) = random_frame(&mut rng, 16, 16);
        let m = build_mpi(rgb.view(), depth.view(), 2, None)?;
        let f = estimate_flow_network(&m, &m, &FlowNetworkWeights::zeros(cfg))?;
        let uniform = f.depth_dist.iter().all(|&b| (b - 1.0 / 3.0).abs() < 1e-12);
        Ok((f.xy.iter().all(|&v| v == 0.0) && uniform, "zero x-y, uniform depth".into()))
    }));

    out.push(check("nearest-valid infill", || {
        let (rgb, depth) = random_frame(&mut rng, 12, 16);
        let mut m = build_mpi(rgb.view(), depth.view(), 3, None)?;
        for p in 0..3 {
            for y in 0..12 {
                for x in 6..11 {
                    m.alpha[(p, y, x)] = 0.0;
                }
            }
        }
        let filled = infill_iterative(&m, &InfillMethod::NearestValid, 3)?;
        let holes = detect_disocclusions(&filled).iter().filter(|&&v| v == 1.0).count();
        Ok((holes == 0, format!("{holes} hole voxels left")))
    }));

    out.push(check("prediction determinism", || {
        let scene = SyntheticScene::moving_square(96, 80, 4, [30.0, 24.0, 20.0, 20.0], 4.0, [2.0, 1.0], [0.05, 0.0, 0.0]);
        let ds = SequenceDataset::from_synthetic(&scene.render_sequence()?)?;
        let req = PredictionRequest::new(2, 2);
        let a = predict_frames(&ds, &req)?;
        let b = predict_frames(&ds, &req)?;
        let same = a.frames.iter().zip(&b.frames).all(|(x, y)| x.rgb == y.rgb);
        Ok((same, "two runs, identical frames".into()))
    }));

    out
}
