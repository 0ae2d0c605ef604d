mod common;

use tvs_core::infill::{infill_iterative, InfillMethod};
use tvs_core::mpi::{alpha_composite, build_mpi, warp_mpi};
use tvs_core::pipeline::{predict_frames, PredictionRequest, SequenceDataset};
use tvs_core::synthetic::SyntheticScene;

fn square_dataset(camera: [f64; 3]) -> SequenceDataset {
    let scene = SyntheticScene::moving_square(96, 80, 12, [30.0, 24.0, 20.0, 20.0], 4.0, [2.0, 1.0], camera);
    SequenceDataset::from_synthetic(&scene.render_sequence().unwrap()).unwrap()
}

#[test]
fn only_frames_n_and_n_minus_k_are_read() {
    let ds = square_dataset([0.05, 0.0, 0.0]);
    for (n, k) in [(4, 2), (6, 3), (8, 4)] {
        ds.clear_read_log();
        let pred = predict_frames(&ds, &PredictionRequest::new(n, k)).unwrap();
        let mut read = ds.frames_read();
        read.sort_unstable();
        read.dedup();
        assert_eq!(read, vec![n - k, n]);
        assert_eq!(pred.frames.len(), k - 1);
    }
}

#[test]
fn static_scene_equals_pose_warp_then_infill() {
    let mut scene = SyntheticScene::new(96, 80, 6);
    scene.camera_translation = [0.08, 0.02, 0.05];
    let ds = SequenceDataset::from_synthetic(&scene.render_sequence().unwrap()).unwrap();
    let req = PredictionRequest::new(3, 3);
    let pred = predict_frames(&ds, &req).unwrap();
    assert_eq!(pred.diagnostics.max_flow_magnitude, 0.0);

    let (rgb, depth) = ds.frame(3).unwrap();
    let m = build_mpi(rgb.view(), depth.view(), req.num_planes, None).unwrap();
    let cam_n = ds.camera(3).unwrap();
    for f in &pred.frames {
        let cam_t = ds.camera(f.frame_index).unwrap();
        let warped = warp_mpi(&m, &cam_n, &cam_t, None, &m.planes).unwrap();
        let filled = infill_iterative(&warped, &InfillMethod::NearestValid, req.iterations).unwrap();
        let expect = alpha_composite(&filled).unwrap().rgb;
        assert!(common::max_abs_diff(f.rgb.iter(), expect.iter()) <= 1e-12, "frame {}", f.frame_index);
    }
}

#[test]
fn thread_count_does_not_change_the_prediction() {
    let ds = square_dataset([0.05, 0.01, 0.0]);
    let req = PredictionRequest::new(4, 2);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| predict_frames(&ds, &req).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.flow.xy, b.flow.xy);
    assert_eq!(a.frames[0].rgb, b.frames[0].rgb);
}
