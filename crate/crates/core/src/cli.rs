//! Command-line front end: `predict`, `evaluate`, `synth` and `selftest`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::flow::{FlowNetworkWeights, MatcherConfig};
use crate::infill::{InfillMethod, InfillNetworkWeights, DEFAULT_ITERATIONS};
use crate::io::read_png;
use crate::metrics::{crop_with_margins, EvalReport};
use crate::pipeline::{
    predict_frames, write_prediction, FlowBackend, PredictionRequest, SequenceDataset, DEFAULT_PLANES, DEFAULT_S_Z,
};
use crate::selftest::run_selftest;
use crate::synthetic::SyntheticScene;
use crate::weights::NamedTensors;

const DEFAULT_CROP: &str = "40,60";

#[derive(Debug, Parser)]
#[command(name = "tvs", version, about = "Predict future frames of dynamic scenes from past RGB-D frames")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Predict frames n+1 .. n+k-1 from frames n and n-k.
    Predict(PredictArgs),
    /// Score predicted frames against ground truth.
    Evaluate(EvaluateArgs),
    /// Render a synthetic sequence from a scene config.
    Synth(SynthArgs),
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Matcher,
    Network,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InfillArg {
    Nearest,
    Network,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    input_dir: PathBuf,
    /// Index n of the latest rendered frame.
    #[arg(long)]
    index: usize,
    /// Frame-rate upsampling factor k.
    #[arg(long, default_value_t = 2)]
    factor: usize,
    #[arg(long, default_value_t = DEFAULT_PLANES)]
    planes: usize,
    #[arg(long, default_value_t = DEFAULT_S_Z)]
    sz: usize,
    #[arg(long, value_enum, default_value_t = BackendArg::Matcher)]
    backend: BackendArg,
    /// Flow network weights (required with `--backend network`).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = InfillArg::Nearest)]
    infill: InfillArg,
    /// Infilling network weights (required with `--infill network`).
    #[arg(long)]
    infill_weights: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iterations: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    dump_intermediates: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// Margins as `top_bottom,left_right`.
    #[arg(long, value_parser = parse_crop, default_value = DEFAULT_CROP)]
    crop: (usize, usize),
    /// Report path; `.json` writes JSON, anything else CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    scene_config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_crop(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `top_bottom,left_right`, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad margin `{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

/// Parse `args` (including the program name), run the command and return
/// the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: setup: {e}");
            return 1;
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Predict(a) => predict(&a).context("predict"),
        Command::Evaluate(a) => evaluate(&a).context("evaluate"),
        Command::Synth(a) => synth(&a).context("synth"),
        Command::Selftest => selftest(),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_weights(path: Option<&Path>, flag: &str) -> anyhow::Result<NamedTensors> {
    let Some(path) = path else {
        bail!("{flag} is required for the network method");
    };
    Ok(NamedTensors::load(path)?)
}

fn predict(a: &PredictArgs) -> anyhow::Result<()> {
    let dataset = SequenceDataset::open(&a.input_dir)?;
    let mut req = PredictionRequest::new(a.index, a.factor);
    req.num_planes = a.planes;
    req.iterations = a.iterations;
    req.keep_intermediates = a.dump_intermediates;
    req.backend = match a.backend {
        BackendArg::Matcher => FlowBackend::Matcher(MatcherConfig {
            s_z: a.sz,
            ..MatcherConfig::default()
        }),
        BackendArg::Network => {
            let w = FlowNetworkWeights::from_tensors(&load_weights(a.weights.as_deref(), "--weights")?)?;
            if w.config.s_z != a.sz {
                bail!("weights were built for s_z = {}, but --sz is {}", w.config.s_z, a.sz);
            }
            FlowBackend::Network(Box::new(w))
        }
    };
    req.infill = match a.infill {
        InfillArg::Nearest => InfillMethod::NearestValid,
        InfillArg::Network => InfillMethod::Network(Box::new(InfillNetworkWeights::from_tensors(&load_weights(
            a.infill_weights.as_deref(),
            "--infill-weights",
        )?)?)),
    };
    let pred = predict_frames(&dataset, &req)?;
    let written = write_prediction(&pred, &a.out_dir)?;
    for f in &pred.frames {
        println!("frame {:04}: {} hole pixels infilled", f.frame_index, f.infilled_mask.iter().filter(|&&v| v).count());
    }
    println!("wrote {} files to {}", written.len(), a.out_dir.display());
    Ok(())
}

fn frame_indices(dir: &Path) -> anyhow::Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if stem.len() == 4 && stem.bytes().all(|b| b.is_ascii_digit()) {
            out.push(stem.parse()?);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let indices = frame_indices(&a.pred_dir)?;
    if indices.is_empty() {
        bail!("no NNNN.png frames in {}", a.pred_dir.display());
    }
    let (tb, lr) = a.crop;
    let mut report = EvalReport::default();
    for i in indices {
        let name = format!("{i:04}.png");
        let pred = read_png(&a.pred_dir.join(&name))?;
        let gt = read_png(&a.gt_dir.join(&name))?;
        if pred.dim() != gt.dim() {
            bail!("{name}: prediction {:?} and ground truth {:?} differ in size", pred.dim(), gt.dim());
        }
        let pred = crop_with_margins(pred.view(), tb, lr)?;
        let gt = crop_with_margins(gt.view(), tb, lr)?;
        let m = report.evaluate_frame(i, pred.view(), gt.view(), None)?;
        println!("frame {:04}: psnr {:.3} dB, ssim {:.4}", i, m.psnr, m.ssim);
    }
    let agg = report.aggregate();
    println!("mean over {} frames: psnr {:.3} dB, ssim {:.4}", agg.frames, agg.mean_psnr, agg.mean_ssim);
    if let Some(path) = &a.report {
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            report.write_json(path)?;
        } else {
            report.write_csv(path)?;
        }
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.scene_config)
        .with_context(|| format!("reading {}", a.scene_config.display()))?;
    let scene = SyntheticScene::from_config(&text)?;
    let seq = scene.render_sequence()?;
    let dataset = SequenceDataset::from_synthetic(&seq)?;
    dataset.write(&a.out_dir)?;
    std::fs::write(a.out_dir.join("scene.cfg"), scene.to_config())?;
    println!("wrote {} frames to {}", dataset.len(), a.out_dir.display());
    Ok(())
}

fn selftest() -> anyhow::Result<()> {
    let checks = run_selftest();
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        bail!("selftest: {failed} of {} checks failed", checks.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{CROP_LEFT_RIGHT, CROP_TOP_BOTTOM};

    #[test]
    fn default_crop_matches_metrics() {
        assert_eq!(parse_crop(DEFAULT_CROP).unwrap(), (CROP_TOP_BOTTOM, CROP_LEFT_RIGHT));
        assert!(parse_crop("40").is_err());
        assert!(parse_crop("a,3").is_err());
    }

    #[test]
    fn unknown_flag_exits_nonzero() {
        assert_ne!(run_cli(["tvs", "predict", "--bogus"]), 0);
        assert_ne!(run_cli(["tvs"]), 0);
    }

    #[test]
    fn missing_input_reports_stage() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_cli([
            "tvs".as_ref(),
            "predict".as_ref(),
            "--input-dir".as_ref(),
            dir.path().join("absent").as_os_str(),
            "--index".as_ref(),
            "2".as_ref(),
            "--out-dir".as_ref(),
            dir.path().as_os_str(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn network_backend_without_weights_fails() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SyntheticScene::moving_square(64, 48, 3, [20.0, 16.0, 12.0, 12.0], 4.0, [1.0, 0.0], [0.0; 3]);
        SequenceDataset::from_synthetic(&scene.render_sequence().unwrap())
            .unwrap()
            .write(dir.path())
            .unwrap();
        let d = dir.path().to_str().unwrap();
        let out = dir.path().join("out");
        let code = run_cli(["tvs", "predict", "--input-dir", d, "--index", "2", "--backend", "network", "--out-dir", out.to_str().unwrap()]);
        assert_eq!(code, 1);
    }
}
