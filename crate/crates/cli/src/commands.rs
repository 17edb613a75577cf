//! Pipeline stages. Each reads its inputs from the run directory (or the
//! ingest paths) and writes its outputs there, so stages can run alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use vpc_core::adapt::{adapt_sequence, correct_sequence, history_csv, HistoryRow};
use vpc_core::ddim::{assemble_condition, ddim_sample, structural_features, OracleDenoiser};
use vpc_core::field::invert_point;
use vpc_core::interflow::{estimate_flow, read_flo, reverse_pair, write_flo};
use vpc_core::losses::loss_video;
use vpc_core::metrics::{
    line_acc, motion_series, report, shape_acc, spectrum_csv, stability_from_series, LineSample, MetricReport,
    StabilityReport, MIN_STABILITY_FRAMES,
};
use vpc_core::synth::{
    apply_jitter, apply_signal, face_mask, render_scene, stereographic_correction_flow, Annotations, JitterSignal,
    PointSet, SceneSpec,
};
use vpc_core::trajectory::{trajectory_of_sequence, TrajectorySeries};
use vpc_core::{BorderPolicy, Direction, FlowField, Frame, Mask};

use crate::config::{FlowSource, InputMode, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::io::{
    indexed, read_annotations, read_flow_seq, read_frames, read_mask, require_dir, write_bytes, write_flow,
    write_flow_seq, write_frame_seq, write_mask,
};

/// A validated configuration bound to a run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: PipelineConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(config: PipelineConfig, dir: impl Into<PathBuf>) -> CliResult<Self> {
        config.validate()?;
        Ok(Self {
            config,
            dir: dir.into(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn frames_dir(&self) -> PathBuf {
        match self.config.input.mode {
            InputMode::Synthetic => self.path("frames"),
            InputMode::Ingest => self.config.input.frames_dir.clone().expect("validated"),
        }
    }

    fn frames(&self) -> CliResult<Vec<Frame>> {
        let dir = self.frames_dir();
        require_dir(&dir)?;
        let frames = read_frames(&dir)?;
        let cam = self.config.camera_spec();
        if frames[0].dims() != (cam.height, cam.width) {
            return Err(CliError::Data(format!(
                "{}: frames are {}x{}, camera expects {}x{}",
                dir.display(),
                frames[0].width(),
                frames[0].height(),
                cam.width,
                cam.height
            )));
        }
        Ok(frames)
    }

    fn masks(&self, n: usize) -> CliResult<Vec<Mask>> {
        let dir = match self.config.input.mode {
            InputMode::Synthetic => Some(self.path("masks")),
            InputMode::Ingest => self.config.input.masks_dir.clone(),
        };
        let cam = self.config.camera_spec();
        match dir {
            Some(dir) => (0..n).map(|t| read_mask(&indexed(&dir, t, ".pgm"))).collect(),
            None => Ok(vec![Mask::ones(cam.height, cam.width)?; n]),
        }
    }

    fn annotations(&self, n: usize) -> CliResult<Vec<Option<Annotations>>> {
        let dir = match self.config.input.mode {
            InputMode::Synthetic => Some(self.path("annotations")),
            InputMode::Ingest => self.config.input.annotations_dir.clone(),
        };
        let Some(dir) = dir else {
            return Ok(vec![None; n]);
        };
        (0..n)
            .map(|t| {
                let p = indexed(&dir, t, ".txt");
                if p.exists() {
                    read_annotations(&p).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    fn forward_flows(&self, n: usize) -> CliResult<Vec<FlowField>> {
        read_flow_seq(&self.path("flows"), "_fwd.flo", n.saturating_sub(1), Direction::Forward)
    }

    fn correction_flows(&self, stage: &str, n: usize) -> CliResult<Vec<FlowField>> {
        read_flow_seq(&self.path(stage), ".flo", n, Direction::Backward)
    }
}

fn frame_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// The `.flo` surface is float32; downstream stages see what is on disk.
fn quantized(flow: &FlowField) -> CliResult<FlowField> {
    Ok(read_flo(&write_flo(flow)?, flow.direction())?)
}

fn rgb(frame: &Frame) -> CliResult<Frame> {
    if frame.channel_count() == 3 {
        Ok(frame.clone())
    } else {
        Ok(Frame::new(vec![frame.channel(0).clone(); 3])?)
    }
}

/// Renders the distorted scene, jitters it and writes frames, masks,
/// per-frame annotations, exact inter-frame flows and the jitter signal.
pub fn cmd_synth(run: &Run) -> CliResult<()> {
    let cfg = &run.config;
    if cfg.input.mode != InputMode::Synthetic {
        return Err(CliError::Config("synth needs input.mode = \"synthetic\"".into()));
    }
    let cam = cfg.camera_spec();
    let n = cfg.input.frames;
    let scene = SceneSpec::generate(&cam, cfg.seed);
    let (frame, ann) = render_scene(&scene, &cam, true)?;
    let seq = apply_jitter(&vec![frame; n], &cfg.jitter_spec())?;

    let landmarks: Vec<(f64, f64)> = ann.landmarks.iter().flat_map(|p| p.rectified.clone()).collect();
    let (mask, _) = face_mask(&landmarks, cam.height, cam.width)?;

    let rev_signal = JitterSignal {
        offsets: seq.signal.offsets.iter().rev().copied().collect(),
        angles: seq.signal.angles.iter().rev().copied().collect(),
    };
    let rev_frames: Vec<Frame> = seq.frames.iter().rev().cloned().collect();
    let backward = apply_signal(&rev_frames, rev_signal)?.flows;

    let center = ((cam.width as f64 - 1.0) / 2.0, (cam.height as f64 - 1.0) / 2.0);
    write_frame_seq(&run.path("frames"), &seq.frames)?;
    for t in 0..n {
        write_mask(&indexed(&run.path("masks"), t, ".pgm"), &mask)?;
        let moved = |ps: &PointSet| {
            let distorted: Vec<(f64, f64)> = ps
                .distorted
                .iter()
                .map(|&p| seq.signal.jitter_point(t, center, p))
                .collect();
            let outside = !ps.rectified.iter().chain(&distorted).all(|&p| cam.in_frame(p));
            PointSet {
                rectified: ps.rectified.clone(),
                distorted,
                outside,
            }
        };
        let frame_ann = Annotations {
            lines: ann.lines.iter().map(moved).collect(),
            landmarks: ann.landmarks.iter().map(moved).collect(),
        };
        write_bytes(
            &indexed(&run.path("annotations"), t, ".txt"),
            frame_ann.to_text().as_bytes(),
        )?;
    }
    let gt = run.path("gt_flows");
    write_flow_seq(&gt, "_fwd.flo", &seq.flows)?;
    for t in 0..n - 1 {
        write_flow(&indexed(&gt, t, "_bwd.flo"), &backward[n - 2 - t])?;
    }
    let mut csv = String::from("t,dx,dy,angle\n");
    for (t, ((dx, dy), a)) in seq.signal.offsets.iter().zip(&seq.signal.angles).enumerate() {
        csv.push_str(&format!("{t},{dx:.9},{dy:.9},{a:.9}\n"));
    }
    write_bytes(&run.path("jitter.csv"), csv.as_bytes())
}

/// Writes `flows/%06d_fwd.flo` and `flows/%06d_bwd.flo` for every pair.
pub fn cmd_flow(run: &Run) -> CliResult<()> {
    let cfg = &run.config;
    let frames = run.frames()?;
    let n = frames.len();
    if n < 2 {
        return Err(CliError::Data(format!(
            "{}: need at least 2 frames",
            run.frames_dir().display()
        )));
    }
    let source = match (cfg.input.mode, &cfg.input.flows_dir) {
        (InputMode::Ingest, Some(dir)) => Some(dir.clone()),
        _ if cfg.flow.source == FlowSource::GroundTruth => Some(run.path("gt_flows")),
        _ => None,
    };
    let (fwd, bwd) = match source {
        Some(dir) => {
            require_dir(&dir)?;
            (
                read_flow_seq(&dir, "_fwd.flo", n - 1, Direction::Forward)?,
                read_flow_seq(&dir, "_bwd.flo", n - 1, Direction::Forward)?,
            )
        }
        None => {
            let params = cfg.flow.hs_params();
            let pairs: Vec<(FlowField, FlowField)> = (0..n - 1)
                .into_par_iter()
                .map(|t| {
                    Ok((
                        estimate_flow(&frames[t], &frames[t + 1], &params)?,
                        reverse_pair(&frames[t], &frames[t + 1], &params)?,
                    ))
                })
                .collect::<vpc_core::Result<_>>()?;
            pairs.into_iter().unzip()
        }
    };
    let out = run.path("flows");
    write_flow_seq(&out, "_fwd.flo", &fwd)?;
    write_flow_seq(&out, "_bwd.flo", &bwd)
}

/// Per-frame pseudo-label correction flows from DDIM sampling with the
/// analytic stereographic oracle, and the frames they correct.
pub fn cmd_correct(run: &Run) -> CliResult<()> {
    let cfg = &run.config;
    let frames = run.frames()?;
    let n = frames.len();
    let masks = run.masks(n)?;
    let cam = cfg.camera_spec();
    let target = stereographic_correction_flow(&cam)?;
    let schedule = cfg.schedule.schedule()?;
    let oracle = OracleDenoiser::new(&target, &schedule, cfg.schedule.max_displacement)?;
    let dims = frames[0].dims();

    let flows: Vec<FlowField> = (0..n)
        .into_par_iter()
        .map(|t| {
            let source = rgb(&frames[t])?;
            let cond = assemble_condition(&masks[t], &source, &structural_features(&frames[t]))?;
            quantized(&ddim_sample(
                &oracle,
                &cond,
                dims,
                &cfg.schedule,
                frame_seed(cfg.seed, t),
            )?)
        })
        .collect::<CliResult<_>>()?;
    let corrected = correct_sequence(&frames, &flows, BorderPolicy::Clamp)?;
    write_flow_seq(&run.path("pseudo"), ".flo", &flows)?;
    write_frame_seq(&run.path("corrected"), &corrected)
}

/// `trajectory.csv` from the pseudo-labels and forward flows.
pub fn cmd_trajectory(run: &Run) -> CliResult<()> {
    let n = run.frames()?.len();
    let pseudo = run.correction_flows("pseudo", n)?;
    let fwd = run.forward_flows(n)?;
    let traj = trajectory_of_sequence(&pseudo, &fwd)?;
    write_bytes(&run.path("trajectory.csv"), traj.to_csv().as_bytes())?;
    if run.config.output.dump_residuals {
        let residuals: Vec<FlowField> = traj
            .residuals()
            .iter()
            .map(|r| FlowField::new(r.clone(), Direction::Backward))
            .collect();
        write_flow_seq(&run.path("residuals"), ".flo", &residuals)?;
    }
    Ok(())
}

/// Smooths the pseudo-labels (or copies them when adaptation is disabled)
/// and warps the frames with the result.
pub fn cmd_adapt(run: &Run) -> CliResult<()> {
    let cfg = &run.config;
    let frames = run.frames()?;
    let n = frames.len();
    let pseudo = run.correction_flows("pseudo", n)?;
    let fwd = run.forward_flows(n)?;
    let masks = run.masks(n)?;
    let params = cfg.adapt_params();

    let (flows, history) = if cfg.adapt.enabled && n >= 3 {
        let out = adapt_sequence(&pseudo, &masks, &fwd, &params)?;
        let flows = out.flows.iter().map(quantized).collect::<CliResult<Vec<_>>>()?;
        (flows, out.history)
    } else {
        let mut weights = params.loss_weights();
        if n < 3 {
            weights.lambda_temporal = 0.0;
        }
        let rep = loss_video(&pseudo, &pseudo, &masks, &fwd, &weights)?;
        let row = HistoryRow {
            iter: 0,
            total: rep.total,
            spatial: rep.spatial(),
            temporal: rep.value("temporal").unwrap_or(0.0),
            step_size: params.step_size,
        };
        (pseudo, vec![row])
    };
    write_bytes(&run.path("loss_history.csv"), history_csv(&history).as_bytes())?;
    write_flow_seq(&run.path("adapted"), ".flo", &flows)?;
    let warped = correct_sequence(&frames, &flows, BorderPolicy::Clamp)?;
    write_frame_seq(&run.path("adapted_frames"), &warped)?;
    let traj = trajectory_of_sequence(&flows, &fwd)?;
    write_bytes(&run.path("trajectory_adapted.csv"), traj.to_csv().as_bytes())
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
struct Geometry {
    line_acc: Option<f64>,
    shape_acc: Option<f64>,
}

/// Line and landmark scores averaged over the annotated frames. `map` takes
/// a frame index and a distorted-frame point to the evaluated position.
fn geometry(annotations: &[Option<Annotations>], map: impl Fn(usize, (f64, f64)) -> (f64, f64)) -> CliResult<Geometry> {
    let (mut la, mut nl, mut sa, mut ns) = (0.0, 0usize, 0.0, 0usize);
    for (t, ann) in annotations.iter().enumerate() {
        let Some(ann) = ann else { continue };
        let lines: Vec<LineSample> = ann
            .lines
            .iter()
            .filter(|p| !p.outside)
            .map(|p| LineSample::new(p.distorted.iter().map(|&q| map(t, q)).collect()))
            .collect::<vpc_core::Result<_>>()?;
        if !lines.is_empty() {
            la += line_acc(&lines)?;
            nl += 1;
        }
        for set in ann.landmarks.iter().filter(|p| !p.outside) {
            let moved: Vec<(f64, f64)> = set.distorted.iter().map(|&q| map(t, q)).collect();
            sa += shape_acc(&set.rectified, &moved)?;
            ns += 1;
        }
    }
    Ok(Geometry {
        line_acc: (nl > 0).then(|| la / nl as f64),
        shape_acc: (ns > 0).then(|| sa / ns as f64),
    })
}

fn stability(run: &Run, traj: &TrajectorySeries, name: &str) -> CliResult<Option<StabilityReport>> {
    if traj.len() < MIN_STABILITY_FRAMES {
        return Ok(None);
    }
    let (t, r) = motion_series(traj);
    write_bytes(
        &run.path(&format!("spectrum_{name}.csv")),
        spectrum_csv(&t, &r).as_bytes(),
    )?;
    Ok(Some(stability_from_series(&t, &r, run.config.metrics)?))
}

/// `metrics.json` with one report per stage (distorted, pseudo, adapted) and
/// spectrum CSVs for the two corrected stages.
pub fn cmd_metrics(run: &Run) -> CliResult<BTreeMap<String, MetricReport>> {
    let cfg = &run.config;
    let n = run.frames()?.len();
    let pseudo = run.correction_flows("pseudo", n)?;
    let adapted = run.correction_flows("adapted", n)?;
    let fwd = run.forward_flows(n)?;
    let annotations = run.annotations(n)?;

    let mut provenance = BTreeMap::new();
    provenance.insert("config_hash".to_string(), cfg.hash());
    provenance.insert("seed".to_string(), cfg.seed.to_string());
    provenance.insert("frames".to_string(), n.to_string());
    provenance.insert(
        "input".to_string(),
        match cfg.input.mode {
            InputMode::Synthetic => "synthetic",
            InputMode::Ingest => "ingest",
        }
        .to_string(),
    );
    let stage = |name: &str| {
        let mut p = provenance.clone();
        p.insert("stage".to_string(), name.to_string());
        p
    };

    let distorted = geometry(&annotations, |_, q| q)?;
    let via = |flows: &[FlowField]| geometry(&annotations, |t, q| invert_point(&flows[t], q, BorderPolicy::Clamp));
    let pseudo_geo = via(&pseudo)?;
    let adapted_geo = via(&adapted)?;
    let pseudo_stab = stability(run, &trajectory_of_sequence(&pseudo, &fwd)?, "pseudo")?;
    let adapted_stab = stability(run, &trajectory_of_sequence(&adapted, &fwd)?, "adapted")?;

    let mut reports = BTreeMap::new();
    reports.insert(
        "distorted".to_string(),
        report(distorted.line_acc, distorted.shape_acc, None, stage("distorted")),
    );
    reports.insert(
        "pseudo".to_string(),
        report(pseudo_geo.line_acc, pseudo_geo.shape_acc, pseudo_stab, stage("pseudo")),
    );
    reports.insert(
        "adapted".to_string(),
        report(
            adapted_geo.line_acc,
            adapted_geo.shape_acc,
            adapted_stab,
            stage("adapted"),
        ),
    );
    let json = serde_json::to_string_pretty(&reports).expect("reports are plain data") + "\n";
    write_bytes(&run.path("metrics.json"), json.as_bytes())?;
    Ok(reports)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

fn summary(reports: &BTreeMap<String, MetricReport>, history: &str, frames: usize) -> String {
    let get = |k: &str| &reports[k];
    let stab = |k: &str, f: fn(&StabilityReport) -> f64| fmt_opt(get(k).stability.as_ref().map(f));
    let mut out = format!("frames {frames}\n");
    for (label, f) in [
        ("avg", (|s: &StabilityReport| s.avg) as fn(&StabilityReport) -> f64),
        ("translational", |s| s.translational),
        ("rotational", |s| s.rotational),
    ] {
        out.push_str(&format!(
            "stability_{label} before {} after {}\n",
            stab("pseudo", f),
            stab("adapted", f)
        ));
    }
    for (label, f) in [
        (
            "line_acc",
            (|r: &MetricReport| r.line_acc) as fn(&MetricReport) -> Option<f64>,
        ),
        ("shape_acc", |r| r.shape_acc),
    ] {
        out.push_str(&format!(
            "{label} distorted {} corrected {} adapted {}\n",
            fmt_opt(f(get("distorted"))),
            fmt_opt(f(get("pseudo"))),
            fmt_opt(f(get("adapted")))
        ));
    }
    let rows: Vec<&str> = history.lines().skip(1).collect();
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        let temporal = |row: &str| row.split(',').nth(3).unwrap_or("n/a").to_string();
        out.push_str(&format!(
            "temporal_loss before {} after {} ({} accepted steps)\n",
            temporal(first),
            temporal(last),
            rows.len() - 1
        ));
    }
    out
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = crate::io::read_bytes(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Every stage in order, then `summary.txt` and `manifest.json`.
pub fn cmd_pipeline(run: &Run) -> CliResult<()> {
    if run.config.input.mode == InputMode::Synthetic {
        cmd_synth(run)?;
    }
    cmd_flow(run)?;
    cmd_correct(run)?;
    cmd_trajectory(run)?;
    cmd_adapt(run)?;
    let reports = cmd_metrics(run)?;
    let n = run.frames()?.len();
    let history = crate::io::read_text(&run.path("loss_history.csv"))?;
    write_bytes(&run.path("summary.txt"), summary(&reports, &history, n).as_bytes())?;

    let mut files = BTreeMap::new();
    for rel in [
        "trajectory.csv",
        "trajectory_adapted.csv",
        "loss_history.csv",
        "metrics.json",
        "spectrum_pseudo.csv",
        "spectrum_adapted.csv",
        "summary.txt",
    ] {
        let p = run.path(rel);
        if p.exists() {
            files.insert(rel.to_string(), sha256_file(&p)?);
        }
    }
    let manifest = serde_json::json!({
        "tool": "vpc",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": run.config.hash(),
        "seed": run.config.seed,
        "frames": n,
        "files": files,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest is plain data") + "\n";
    write_bytes(&run.path("manifest.json"), text.as_bytes())
}
