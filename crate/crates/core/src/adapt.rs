//! Spatiotemporal adaptation as direct optimisation of the per-frame
//! correction flows, plus per-frame correction by backward warping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{warp_backward, BorderPolicy, Direction, FlowField, Frame, Mask, Raster, VectorField};
use crate::losses::{LossReport, LossWeights, VideoProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptParams {
    pub lambda_temporal: f64,
    pub mu_mask: f64,
    /// Initial step, in per-pixel units: the raw gradient is multiplied by
    /// `N * H * W` so that the flow term alone has unit curvature scale.
    pub step_size: f64,
    pub max_iters: usize,
    /// Stop once an accepted step lowers the loss by less than this fraction.
    pub tol: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Huber width (px) used for the descent direction only; acceptance
    /// always compares exact losses.
    pub smoothing: f64,
}

impl Default for AdaptParams {
    fn default() -> Self {
        Self {
            lambda_temporal: 10.0,
            mu_mask: 1.0,
            step_size: 0.25,
            max_iters: 300,
            tol: 1e-9,
            backtrack_factor: 0.5,
            max_backtracks: 40,
            smoothing: 1e-3,
        }
    }
}

impl AdaptParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Input("step_size must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Input("max_iters must be at least 1".into()));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::Input("tol must be non-negative".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Input("backtrack_factor must lie in (0, 1)".into()));
        }
        if !(self.smoothing.is_finite() && self.smoothing >= 0.0) {
            return Err(Error::Input("smoothing must be non-negative".into()));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_temporal: self.lambda_temporal,
            mu_mask: self.mu_mask,
            ..LossWeights::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub total: f64,
    /// Weighted spatial part: flow plus `mu_mask` times mask.
    pub spatial: f64,
    /// Unweighted temporal loss.
    pub temporal: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ZeroGradient,
    Converged,
    MaxIters,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub flows: Vec<FlowField>,
    /// Row 0 is the initial state; one row per accepted step after that.
    pub history: Vec<HistoryRow>,
    pub stop: StopReason,
}

impl AdaptOutcome {
    pub fn accepted_steps(&self) -> usize {
        self.history.len() - 1
    }

    pub fn final_row(&self) -> HistoryRow {
        *self.history.last().expect("history starts with the initial row")
    }
}

/// CSV with header `iter,total,spatial,temporal,step_size`.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("iter,total,spatial,temporal,step_size\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e},{:.6e}\n",
            r.iter, r.total, r.spatial, r.temporal, r.step_size
        ));
    }
    out
}

fn row(iter: usize, report: &LossReport, step: f64) -> HistoryRow {
    HistoryRow {
        iter,
        total: report.total,
        spatial: report.spatial(),
        temporal: report.value("temporal").unwrap_or(0.0),
        step_size: step,
    }
}

fn descend(flows: &[FlowField], grads: &[FlowField], step: f64) -> Result<Vec<FlowField>> {
    flows
        .iter()
        .zip(grads)
        .map(|(f, g)| {
            let fu = f.u().data();
            let fv = f.v().data();
            let u = fu.iter().zip(g.u().data()).map(|(a, b)| a - step * b).collect();
            let v = fv.iter().zip(g.v().data()).map(|(a, b)| a - step * b).collect();
            let (h, w) = f.dims();
            Ok(FlowField::new(
                VectorField::new(Raster::new(h, w, u)?, Raster::new(h, w, v)?)?,
                Direction::Backward,
            ))
        })
        .collect()
}

/// Gradient descent with backtracking on the video objective, starting from
/// the pseudo-labels. Inter-frame flows stay fixed. A rejected step is
/// multiplied by `backtrack_factor`; an accepted one is divided by it for the
/// next iteration.
pub fn adapt_sequence(
    pseudo: &[FlowField],
    masks: &[Mask],
    forward_flows: &[FlowField],
    params: &AdaptParams,
) -> Result<AdaptOutcome> {
    params.validate()?;
    if pseudo.len() < 3 {
        return Err(Error::Length(format!(
            "adaptation needs at least 3 frames, got {}",
            pseudo.len()
        )));
    }
    let problem = VideoProblem::new(pseudo, masks, forward_flows, params.loss_weights())?;
    let (h, w) = pseudo[0].dims();
    let precond = (pseudo.len() * h * w) as f64;

    let mut flows = pseudo.to_vec();
    let mut report = problem.loss(&flows)?;
    let mut step = params.step_size;
    let mut history = vec![row(0, &report, step)];
    let mut stop = StopReason::MaxIters;

    for iter in 1..=params.max_iters {
        let grads = problem.gradient_smoothed(&flows, params.smoothing)?;
        let zero = grads
            .iter()
            .all(|g| g.u().data().iter().chain(g.v().data()).all(|v| *v == 0.0));
        if zero {
            stop = StopReason::ZeroGradient;
            break;
        }
        let mut accepted = None;
        for _ in 0..=params.max_backtracks {
            let trial = descend(&flows, &grads, step * precond)?;
            let trial_report = problem.loss(&trial)?;
            if trial_report.total < report.total {
                accepted = Some((trial, trial_report));
                break;
            }
            step *= params.backtrack_factor;
        }
        let Some((next, next_report)) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        let decrease = (report.total - next_report.total) / report.total.abs().max(f64::MIN_POSITIVE);
        flows = next;
        report = next_report;
        history.push(row(iter, &report, step));
        step /= params.backtrack_factor;
        if decrease < params.tol {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(AdaptOutcome { flows, history, stop })
}

/// Backward-warps every frame with its correction flow.
pub fn correct_sequence(frames: &[Frame], flows: &[FlowField], policy: BorderPolicy) -> Result<Vec<Frame>> {
    if frames.len() != flows.len() {
        return Err(Error::Length(format!(
            "{} frames but {} correction flows",
            frames.len(),
            flows.len()
        )));
    }
    frames
        .iter()
        .zip(flows)
        .map(|(f, flow)| warp_backward(f, flow, policy))
        .collect()
}
