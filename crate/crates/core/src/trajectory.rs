//! Correction trajectories.
//!
//! For a sequence of backward correction flows `F_t` and forward inter-frame
//! flows `f_t` (frame `t` to `t+1`), the per-pair residual is
//!
//! ```text
//! r(t+1) = f_t(G + F_t) + F_t - F_{t+1}
//! ```
//!
//! and the trajectory is the prefix sum `R(t) = r(1) + ... + r(t)` with
//! `r(1) = 0`. The residual is what a rectified pixel actually moves between
//! consecutive corrected frames, so `R` carries both camera jitter and any
//! shake introduced by inconsistent per-frame corrections.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{compose_displaced, BorderPolicy, Direction, FlowField, VectorField};

/// Pixels this close to the border are left out of residual summaries; the
/// clamp policy biases resampling there.
pub const SUMMARY_MARGIN: usize = 2;

/// Residuals `r(t)` and cumulative positions `R(t)` for `t = 1..N`
/// (stored zero-based).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySeries {
    residuals: Vec<VectorField>,
    positions: Vec<VectorField>,
}

impl TrajectorySeries {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn residuals(&self) -> &[VectorField] {
        &self.residuals
    }

    pub fn positions(&self) -> &[VectorField] {
        &self.positions
    }

    pub fn dims(&self) -> (usize, usize) {
        self.positions[0].dims()
    }

    /// Mean of `R(t)` per frame over the interior, excluding a
    /// [`SUMMARY_MARGIN`] border.
    pub fn mean_displacement(&self) -> Vec<(f64, f64)> {
        self.positions.iter().map(|p| p.interior_mean(SUMMARY_MARGIN)).collect()
    }

    /// Global similarity fitted to each `R(t)`.
    pub fn similarity_series(&self) -> Vec<Similarity> {
        self.positions.par_iter().map(fit_similarity).collect()
    }

    /// CSV with header `t,mean_rx,mean_ry,tx,ty,theta`, one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean_rx,mean_ry,tx,ty,theta\n");
        for (t, ((mx, my), s)) in self
            .mean_displacement()
            .into_iter()
            .zip(self.similarity_series())
            .enumerate()
        {
            out.push_str(&format!("{t},{mx:.9},{my:.9},{:.9},{:.9},{:.9}\n", s.tx, s.ty, s.theta));
        }
        out
    }
}

fn check_pair(a: &FlowField, b: &FlowField) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// Residual under backward correction flows:
/// `r = f_fwd(G + F_t) + F_t - F_{t+1}`.
///
/// `f_fwd` is the forward inter-frame flow from frame `t` to `t+1`.
pub fn residual_backward(f_t: &FlowField, f_t1: &FlowField, f_fwd: &FlowField) -> Result<VectorField> {
    f_t.expect_direction(Direction::Backward)?;
    f_t1.expect_direction(Direction::Backward)?;
    f_fwd.expect_direction(Direction::Forward)?;
    check_pair(f_t, f_t1)?;
    check_pair(f_t, f_fwd)?;
    let moved = compose_displaced(f_fwd, f_t.vectors(), BorderPolicy::Clamp)?;
    moved.vectors().add(f_t.vectors())?.sub(f_t1.vectors())
}

/// Residual under forward correction flows:
/// `r = f_bwd + F_t(G + f_bwd) - F_{t+1}`.
///
/// `f_bwd` is the inter-frame flow from frame `t+1` back to `t`. The first
/// term is added without resampling while `F_t` is resampled, exactly as the
/// forward formulation reads. The pipeline never uses this path.
pub fn residual_forward(f_t: &FlowField, f_t1: &FlowField, f_bwd: &FlowField) -> Result<VectorField> {
    f_t.expect_direction(Direction::Forward)?;
    f_t1.expect_direction(Direction::Forward)?;
    f_bwd.expect_direction(Direction::Forward)?;
    check_pair(f_t, f_t1)?;
    check_pair(f_t, f_bwd)?;
    let moved = compose_displaced(f_t, f_bwd.vectors(), BorderPolicy::Clamp)?;
    f_bwd.vectors().add(moved.vectors())?.sub(f_t1.vectors())
}

/// Prefix sums of residuals. The first residual must be identically zero.
pub fn accumulate(residuals: Vec<VectorField>) -> Result<TrajectorySeries> {
    let first = residuals
        .first()
        .ok_or_else(|| Error::Length("trajectory needs at least one residual".into()))?;
    let dims = first.dims();
    if first.u().data().iter().chain(first.v().data()).any(|&v| v != 0.0) {
        return Err(Error::Contract("first residual r(1) must be zero".into()));
    }
    if let Some(r) = residuals.iter().find(|r| r.dims() != dims) {
        return Err(Error::shape(dims, r.dims()));
    }
    let mut positions: Vec<VectorField> = Vec::with_capacity(residuals.len());
    positions.push(first.clone());
    for r in &residuals[1..] {
        let next = positions.last().expect("non-empty").add(r)?;
        positions.push(next);
    }
    Ok(TrajectorySeries { residuals, positions })
}

/// Residuals via [`residual_backward`] for every consecutive pair, then
/// [`accumulate`].
pub fn trajectory_of_sequence(corrections: &[FlowField], forward_flows: &[FlowField]) -> Result<TrajectorySeries> {
    if corrections.is_empty() {
        return Err(Error::Length("empty correction sequence".into()));
    }
    if forward_flows.len() + 1 != corrections.len() {
        return Err(Error::Length(format!(
            "{} correction flows need {} inter-frame flows, got {}",
            corrections.len(),
            corrections.len() - 1,
            forward_flows.len()
        )));
    }
    let (h, w) = corrections[0].dims();
    let tail: Vec<VectorField> = (0..forward_flows.len())
        .into_par_iter()
        .map(|t| residual_backward(&corrections[t], &corrections[t + 1], &forward_flows[t]))
        .collect::<Result<_>>()?;
    let mut residuals = Vec::with_capacity(corrections.len());
    residuals.push(VectorField::zeros(h, w)?);
    residuals.extend(tail);
    accumulate(residuals)
}

/// Global similarity `x -> s R(theta) (x - c) + c + (tx, ty)` with `c` the
/// grid center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub scale: f64,
}

/// Least-squares similarity whose induced displacement best matches `field`.
///
/// With centered coordinates `q` the displacement model is
/// `d = a q + b q_perp + t`, and the normal equations decouple:
/// `t` is the mean displacement, `a = sum(q.d)/sum|q|^2` and
/// `b = sum(q x d)/sum|q|^2`.
pub fn fit_similarity(field: &VectorField) -> Similarity {
    let (h, w) = field.dims();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let n = (h * w) as f64;
    let mut su = 0.0;
    let mut sv = 0.0;
    let mut dot = 0.0;
    let mut cross = 0.0;
    let mut qq = 0.0;
    for y in 0..h {
        let qy = y as f64 - cy;
        for x in 0..w {
            let qx = x as f64 - cx;
            let (du, dv) = field.get(x, y);
            su += du;
            sv += dv;
            dot += qx * du + qy * dv;
            cross += qx * dv - qy * du;
            qq += qx * qx + qy * qy;
        }
    }
    let (a, b) = if qq > 0.0 { (dot / qq, cross / qq) } else { (0.0, 0.0) };
    Similarity {
        tx: su / n,
        ty: sv / n,
        theta: b.atan2(1.0 + a),
        scale: (1.0 + a).hypot(b),
    }
}
