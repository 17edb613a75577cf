//! Image-stage and video-stage losses over correction flows.
//!
//! Image stage: `L_image = l1 L_mask + l2 L_photo + l3 L_flow`.
//! Video stage: `L_video = mean_t (L_flow + mu L_mask) + lambda L_temporal`,
//! where the temporal term penalises the second difference of the correction
//! trajectory. [`VideoProblem`] evaluates the video objective together with its
//! analytic gradient with respect to every correction flow.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sample_point_with_grad, BorderPolicy, Direction, FlowField, Frame, Mask, Raster, VectorField};
use crate::trajectory::{trajectory_of_sequence, TrajectorySeries};

/// Added to the mask mass so an empty mask yields zero instead of NaN.
pub const MASK_EPS: f64 = 1e-8;

/// Per-pixel non-negative weights inside the flow and photometric sums.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap(Raster);

impl WeightMap {
    pub fn new(weights: Raster) -> Result<Self> {
        if weights.data().iter().any(|&w| w < 0.0) {
            return Err(Error::Data("weights must be non-negative".into()));
        }
        Ok(Self(weights))
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Ok(Self(Raster::filled(height, width, 1.0)?))
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Mask-Sobel weight in the image loss.
    pub lambda1: f64,
    /// Photometric weight in the image loss.
    pub lambda2: f64,
    /// Flow weight in the image loss.
    pub lambda3: f64,
    pub lambda_temporal: f64,
    /// Weight of the mask term inside the video spatial loss.
    pub mu_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda_temporal: 10.0,
            mu_mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda_temporal,
            self.mu_mask,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Named loss terms and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn new(terms: Vec<(&str, f64, f64)>) -> Self {
        let terms: Vec<LossTerm> = terms
            .into_iter()
            .map(|(name, weight, value)| LossTerm {
                name: name.to_string(),
                weight,
                value,
            })
            .collect();
        let total = terms.iter().fold(0.0, |acc, t| acc + t.weight * t.value);
        Self { terms, total }
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// Weighted sum of every term except `temporal`.
    pub fn spatial(&self) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.name != "temporal")
            .fold(0.0, |acc, t| acc + t.weight * t.value)
    }

    /// Flat `name value` lines followed by `total value`.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        for t in &self.terms {
            out.push_str(&format!("{} {:.12e}\n", t.name, t.value));
        }
        out.push_str(&format!("total {:.12e}\n", self.total));
        out
    }
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b));
    }
    Ok(())
}

/// `(1/HW) sum_p w(p) (|du|^2 + |dv|^2)`.
pub fn loss_flow(flow: &FlowField, target: &FlowField, weights: &WeightMap) -> Result<f64> {
    same_dims(flow.dims(), target.dims())?;
    same_dims(flow.dims(), weights.0.dims())?;
    let n = (flow.height() * flow.width()) as f64;
    let mut acc = 0.0;
    for i in 0..flow.height() * flow.width() {
        let du = flow.u().data()[i] - target.u().data()[i];
        let dv = flow.v().data()[i] - target.v().data()[i];
        acc += weights.0.data()[i] * (du * du + dv * dv);
    }
    Ok(acc / n)
}

/// `(1/HW) sum_p w(p) sum_c (I_hat - I_gt)^2`.
pub fn loss_photo(corrected: &Frame, target: &Frame, weights: &WeightMap) -> Result<f64> {
    same_dims(corrected.dims(), target.dims())?;
    same_dims(corrected.dims(), weights.0.dims())?;
    if corrected.channel_count() != target.channel_count() {
        return Err(Error::Shape {
            expected: format!("{} channels", target.channel_count()),
            actual: format!("{} channels", corrected.channel_count()),
        });
    }
    let n = (corrected.height() * corrected.width()) as f64;
    let mut acc = 0.0;
    for i in 0..corrected.height() * corrected.width() {
        let mut s = 0.0;
        for (a, b) in corrected.channels().iter().zip(target.channels()) {
            let d = a.data()[i] - b.data()[i];
            s += d * d;
        }
        acc += weights.0.data()[i] * s;
    }
    Ok(acc / n)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    // edge-including reflection: -1 -> 0, n -> n-1
    if i < 0 {
        (-i - 1) as usize
    } else if i as usize >= n {
        2 * n - 1 - i as usize
    } else {
        i as usize
    }
}

fn correlate3(r: &Raster, k: &[[f64; 3]; 3]) -> Raster {
    let (h, w) = r.dims();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                let yy = reflect(y as isize + dy as isize - 1, h);
                for (dx, &kv) in row.iter().enumerate() {
                    if kv != 0.0 {
                        let xx = reflect(x as isize + dx as isize - 1, w);
                        acc += kv * r.get(xx, yy);
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    Raster::from_vec_unchecked(h, w, out)
}

/// Adjoint of [`correlate3`]: scatters each output gradient back onto the
/// (reflected) input taps.
fn correlate3_adjoint(g: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3], out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            if gv == 0.0 {
                continue;
            }
            for (dy, row) in k.iter().enumerate() {
                let yy = reflect(y as isize + dy as isize - 1, h);
                for (dx, &kv) in row.iter().enumerate() {
                    if kv != 0.0 {
                        let xx = reflect(x as isize + dx as isize - 1, w);
                        out[yy * w + xx] += kv * gv;
                    }
                }
            }
        }
    }
}

/// Sobel responses `(Gx, Gy)` with reflect padding. `Gx` is positive for
/// values increasing to the right.
pub fn sobel(channel: &Raster) -> (Raster, Raster) {
    (correlate3(channel, &SOBEL_X), correlate3(channel, &SOBEL_Y))
}

fn mask_mass(mask: &Mask) -> f64 {
    mask.area() as f64 + MASK_EPS
}

/// Masked mean of the Sobel response differences of both flow channels.
pub fn loss_mask(flow: &FlowField, target: &FlowField, mask: &Mask) -> Result<f64> {
    same_dims(flow.dims(), target.dims())?;
    same_dims(flow.dims(), mask.dims())?;
    let diff = flow.vectors().sub(target.vectors())?;
    let mut acc = 0.0;
    for ch in [diff.u(), diff.v()] {
        let (gx, gy) = sobel(ch);
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                acc += gx.data()[i].abs() + gy.data()[i].abs();
            }
        }
    }
    Ok(acc / mask_mass(mask))
}

/// Gradient of [`loss_mask`] with respect to `flow`, added into `(gu, gv)`
/// with factor `scale`.
fn loss_mask_grad(
    flow: &FlowField,
    target: &FlowField,
    mask: &Mask,
    scale: f64,
    smoothing: f64,
    gu: &mut [f64],
    gv: &mut [f64],
) -> Result<()> {
    let (h, w) = flow.dims();
    let diff = flow.vectors().sub(target.vectors())?;
    let k = scale / mask_mass(mask);
    for (ch, out) in [(diff.u(), gu), (diff.v(), gv)] {
        let (gx, gy) = sobel(ch);
        let sx: Vec<f64> = gx
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&g, &m)| if m == 1 { k * soft_sign(g, smoothing) } else { 0.0 })
            .collect();
        let sy: Vec<f64> = gy
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&g, &m)| if m == 1 { k * soft_sign(g, smoothing) } else { 0.0 })
            .collect();
        correlate3_adjoint(&sx, h, w, &SOBEL_X, out);
        correlate3_adjoint(&sy, h, w, &SOBEL_Y, out);
    }
    Ok(())
}

/// `sign(v)` when `delta == 0`, else the Huber slope `clamp(v / delta)`.
#[inline]
fn soft_sign(v: f64, delta: f64) -> f64 {
    if delta > 0.0 {
        return (v / delta).clamp(-1.0, 1.0);
    }
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `l1 L_mask + l2 L_photo + l3 L_flow`.
#[allow(clippy::too_many_arguments)]
pub fn loss_image(
    flow: &FlowField,
    flow_gt: &FlowField,
    corrected: &Frame,
    image_gt: &Frame,
    mask: &Mask,
    weights: &WeightMap,
    lw: &LossWeights,
) -> Result<LossReport> {
    let mask_term = loss_mask(flow, flow_gt, mask)?;
    let photo = loss_photo(corrected, image_gt, weights)?;
    let flow_term = loss_flow(flow, flow_gt, weights)?;
    Ok(LossReport::new(vec![
        ("mask", lw.lambda1, mask_term),
        ("photo", lw.lambda2, photo),
        ("flow", lw.lambda3, flow_term),
    ]))
}

/// Mean over interior frames and pixels of `|R(t+1) + R(t-1) - 2 R(t)|`.
pub fn loss_temporal(trajectory: &TrajectorySeries) -> Result<f64> {
    let n = trajectory.len();
    if n < 3 {
        return Err(Error::Length(format!("temporal loss needs at least 3 frames, got {n}")));
    }
    let r = trajectory.positions();
    let (h, w) = trajectory.dims();
    let mut acc = 0.0;
    for t in 1..n - 1 {
        let (a, b, c) = (&r[t - 1], &r[t], &r[t + 1]);
        for i in 0..h * w {
            let du = c.u().data()[i] + a.u().data()[i] - 2.0 * b.u().data()[i];
            let dv = c.v().data()[i] + a.v().data()[i] - 2.0 * b.v().data()[i];
            acc += du.hypot(dv);
        }
    }
    Ok(acc / ((n - 2) * h * w) as f64)
}

/// The video objective over a fixed set of pseudo-labels, masks and forward
/// inter-frame flows.
#[derive(Debug, Clone, Copy)]
pub struct VideoProblem<'a> {
    pub pseudo: &'a [FlowField],
    pub masks: &'a [Mask],
    pub forward_flows: &'a [FlowField],
    pub weights: LossWeights,
}

impl<'a> VideoProblem<'a> {
    pub fn new(
        pseudo: &'a [FlowField],
        masks: &'a [Mask],
        forward_flows: &'a [FlowField],
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let n = pseudo.len();
        if n == 0 {
            return Err(Error::Length("empty sequence".into()));
        }
        if masks.len() != n || forward_flows.len() + 1 != n {
            return Err(Error::Length(format!(
                "{n} pseudo-labels need {n} masks and {} inter-frame flows, got {} and {}",
                n - 1,
                masks.len(),
                forward_flows.len()
            )));
        }
        if n < 3 && weights.lambda_temporal > 0.0 {
            return Err(Error::Length(format!("temporal term needs at least 3 frames, got {n}")));
        }
        let dims = pseudo[0].dims();
        for p in pseudo {
            p.expect_direction(Direction::Backward)?;
            same_dims(dims, p.dims())?;
        }
        for m in masks {
            same_dims(dims, m.dims())?;
        }
        for f in forward_flows {
            f.expect_direction(Direction::Forward)?;
            same_dims(dims, f.dims())?;
        }
        Ok(Self {
            pseudo,
            masks,
            forward_flows,
            weights,
        })
    }

    fn check_flows(&self, flows: &[FlowField]) -> Result<()> {
        if flows.len() != self.pseudo.len() {
            return Err(Error::Length(format!(
                "expected {} correction flows, got {}",
                self.pseudo.len(),
                flows.len()
            )));
        }
        let dims = self.pseudo[0].dims();
        for f in flows {
            f.expect_direction(Direction::Backward)?;
            same_dims(dims, f.dims())?;
        }
        Ok(())
    }

    fn spatial_terms(&self, flows: &[FlowField]) -> Result<(f64, f64)> {
        let ones = WeightMap::ones(self.pseudo[0].height(), self.pseudo[0].width())?;
        let per_frame: Vec<(f64, f64)> = (0..flows.len())
            .into_par_iter()
            .map(|t| {
                Ok((
                    loss_flow(&flows[t], &self.pseudo[t], &ones)?,
                    loss_mask(&flows[t], &self.pseudo[t], &self.masks[t])?,
                ))
            })
            .collect::<Result<_>>()?;
        let n = flows.len() as f64;
        let (f, m) = per_frame.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        Ok((f / n, m / n))
    }

    /// Loss report with terms `flow`, `mask` (weight `mu_mask`) and
    /// `temporal` (weight `lambda_temporal`).
    pub fn loss(&self, flows: &[FlowField]) -> Result<LossReport> {
        self.check_flows(flows)?;
        let (flow_term, mask_term) = self.spatial_terms(flows)?;
        let temporal = if flows.len() >= 3 {
            loss_temporal(&trajectory_of_sequence(flows, self.forward_flows)?)?
        } else {
            0.0
        };
        Ok(LossReport::new(vec![
            ("flow", 1.0, flow_term),
            ("mask", self.weights.mu_mask, mask_term),
            ("temporal", self.weights.lambda_temporal, temporal),
        ]))
    }

    /// Analytic gradient of [`VideoProblem::loss`]'s total with respect to the
    /// `u` and `v` of every correction flow.
    pub fn gradient(&self, flows: &[FlowField]) -> Result<Vec<FlowField>> {
        self.gradient_smoothed(flows, 0.0)
    }

    /// [`VideoProblem::gradient`] with every absolute value and norm replaced
    /// by its Huber counterpart of width `delta` (in pixels). Near-zero Sobel
    /// responses and trajectory differences then stop contributing
    /// rounding-noise signs, which makes the result usable as a descent
    /// direction. `delta == 0` gives the exact gradient.
    pub fn gradient_smoothed(&self, flows: &[FlowField], delta: f64) -> Result<Vec<FlowField>> {
        self.check_flows(flows)?;
        let n = flows.len();
        let (h, w) = flows[0].dims();
        let hw = h * w;
        let inv_n = 1.0 / n as f64;
        let mu = self.weights.mu_mask;

        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|t| {
                let mut gu = vec![0.0; hw];
                let mut gv = vec![0.0; hw];
                let k = 2.0 * inv_n / hw as f64;
                for i in 0..hw {
                    gu[i] = k * (flows[t].u().data()[i] - self.pseudo[t].u().data()[i]);
                    gv[i] = k * (flows[t].v().data()[i] - self.pseudo[t].v().data()[i]);
                }
                if mu != 0.0 {
                    loss_mask_grad(
                        &flows[t],
                        &self.pseudo[t],
                        &self.masks[t],
                        mu * inv_n,
                        delta,
                        &mut gu,
                        &mut gv,
                    )?;
                }
                Ok((gu, gv))
            })
            .collect::<Result<_>>()?;

        let lambda = self.weights.lambda_temporal;
        if n >= 3 && lambda != 0.0 {
            self.add_temporal_gradient(flows, lambda, delta, &mut grads)?;
        }

        grads
            .into_iter()
            .map(|(gu, gv)| {
                Ok(FlowField::new(
                    VectorField::new(Raster::new(h, w, gu)?, Raster::new(h, w, gv)?)?,
                    Direction::Backward,
                ))
            })
            .collect()
    }

    fn add_temporal_gradient(
        &self,
        flows: &[FlowField],
        lambda: f64,
        delta: f64,
        grads: &mut [(Vec<f64>, Vec<f64>)],
    ) -> Result<()> {
        let n = flows.len();
        let (h, w) = flows[0].dims();
        let hw = h * w;

        // residuals r[k], k = 1..n-1, and the Jacobian of f_{k-1}(p + F_{k-1})
        struct Pair {
            ru: Vec<f64>,
            rv: Vec<f64>,
            jac: Vec<[f64; 4]>,
        }
        let pairs: Vec<Pair> = (1..n)
            .into_par_iter()
            .map(|k| {
                let prev = &flows[k - 1];
                let next = &flows[k];
                let f = &self.forward_flows[k - 1];
                let mut ru = vec![0.0; hw];
                let mut rv = vec![0.0; hw];
                let mut jac = vec![[0.0; 4]; hw];
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let (pu, pv) = prev.get(x, y);
                        let px = x as f64 + pu;
                        let py = y as f64 + pv;
                        let (fu, fu_x, fu_y) = sample_point_with_grad(f.u(), px, py, BorderPolicy::Clamp);
                        let (fv, fv_x, fv_y) = sample_point_with_grad(f.v(), px, py, BorderPolicy::Clamp);
                        let (nu, nv) = next.get(x, y);
                        ru[i] = fu + pu - nu;
                        rv[i] = fv + pv - nv;
                        jac[i] = [fu_x, fu_y, fv_x, fv_y];
                    }
                }
                Pair { ru, rv, jac }
            })
            .collect();

        // D_t = r[t+1] - r[t] for t = 1..n-2; r[0] = 0.
        let scale = lambda / ((n - 2) * hw) as f64;
        let mut g_ru = vec![vec![0.0; hw]; n];
        let mut g_rv = vec![vec![0.0; hw]; n];
        for t in 1..n - 1 {
            let (a, b) = (&pairs[t], &pairs[t - 1]);
            for i in 0..hw {
                let du = a.ru[i] - b.ru[i];
                let dv = a.rv[i] - b.rv[i];
                let norm = du.hypot(dv);
                if norm == 0.0 {
                    continue;
                }
                let norm = norm.max(delta);
                let gu = scale * du / norm;
                let gv = scale * dv / norm;
                g_ru[t + 1][i] += gu;
                g_rv[t + 1][i] += gv;
                g_ru[t][i] -= gu;
                g_rv[t][i] -= gv;
            }
        }

        for k in 1..n {
            let jac = &pairs[k - 1].jac;
            for i in 0..hw {
                let (gu, gv) = (g_ru[k][i], g_rv[k][i]);
                if gu == 0.0 && gv == 0.0 {
                    continue;
                }
                let [fu_x, fu_y, fv_x, fv_y] = jac[i];
                grads[k].0[i] -= gu;
                grads[k].1[i] -= gv;
                grads[k - 1].0[i] += gu * (1.0 + fu_x) + gv * fv_x;
                grads[k - 1].1[i] += gu * fu_y + gv * (1.0 + fv_y);
            }
        }
        Ok(())
    }
}

/// `mean_t [L_flow(F_t, P_t) + mu L_mask(F_t, P_t, m_t)] + lambda L_temporal(R)`.
pub fn loss_video(
    flows: &[FlowField],
    pseudo: &[FlowField],
    masks: &[Mask],
    forward_flows: &[FlowField],
    lw: &LossWeights,
) -> Result<LossReport> {
    VideoProblem::new(pseudo, masks, forward_flows, *lw)?.loss(flows)
}

/// Analytic gradient of [`loss_video`] with respect to every `F_t`.
pub fn grad_video(
    flows: &[FlowField],
    pseudo: &[FlowField],
    masks: &[Mask],
    forward_flows: &[FlowField],
    lw: &LossWeights,
) -> Result<Vec<FlowField>> {
    VideoProblem::new(pseudo, masks, forward_flows, *lw)?.gradient(flows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::accumulate;

    fn flow(h: usize, w: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> FlowField {
        FlowField::from_fn(h, w, Direction::Backward, f).unwrap()
    }

    #[test]
    fn flow_loss_examples() {
        let a = flow(1, 1, |_, _| (1.0, 1.0));
        let b = flow(1, 1, |_, _| (0.0, 0.0));
        let ones = WeightMap::ones(1, 1).unwrap();
        assert_eq!(loss_flow(&a, &a, &ones).unwrap(), 0.0);
        assert_eq!(loss_flow(&a, &b, &ones).unwrap(), 2.0);
        let zeros = WeightMap::new(Raster::zeros(1, 1).unwrap()).unwrap();
        assert_eq!(loss_flow(&a, &b, &zeros).unwrap(), 0.0);
        let big = flow(2, 1, |_, _| (0.0, 0.0));
        assert!(matches!(loss_flow(&a, &big, &ones), Err(Error::Shape { .. })));
        assert!(WeightMap::new(Raster::filled(1, 1, -1.0).unwrap()).is_err());
    }

    #[test]
    fn photo_loss_examples() {
        let a = Frame::gray_from_fn(1, 1, |_, _| 0.75).unwrap();
        let b = Frame::gray_from_fn(1, 1, |_, _| 0.25).unwrap();
        let ones = WeightMap::ones(1, 1).unwrap();
        assert_eq!(loss_photo(&a, &a, &ones).unwrap(), 0.0);
        assert_eq!(loss_photo(&a, &b, &ones).unwrap(), 0.25);
        let w3 = WeightMap::new(Raster::filled(1, 1, 3.0).unwrap()).unwrap();
        assert_eq!(loss_photo(&a, &b, &w3).unwrap(), 0.75);
        let rgb = Frame::new(vec![Raster::zeros(1, 1).unwrap(); 3]).unwrap();
        assert!(loss_photo(&a, &rgb, &ones).is_err());
    }

    #[test]
    fn sobel_examples() {
        let c = Raster::filled(5, 5, 2.5).unwrap();
        let (gx, gy) = sobel(&c);
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));

        let step = Raster::from_fn(5, 5, |x, _| if x >= 2 { 1.0 } else { 0.0 }).unwrap();
        let (gx, _) = sobel(&step);
        for y in 1..4 {
            assert_eq!(gx.get(1, y), 4.0);
            assert_eq!(gx.get(2, y), 4.0);
            assert_eq!(gx.get(0, y), 0.0);
            assert_eq!(gx.get(4, y), 0.0);
        }

        let ramp = Raster::from_fn(5, 5, |x, _| x as f64).unwrap();
        let (gx, gy) = sobel(&ramp);
        for y in 0..5 {
            assert_eq!(gx.get(2, y), 8.0);
            assert_eq!(gx.get(0, y), 4.0);
            assert_eq!(gx.get(4, y), 4.0);
        }
        assert!(gy.data().iter().all(|&v| v == 0.0));
    }

    /// Brute-force Sobel with explicit padding, independent of `correlate3`.
    fn brute_sobel(r: &Raster) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = r.dims();
        let mut padded = vec![vec![0.0; w + 2]; h + 2];
        for (py, row) in padded.iter_mut().enumerate() {
            for (px, v) in row.iter_mut().enumerate() {
                let x = (px as isize - 1).clamp(0, w as isize - 1) as usize;
                let y = (py as isize - 1).clamp(0, h as isize - 1) as usize;
                *v = r.get(x, y);
            }
        }
        let mut gx = Vec::new();
        let mut gy = Vec::new();
        for y in 1..=h {
            for x in 1..=w {
                let p = |dx: isize, dy: isize| padded[(y as isize + dy) as usize][(x as isize + dx) as usize];
                gx.push(p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1));
                gy.push(p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1));
            }
        }
        (gx, gy)
    }

    #[test]
    fn mask_loss_examples() {
        let a = flow(6, 6, |x, y| ((x * y) as f64 * 0.1, x as f64 * 0.5));
        let m = Mask::ones(6, 6).unwrap();
        assert_eq!(loss_mask(&a, &a, &m).unwrap(), 0.0);
        let shifted = flow(6, 6, |x, y| ((x * y) as f64 * 0.1 + 3.0, x as f64 * 0.5 - 1.25));
        assert!(loss_mask(&shifted, &a, &m).unwrap() < 1e-12);

        // masked step-edge on 8x8 against the brute-force oracle
        let f = flow(8, 8, |x, y| {
            (if x >= 4 { 1.5 } else { 0.0 }, if y >= 3 { -0.5 } else { 0.25 })
        });
        let g = flow(8, 8, |x, _| (0.1 * x as f64, 0.0));
        let m = Mask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (1..7).contains(&y)).unwrap();
        let mut acc = 0.0;
        for (fc, gc) in [(f.u(), g.u()), (f.v(), g.v())] {
            let (fx, fy) = brute_sobel(fc);
            let (gx, gy) = brute_sobel(gc);
            for i in 0..64 {
                if m.data()[i] == 1 {
                    acc += (fx[i] - gx[i]).abs() + (fy[i] - gy[i]).abs();
                }
            }
        }
        let expected = acc / (m.area() as f64 + 1e-8);
        assert!((loss_mask(&f, &g, &m).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn image_loss_combination() {
        let a = flow(1, 1, |_, _| (1.0, 1.0));
        let b = flow(1, 1, |_, _| (0.0, 0.0));
        let ia = Frame::gray_from_fn(1, 1, |_, _| 0.75).unwrap();
        let ib = Frame::gray_from_fn(1, 1, |_, _| 0.25).unwrap();
        let m = Mask::ones(1, 1).unwrap();
        let ones = WeightMap::ones(1, 1).unwrap();
        let lw = LossWeights::default();
        assert_eq!(loss_image(&a, &a, &ia, &ia, &m, &ones, &lw).unwrap().total, 0.0);
        let only_flow = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 1.0,
            ..lw
        };
        let r = loss_image(&a, &b, &ia, &ib, &m, &ones, &only_flow).unwrap();
        assert_eq!(r.total, loss_flow(&a, &b, &ones).unwrap());
        // a 1x1 field is constant, so the mask term vanishes: 2.0 + 0.25
        let r = loss_image(&a, &b, &ia, &ib, &m, &ones, &lw).unwrap();
        assert_eq!(r.total, 2.25);
        let weighted: f64 = r.terms.iter().map(|t| t.weight * t.value).sum();
        assert!((r.total - weighted).abs() < 1e-12);
    }

    fn series(values: &[f64]) -> TrajectorySeries {
        let mut residuals = vec![VectorField::zeros(2, 2).unwrap()];
        for t in 1..values.len() {
            let d = values[t] - values[t - 1];
            residuals.push(VectorField::constant(2, 2, d, d).unwrap());
        }
        accumulate(residuals).unwrap()
    }

    #[test]
    fn temporal_loss_examples() {
        assert_eq!(loss_temporal(&series(&[0.0, 1.0, 2.0, 3.0])).unwrap(), 0.0);
        assert_eq!(loss_temporal(&series(&[0.0, 0.0, 0.0])).unwrap(), 0.0);
        // R = (0, 0, 1) on both channels: second difference (1, 1), norm sqrt 2
        let l = loss_temporal(&series(&[0.0, 0.0, 1.0])).unwrap();
        assert!((l - 2f64.sqrt()).abs() < 1e-15);
        // one channel only: magnitude 1
        let mut residuals = vec![VectorField::zeros(2, 2).unwrap(); 2];
        residuals.push(VectorField::constant(2, 2, 1.0, 0.0).unwrap());
        assert_eq!(loss_temporal(&accumulate(residuals).unwrap()).unwrap(), 1.0);
        assert!(matches!(loss_temporal(&series(&[0.0, 1.0])), Err(Error::Length(_))));
    }

    #[test]
    fn video_problem_length_checks() {
        let f = flow(4, 4, |_, _| (0.0, 0.0));
        let fwd = FlowField::zeros(4, 4, Direction::Forward).unwrap();
        let m = Mask::ones(4, 4).unwrap();
        let lw = LossWeights::default();
        assert!(matches!(
            loss_video(
                &vec![f.clone(); 3],
                &vec![f.clone(); 3],
                &vec![m.clone(); 3],
                std::slice::from_ref(&fwd),
                &lw
            ),
            Err(Error::Length(_))
        ));
        assert!(matches!(
            loss_video(
                &vec![f.clone(); 2],
                &vec![f.clone(); 2],
                &vec![m.clone(); 2],
                std::slice::from_ref(&fwd),
                &lw
            ),
            Err(Error::Length(_))
        ));
        let no_t = LossWeights {
            lambda_temporal: 0.0,
            ..lw
        };
        assert_eq!(
            loss_video(&vec![f.clone(); 2], &vec![f.clone(); 2], &vec![m; 2], &[fwd], &no_t)
                .unwrap()
                .total,
            0.0
        );
    }

    #[test]
    fn zero_gradient_at_labels() {
        let p: Vec<FlowField> = (0..3)
            .map(|t| flow(5, 5, move |x, y| (0.1 * (x + t) as f64, -0.2 * y as f64)))
            .collect();
        let fwd = vec![FlowField::constant(5, 5, 0.3, 0.1, Direction::Forward).unwrap(); 2];
        let m = vec![Mask::ones(5, 5).unwrap(); 3];
        let lw = LossWeights {
            lambda_temporal: 0.0,
            ..LossWeights::default()
        };
        let g = grad_video(&p, &p, &m, &fwd, &lw).unwrap();
        assert!(g.iter().all(|f| f.vectors().max_norm() == 0.0));
    }
}
