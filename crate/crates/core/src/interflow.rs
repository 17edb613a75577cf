//! Inter-frame optical flow: a coarse-to-fine Horn–Schunck estimator and
//! Middlebury `.flo` reading and writing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sample_point, BorderPolicy, Direction, FlowField, Frame, Raster, VectorField};

/// `.flo` header tag, the float `202021.25` ("PIEH" in little-endian bytes).
pub const FLO_MAGIC: f32 = 202021.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HSParams {
    /// Smoothness weight, on intensities scaled to `[0, 255]`.
    pub alpha: f64,
    pub iterations: usize,
    pub pyramid_levels: usize,
}

impl Default for HSParams {
    fn default() -> Self {
        Self {
            alpha: 15.0,
            iterations: 100,
            pyramid_levels: 4,
        }
    }
}

impl HSParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) || self.iterations == 0 || self.pyramid_levels == 0 {
            return Err(Error::Input(
                "Horn-Schunck alpha, iterations and pyramid levels must be positive".into(),
            ));
        }
        Ok(())
    }
}

const SMOOTH_TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
const MIN_LEVEL_SIDE: usize = 8;

fn smooth(r: &Raster) -> Raster {
    let (h, w) = r.dims();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = SMOOTH_TAPS
                .iter()
                .enumerate()
                .map(|(k, t)| t * r.get(clampi(x as isize + k as isize - 2, w), y))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = SMOOTH_TAPS
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[clampi(y as isize + k as isize - 2, h) * w + x])
                .sum();
        }
    }
    Raster::from_vec_unchecked(h, w, out)
}

/// 2x2 box decimation; coarse pixel `x` covers fine pixels `2x` and `2x+1`.
fn downsample(r: &Raster) -> Raster {
    let (h, w) = r.dims();
    let (ch, cw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let (x0, y0) = (2 * x, 2 * y);
            let (x1, y1) = ((2 * x + 1).min(w - 1), (2 * y + 1).min(h - 1));
            out[y * cw + x] = 0.25 * (r.get(x0, y0) + r.get(x1, y0) + r.get(x0, y1) + r.get(x1, y1));
        }
    }
    Raster::from_vec_unchecked(ch, cw, out)
}

/// Resamples a coarse flow onto a finer grid and rescales the vectors.
fn upsample_flow(u: &Raster, v: &Raster, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let (ch, cw) = u.dims();
    let sx = w as f64 / cw as f64;
    let sy = h as f64 / ch as f64;
    let mut uo = vec![0.0; h * w];
    let mut vo = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) / sx - 0.5;
            let cy = (y as f64 + 0.5) / sy - 0.5;
            uo[y * w + x] = sx * sample_point(u, cx, cy, BorderPolicy::Clamp);
            vo[y * w + x] = sy * sample_point(v, cx, cy, BorderPolicy::Clamp);
        }
    }
    (uo, vo)
}

/// Linearised brightness constancy at one pyramid level:
/// `Ix (u - u0) + Iy (v - v0) + It ~ 0`, folded into `Ix u + Iy v + c`.
struct Linearisation {
    ix: Vec<f64>,
    iy: Vec<f64>,
    c: Vec<f64>,
}

fn linearise(a: &Raster, b: &Raster, u0: &[f64], v0: &[f64]) -> Linearisation {
    let (h, w) = a.dims();
    let mut warped = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            warped[i] = sample_point(b, x as f64 + u0[i], y as f64 + v0[i], BorderPolicy::Clamp);
        }
    }
    let bw = Raster::from_vec_unchecked(h, w, warped);
    let mut ix = vec![0.0; h * w];
    let mut iy = vec![0.0; h * w];
    let mut c = vec![0.0; h * w];
    for y in 0..h {
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let i = y * w + x;
            let dx = 0.5 * ((a.get(xp, y) - a.get(xm, y)) + (bw.get(xp, y) - bw.get(xm, y)));
            let dy = 0.5 * ((a.get(x, yp) - a.get(x, ym)) + (bw.get(x, yp) - bw.get(x, ym)));
            let norm_x = if xp - xm == 2 { 0.5 } else { 1.0 };
            let norm_y = if yp - ym == 2 { 0.5 } else { 1.0 };
            ix[i] = dx * norm_x;
            iy[i] = dy * norm_y;
            let it = bw.get(x, y) - a.get(x, y);
            c[i] = it - ix[i] * u0[i] - iy[i] * v0[i];
        }
    }
    Linearisation { ix, iy, c }
}

/// `sum (Ix u + Iy v + c)^2 + alpha^2 sum_edges (|du|^2 + |dv|^2)` over
/// 4-neighbour edges, each counted once.
fn hs_energy(lin: &Linearisation, u: &[f64], v: &[f64], h: usize, w: usize, alpha2: f64) -> f64 {
    let mut data = 0.0;
    let mut smooth = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r = lin.ix[i] * u[i] + lin.iy[i] * v[i] + lin.c[i];
            data += r * r;
            if x + 1 < w {
                smooth += (u[i + 1] - u[i]).powi(2) + (v[i + 1] - v[i]).powi(2);
            }
            if y + 1 < h {
                smooth += (u[i + w] - u[i]).powi(2) + (v[i + w] - v[i]).powi(2);
            }
        }
    }
    data + alpha2 * smooth
}

/// One in-place Gauss–Seidel sweep in raster order. Each update is the exact
/// minimiser of the energy over `(u_p, v_p)` with the neighbours fixed, so the
/// energy never increases.
fn hs_sweep(lin: &Linearisation, u: &mut [f64], v: &mut [f64], h: usize, w: usize, alpha2: f64) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut su = 0.0;
            let mut sv = 0.0;
            let mut n = 0.0;
            if x > 0 {
                su += u[i - 1];
                sv += v[i - 1];
                n += 1.0;
            }
            if x + 1 < w {
                su += u[i + 1];
                sv += v[i + 1];
                n += 1.0;
            }
            if y > 0 {
                su += u[i - w];
                sv += v[i - w];
                n += 1.0;
            }
            if y + 1 < h {
                su += u[i + w];
                sv += v[i + w];
                n += 1.0;
            }
            if n == 0.0 {
                // single-pixel level: pure data term
                let g2 = lin.ix[i] * lin.ix[i] + lin.iy[i] * lin.iy[i];
                if g2 > 0.0 {
                    let r = lin.ix[i] * u[i] + lin.iy[i] * v[i] + lin.c[i];
                    u[i] -= lin.ix[i] * r / g2;
                    v[i] -= lin.iy[i] * r / g2;
                }
                continue;
            }
            let (ub, vb) = (su / n, sv / n);
            let (gx, gy) = (lin.ix[i], lin.iy[i]);
            let r = gx * ub + gy * vb + lin.c[i];
            let denom = n * alpha2 + gx * gx + gy * gy;
            u[i] = ub - gx * r / denom;
            v[i] = vb - gy * r / denom;
        }
    }
}

fn prepare(frame: &Frame) -> Raster {
    let g = frame.to_gray();
    let scaled = Raster::from_vec_unchecked(g.height(), g.width(), g.data().iter().map(|v| v * 255.0).collect());
    smooth(&scaled)
}

fn estimate(a: &Frame, b: &Frame, params: &HSParams, trace: bool) -> Result<(FlowField, Vec<f64>)> {
    params.validate()?;
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    let mut pa = vec![prepare(a)];
    let mut pb = vec![prepare(b)];
    while pa.len() < params.pyramid_levels {
        let last = pa.last().expect("non-empty");
        if last.height() / 2 < MIN_LEVEL_SIDE || last.width() / 2 < MIN_LEVEL_SIDE {
            break;
        }
        let na = downsample(&smooth(last));
        let nb = downsample(&smooth(pb.last().expect("non-empty")));
        pa.push(na);
        pb.push(nb);
    }

    let alpha2 = params.alpha * params.alpha;
    let coarse = pa.last().expect("non-empty");
    let mut u = vec![0.0; coarse.height() * coarse.width()];
    let mut v = vec![0.0; coarse.height() * coarse.width()];
    let mut cur_dims = coarse.dims();
    let mut energies = Vec::new();
    for level in (0..pa.len()).rev() {
        let (h, w) = pa[level].dims();
        if (h, w) != cur_dims {
            let (uo, vo) = upsample_flow(
                &Raster::from_vec_unchecked(cur_dims.0, cur_dims.1, u),
                &Raster::from_vec_unchecked(cur_dims.0, cur_dims.1, v),
                h,
                w,
            );
            u = uo;
            v = vo;
            cur_dims = (h, w);
        }
        let lin = linearise(&pa[level], &pb[level], &u, &v);
        let finest = level == 0;
        if trace && finest {
            energies.push(hs_energy(&lin, &u, &v, h, w, alpha2));
        }
        for _ in 0..params.iterations {
            hs_sweep(&lin, &mut u, &mut v, h, w, alpha2);
            if trace && finest {
                energies.push(hs_energy(&lin, &u, &v, h, w, alpha2));
            }
        }
    }
    let (h, w) = a.dims();
    let flow = FlowField::new(VectorField::from_vecs_unchecked(h, w, u, v), Direction::Forward);
    Ok((flow, energies))
}

/// Forward flow `a -> b`: content at `p` in `a` is found at `p + flow(p)` in
/// `b`. Three-channel input is converted to Rec. 601 luma.
pub fn estimate_flow(frame_a: &Frame, frame_b: &Frame, params: &HSParams) -> Result<FlowField> {
    Ok(estimate(frame_a, frame_b, params, false)?.0)
}

/// [`estimate_flow`] plus the energy before and after every sweep at the
/// finest level.
pub fn estimate_flow_traced(frame_a: &Frame, frame_b: &Frame, params: &HSParams) -> Result<(FlowField, Vec<f64>)> {
    estimate(frame_a, frame_b, params, true)
}

/// Flow from `frame_b` back to `frame_a`, tagged `Forward` like every
/// inter-frame flow.
pub fn reverse_pair(frame_a: &Frame, frame_b: &Frame, params: &HSParams) -> Result<FlowField> {
    estimate_flow(frame_b, frame_a, params)
}

/// Decodes a Middlebury `.flo` payload; the caller supplies the direction.
pub fn read_flo(bytes: &[u8], direction: Direction) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Length(format!(
            ".flo header needs 12 bytes, got {}",
            bytes.len()
        )));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {magic}")));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(Error::Format(format!("bad .flo dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() != expected {
        return Err(Error::Length(format!(
            ".flo payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let a = f32::from_le_bytes(word(12 + 8 * i)) as f64;
        let b = f32::from_le_bytes(word(16 + 8 * i)) as f64;
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Data(format!("non-finite flow at pixel {i}")));
        }
        u.push(a);
        v.push(b);
    }
    FlowField::from_rasters(Raster::new(h, w, u)?, Raster::new(h, w, v)?, direction)
}

/// Encodes a flow as Middlebury `.flo` (values quantised to `f32`).
pub fn write_flo(flow: &FlowField) -> Result<Vec<u8>> {
    let (h, w) = flow.dims();
    let width = i32::try_from(w).map_err(|_| Error::Format(format!("width {w} exceeds i32")))?;
    let height = i32::try_from(h).map_err(|_| Error::Format(format!("height {h} exceeds i32")))?;
    let mut out = Vec::with_capacity(12 + w * h * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    for (a, b) in flow.u().data().iter().zip(flow.v().data()) {
        out.extend_from_slice(&(*a as f32).to_le_bytes());
        out.extend_from_slice(&(*b as f32).to_le_bytes());
    }
    Ok(out)
}
