//! Grids, rasters, frames, masks and flow fields, plus the resampling
//! primitives everything else is built on.
//!
//! Pixel centers sit at integer coordinates with the origin at the top-left
//! corner, `x` to the right and `y` downward. A flow stores `(u, v) = (dx, dy)`
//! in pixels. All arithmetic is `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which way a flow field points.
///
/// A `Backward` field is indexed by output pixels and says where in the source
/// to sample. A `Forward` field is indexed by source pixels and says where the
/// content moves to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Backward,
    Forward,
}

/// Behaviour of bilinear sampling outside the pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BorderPolicy {
    /// Clamp the coordinate into `[0, w-1] x [0, h-1]`.
    #[default]
    Clamp,
    /// Treat every pixel outside the grid as zero.
    Zero,
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension { height, width });
    }
    Ok(())
}

/// Pixel-wise grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    height: usize,
    width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn coord(&self, x: usize, y: usize) -> (f64, f64) {
        (x as f64, y as f64)
    }

    /// All coordinates in row-major order, `x` fastest.
    pub fn coords(&self) -> Vec<(f64, f64)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x as f64, y as f64)))
            .collect()
    }

    /// Geometric center `((w-1)/2, (h-1)/2)`.
    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

pub fn make_grid(height: usize, width: usize) -> Result<Grid> {
    Grid::new(height, width)
}

/// Single-channel raster of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::Length(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("raster contains non-finite values".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        check_dims(height, width)?;
        if !value.is_finite() {
            return Err(Error::Data("fill value is not finite".into()));
        }
        Ok(Self {
            height,
            width,
            data: vec![value; height * width],
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        check_dims(height, width)?;
        let data: Vec<f64> = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(height, width, data)
    }

    /// Wraps data whose finiteness the caller already guarantees.
    pub(crate) fn from_vec_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Raster> {
        Raster::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Bilinear sample at a single point. Callers guarantee finite coordinates.
#[inline]
pub(crate) fn sample_point(field: &Raster, x: f64, y: f64, policy: BorderPolicy) -> f64 {
    sample_point_with_grad(field, x, y, policy).0
}

/// Bilinear sample plus its partial derivatives with respect to `x` and `y`.
///
/// Where the clamp policy pins a coordinate, the derivative along that axis
/// is zero.
#[inline]
pub(crate) fn sample_point_with_grad(field: &Raster, x: f64, y: f64, policy: BorderPolicy) -> (f64, f64, f64) {
    let w = field.width;
    let h = field.height;
    match policy {
        BorderPolicy::Clamp => {
            let xmax = (w - 1) as f64;
            let ymax = (h - 1) as f64;
            let x_pinned = !(x > 0.0 && x < xmax);
            let y_pinned = !(y > 0.0 && y < ymax);
            let xc = x.clamp(0.0, xmax);
            let yc = y.clamp(0.0, ymax);
            let x0 = xc.floor() as usize;
            let y0 = yc.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = xc - x0 as f64;
            let fy = yc - y0 as f64;
            let a = field.get(x0, y0);
            let b = field.get(x1, y0);
            let c = field.get(x0, y1);
            let d = field.get(x1, y1);
            let top = (1.0 - fx) * a + fx * b;
            let bottom = (1.0 - fx) * c + fx * d;
            let value = (1.0 - fy) * top + fy * bottom;
            let dx = if x_pinned {
                0.0
            } else {
                (1.0 - fy) * (b - a) + fy * (d - c)
            };
            let dy = if y_pinned { 0.0 } else { bottom - top };
            (value, dx, dy)
        }
        BorderPolicy::Zero => {
            let x0f = x.floor();
            let y0f = y.floor();
            if x0f < -1.0 || y0f < -1.0 || x0f > (w - 1) as f64 || y0f > (h - 1) as f64 {
                return (0.0, 0.0, 0.0);
            }
            let fx = x - x0f;
            let fy = y - y0f;
            let fetch = |xi: f64, yi: f64| -> f64 {
                if xi < 0.0 || yi < 0.0 || xi > (w - 1) as f64 || yi > (h - 1) as f64 {
                    0.0
                } else {
                    field.get(xi as usize, yi as usize)
                }
            };
            let a = fetch(x0f, y0f);
            let b = fetch(x0f + 1.0, y0f);
            let c = fetch(x0f, y0f + 1.0);
            let d = fetch(x0f + 1.0, y0f + 1.0);
            let top = (1.0 - fx) * a + fx * b;
            let bottom = (1.0 - fx) * c + fx * d;
            let value = (1.0 - fy) * top + fy * bottom;
            (value, (1.0 - fy) * (b - a) + fy * (d - c), bottom - top)
        }
    }
}

/// Bilinear interpolation of `field` at every point.
pub fn sample_bilinear(field: &Raster, points: &[(f64, f64)], policy: BorderPolicy) -> Result<Vec<f64>> {
    if let Some((i, _)) = points
        .iter()
        .enumerate()
        .find(|(_, (x, y))| !x.is_finite() || !y.is_finite())
    {
        return Err(Error::Input(format!("sample point {i} is not finite")));
    }
    Ok(points.iter().map(|&(x, y)| sample_point(field, x, y, policy)).collect())
}

/// Two-channel displacement field without direction semantics: residuals,
/// trajectory positions, and the `disp` argument of [`compose_displaced`].
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    u: Raster,
    v: Raster,
}

impl VectorField {
    pub fn new(u: Raster, v: Raster) -> Result<Self> {
        if u.dims() != v.dims() {
            return Err(Error::shape(u.dims(), v.dims()));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            u: Raster::zeros(height, width)?,
            v: Raster::zeros(height, width)?,
        })
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Result<Self> {
        Ok(Self {
            u: Raster::filled(height, width, u)?,
            v: Raster::filled(height, width, v)?,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Result<Self> {
        check_dims(height, width)?;
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Ok(Self {
            u: Raster::new(height, width, u)?,
            v: Raster::new(height, width, v)?,
        })
    }

    pub(crate) fn from_vecs_unchecked(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Self {
        Self {
            u: Raster::from_vec_unchecked(height, width, u),
            v: Raster::from_vec_unchecked(height, width, v),
        }
    }

    pub fn height(&self) -> usize {
        self.u.height
    }

    pub fn width(&self) -> usize {
        self.u.width
    }

    pub fn dims(&self) -> (usize, usize) {
        self.u.dims()
    }

    pub fn u(&self) -> &Raster {
        &self.u
    }

    pub fn v(&self) -> &Raster {
        &self.v
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        (self.u.get(x, y), self.v.get(x, y))
    }

    fn zip_with(&self, other: &VectorField, f: impl Fn(f64, f64) -> f64) -> Result<VectorField> {
        if self.dims() != other.dims() {
            return Err(Error::shape(self.dims(), other.dims()));
        }
        let (h, w) = self.dims();
        let u = self.u.data.iter().zip(&other.u.data).map(|(&a, &b)| f(a, b)).collect();
        let v = self.v.data.iter().zip(&other.v.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(VectorField {
            u: Raster::new(h, w, u)?,
            v: Raster::new(h, w, v)?,
        })
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &VectorField) -> Result<VectorField> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Result<VectorField> {
        Ok(VectorField {
            u: self.u.map(|a| a * k)?,
            v: self.v.map(|a| a * k)?,
        })
    }

    /// Largest per-pixel Euclidean magnitude.
    pub fn max_norm(&self) -> f64 {
        self.u
            .data
            .iter()
            .zip(&self.v.data)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    /// Mean `(u, v)` over pixels at least `margin` pixels from every border.
    /// Falls back to the whole field when the margin swallows it.
    pub fn interior_mean(&self, margin: usize) -> (f64, f64) {
        let (h, w) = self.dims();
        let (x0, x1, y0, y1) = if 2 * margin < w && 2 * margin < h {
            (margin, w - margin, margin, h - margin)
        } else {
            (0, w, 0, h)
        };
        let mut su = 0.0;
        let mut sv = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                su += self.u.get(x, y);
                sv += self.v.get(x, y);
            }
        }
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        (su / n, sv / n)
    }
}

/// Dense displacement field with a fixed direction tag.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    vectors: VectorField,
    direction: Direction,
}

impl FlowField {
    pub fn new(vectors: VectorField, direction: Direction) -> Self {
        Self { vectors, direction }
    }

    pub fn from_rasters(u: Raster, v: Raster, direction: Direction) -> Result<Self> {
        Ok(Self::new(VectorField::new(u, v)?, direction))
    }

    pub fn zeros(height: usize, width: usize, direction: Direction) -> Result<Self> {
        Ok(Self::new(VectorField::zeros(height, width)?, direction))
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64, direction: Direction) -> Result<Self> {
        Ok(Self::new(VectorField::constant(height, width, u, v)?, direction))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        direction: Direction,
        f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        Ok(Self::new(VectorField::from_fn(height, width, f)?, direction))
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn vectors(&self) -> &VectorField {
        &self.vectors
    }

    pub fn into_vectors(self) -> VectorField {
        self.vectors
    }

    pub fn u(&self) -> &Raster {
        &self.vectors.u
    }

    pub fn v(&self) -> &Raster {
        &self.vectors.v
    }

    pub fn dims(&self) -> (usize, usize) {
        self.vectors.dims()
    }

    pub fn height(&self) -> usize {
        self.vectors.height()
    }

    pub fn width(&self) -> usize {
        self.vectors.width()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        self.vectors.get(x, y)
    }

    pub fn expect_direction(&self, expected: Direction) -> Result<()> {
        if self.direction != expected {
            return Err(Error::Direction {
                expected,
                actual: self.direction,
            });
        }
        Ok(())
    }
}

/// Raster image with 1 or 3 channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    channels: Vec<Raster>,
}

impl Frame {
    /// Builds a frame, clamping every value into `[0, 1]`.
    pub fn new(channels: Vec<Raster>) -> Result<Self> {
        if channels.len() != 1 && channels.len() != 3 {
            return Err(Error::Input(format!(
                "frames have 1 or 3 channels, got {}",
                channels.len()
            )));
        }
        let dims = channels[0].dims();
        if let Some(c) = channels.iter().find(|c| c.dims() != dims) {
            return Err(Error::shape(dims, c.dims()));
        }
        let channels = channels
            .into_iter()
            .map(|mut c| {
                for v in &mut c.data {
                    *v = v.clamp(0.0, 1.0);
                }
                c
            })
            .collect();
        Ok(Self { channels })
    }

    pub fn gray_from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::new(vec![Raster::from_fn(height, width, f)?])
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[Raster] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &Raster {
        &self.channels[c]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    /// Luma with Rec. 601 weights; a 1-channel frame is returned as is.
    pub fn to_gray(&self) -> Raster {
        if self.channels.len() == 1 {
            return self.channels[0].clone();
        }
        let (r, g, b) = (&self.channels[0], &self.channels[1], &self.channels[2]);
        let data = r
            .data
            .iter()
            .zip(&g.data)
            .zip(&b.data)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect();
        Raster::from_vec_unchecked(r.height, r.width, data)
    }
}

/// Binary face-region mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::Length(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        check_dims(height, width)?;
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| u8::from(f(x, y)))
            .collect();
        Self::new(height, width, data)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_raster(&self) -> Raster {
        Raster::from_vec_unchecked(self.height, self.width, self.data.iter().map(|&v| v as f64).collect())
    }
}

/// Backward warp: `out(p) = image(p + flow(p))`, channel by channel.
pub fn warp_backward(image: &Frame, flow: &FlowField, policy: BorderPolicy) -> Result<Frame> {
    flow.expect_direction(Direction::Backward)?;
    if image.dims() != flow.dims() {
        return Err(Error::shape(flow.dims(), image.dims()));
    }
    let (h, w) = image.dims();
    let u = flow.u();
    let v = flow.v();
    let channels = image
        .channels
        .iter()
        .map(|src| {
            let mut out = vec![0.0; h * w];
            out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
                for (x, o) in row.iter_mut().enumerate() {
                    let i = y * w + x;
                    *o = sample_point(src, x as f64 + u.data[i], y as f64 + v.data[i], policy);
                }
            });
            Raster::from_vec_unchecked(h, w, out)
        })
        .collect();
    Ok(Frame { channels })
}

/// Samples `field` at `p + disp(p)` for every pixel `p`; the result keeps the
/// direction of `field`.
pub fn compose_displaced(field: &FlowField, disp: &VectorField, policy: BorderPolicy) -> Result<FlowField> {
    if field.dims() != disp.dims() {
        return Err(Error::shape(field.dims(), disp.dims()));
    }
    let (h, w) = field.dims();
    let mut u = vec![0.0; h * w];
    let mut v = vec![0.0; h * w];
    u.par_chunks_mut(w)
        .zip(v.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (ur, vr))| {
            for x in 0..w {
                let (dx, dy) = disp.get(x, y);
                let px = x as f64 + dx;
                let py = y as f64 + dy;
                ur[x] = sample_point(field.u(), px, py, policy);
                vr[x] = sample_point(field.v(), px, py, policy);
            }
        });
    Ok(FlowField::new(
        VectorField::from_vecs_unchecked(h, w, u, v),
        field.direction,
    ))
}

/// Solves `p + flow(p) = target` for `p` by Newton iteration on the bilinear
/// interpolant of a backward flow.
pub fn invert_point(flow: &FlowField, target: (f64, f64), policy: BorderPolicy) -> (f64, f64) {
    let (mut px, mut py) = target;
    for _ in 0..50 {
        let (fu, ux, uy) = sample_point_with_grad(flow.u(), px, py, policy);
        let (fv, vx, vy) = sample_point_with_grad(flow.v(), px, py, policy);
        let rx = px + fu - target.0;
        let ry = py + fv - target.1;
        if rx.abs() < 1e-12 && ry.abs() < 1e-12 {
            break;
        }
        let a = 1.0 + ux;
        let b = uy;
        let c = vx;
        let d = 1.0 + vy;
        let det = a * d - b * c;
        let (sx, sy) = if det.abs() > 1e-9 {
            ((d * rx - b * ry) / det, (a * ry - c * rx) / det)
        } else {
            (rx, ry)
        };
        px -= sx;
        py -= sy;
    }
    (px, py)
}

/// Numerically inverts a backward flow into its forward counterpart `g`, so
/// that `q + g(q)` is the output pixel whose backward flow lands on `q`.
pub fn invert_backward(flow: &FlowField, policy: BorderPolicy) -> Result<FlowField> {
    flow.expect_direction(Direction::Backward)?;
    let (h, w) = flow.dims();
    let vectors = VectorField::from_fn(h, w, |x, y| {
        let (px, py) = invert_point(flow, (x as f64, y as f64), policy);
        (px - x as f64, py - y as f64)
    })?;
    Ok(FlowField::new(vectors, Direction::Forward))
}
