//! Deterministic DDIM sampling over flow fields with ε-prediction.
//!
//! Flows are sampled in a normalised space (pixel displacement divided by
//! `max_displacement`) and rescaled on output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Direction, FlowField, Frame, Mask, Raster, VectorField};

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `betas[k - 1]` is β_k.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Length `T + 1`, with `alpha_bar[0] == 1`.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Domain(format!("step {t} outside schedule of {} steps", self.steps)))
    }
}

/// Linear β schedule; `alpha_bar[t] = prod_{k<=t} (1 - β_k)`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Domain(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|k| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * k as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(Schedule {
        steps,
        betas,
        alpha_bar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sample_steps: usize,
    /// Pixel displacement mapped to 1.0 in the sampling space.
    pub max_displacement: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            sample_steps: 50,
            max_displacement: 64.0,
        }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        if self.sample_steps == 0 || self.sample_steps > self.train_steps {
            return Err(Error::Domain(format!(
                "sample steps {} must lie in 1..={}",
                self.sample_steps, self.train_steps
            )));
        }
        if !(self.max_displacement.is_finite() && self.max_displacement > 0.0) {
            return Err(Error::Domain("max displacement must be positive".into()));
        }
        make_schedule(self.train_steps, self.beta_min, self.beta_max)
    }
}

/// Channel stack `[mask, source RGB, features...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    height: usize,
    width: usize,
    channels: Vec<Raster>,
}

impl Conditioning {
    pub fn channels(&self) -> &[Raster] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn feature_count(&self) -> usize {
        self.channels.len() - 4
    }
}

pub fn assemble_condition(mask: &Mask, source: &Frame, features: &[Raster]) -> Result<Conditioning> {
    let dims = source.dims();
    if source.channel_count() != 3 {
        return Err(Error::Input(format!(
            "source image must have 3 channels, got {}",
            source.channel_count()
        )));
    }
    if mask.dims() != dims {
        return Err(Error::shape(dims, mask.dims()));
    }
    if let Some(f) = features.iter().find(|f| f.dims() != dims) {
        return Err(Error::shape(dims, f.dims()));
    }
    let mut channels = Vec::with_capacity(4 + features.len());
    channels.push(mask.to_raster());
    channels.extend(source.channels().iter().cloned());
    channels.extend(features.iter().cloned());
    Ok(Conditioning {
        height: dims.0,
        width: dims.1,
        channels,
    })
}

/// Luma gradient magnitude from central differences at spacings 1 and 2.
pub fn structural_features(frame: &Frame) -> Vec<Raster> {
    let g = frame.to_gray();
    let (h, w) = g.dims();
    [1usize, 2]
        .iter()
        .map(|&s| {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let dx = g.get((x + s).min(w - 1), y) - g.get(x.saturating_sub(s), y);
                    let dy = g.get(x, (y + s).min(h - 1)) - g.get(x, y.saturating_sub(s));
                    out[y * w + x] = dx.hypot(dy) / (2 * s) as f64;
                }
            }
            Raster::from_vec_unchecked(h, w, out)
        })
        .collect()
}

/// Predicts the noise in `x_t` (normalised units). Implementations must be
/// deterministic and return a field of the input's dimensions.
pub trait Denoiser: Sync {
    fn predict(&self, x_t: &VectorField, t: usize, cond: &Conditioning) -> Result<VectorField>;
}

impl<F> Denoiser for F
where
    F: Fn(&VectorField, usize, &Conditioning) -> Result<VectorField> + Sync,
{
    fn predict(&self, x_t: &VectorField, t: usize, cond: &Conditioning) -> Result<VectorField> {
        self(x_t, t, cond)
    }
}

/// Returns the exact noise that separates `x_t` from a known target, so that
/// sampling lands on the target.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    target: VectorField,
    alpha_bar: Vec<f64>,
}

impl OracleDenoiser {
    /// `target` is in pixels; it is normalised by `max_displacement`.
    pub fn new(target: &FlowField, schedule: &Schedule, max_displacement: f64) -> Result<Self> {
        target.expect_direction(Direction::Backward)?;
        Ok(Self {
            target: target.vectors().scale(1.0 / max_displacement)?,
            alpha_bar: schedule.alpha_bar.clone(),
        })
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, x_t: &VectorField, t: usize, _cond: &Conditioning) -> Result<VectorField> {
        let ab = *self
            .alpha_bar
            .get(t)
            .ok_or_else(|| Error::Domain(format!("step {t} outside oracle schedule")))?;
        if ab >= 1.0 {
            return Err(Error::Domain("oracle is undefined at alpha_bar = 1".into()));
        }
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let u = zip(x_t.u(), self.target.u(), |x, f| (x - sa * f) / sn)?;
        let v = zip(x_t.v(), self.target.v(), |x, f| (x - sa * f) / sn)?;
        VectorField::new(u, v)
    }
}

/// Untrained stand-in: `tanh` of a seeded random linear map of the per-pixel
/// input `[x_t, cond..., t/T]`.
#[derive(Debug, Clone)]
pub struct RandomProjectionDenoiser {
    weights: [Vec<f64>; 2],
    steps: usize,
}

impl RandomProjectionDenoiser {
    pub fn new(cond_channels: usize, steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cond_channels + 3;
        let scale = 1.0 / (n as f64).sqrt();
        let mut row = || -> Vec<f64> {
            (0..n)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let weights = [row(), row()];
        Self {
            weights,
            steps: steps.max(1),
        }
    }
}

impl Denoiser for RandomProjectionDenoiser {
    fn predict(&self, x_t: &VectorField, t: usize, cond: &Conditioning) -> Result<VectorField> {
        if cond.dims() != x_t.dims() {
            return Err(Error::shape(x_t.dims(), cond.dims()));
        }
        if cond.channel_count() + 3 != self.weights[0].len() {
            return Err(Error::Input(format!(
                "denoiser built for {} conditioning channels, got {}",
                self.weights[0].len() - 3,
                cond.channel_count()
            )));
        }
        let tau = t as f64 / self.steps as f64;
        let eval = |x: usize, y: usize, w: &[f64]| {
            let (a, b) = x_t.get(x, y);
            let mut acc = w[0] * a + w[1] * b + w[2] * tau;
            for (k, c) in cond.channels().iter().enumerate() {
                acc += w[3 + k] * c.get(x, y);
            }
            acc.tanh()
        };
        VectorField::from_fn(x_t.height(), x_t.width(), |x, y| {
            (eval(x, y, &self.weights[0]), eval(x, y, &self.weights[1]))
        })
    }
}

fn zip(a: &Raster, b: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Ok(Raster::from_vec_unchecked(a.height(), a.width(), data))
}

/// The η = 0 update on scalars given the two cumulative alphas.
/// Returns `(x0_hat, x_prev)`.
pub fn ddim_update(x_t: f64, eps_hat: f64, alpha_bar_t: f64, alpha_bar_prev: f64) -> (f64, f64) {
    let x0 = (x_t - (1.0 - alpha_bar_t).sqrt() * eps_hat) / alpha_bar_t.sqrt();
    let prev = alpha_bar_prev.sqrt() * x0 + (1.0 - alpha_bar_prev).sqrt() * eps_hat;
    (x0, prev)
}

pub fn ddim_step(
    x_t: &VectorField,
    eps_hat: &VectorField,
    t: usize,
    t_prev: usize,
    schedule: &Schedule,
) -> Result<VectorField> {
    if t_prev >= t {
        return Err(Error::Domain(format!("need t > t_prev, got {t} and {t_prev}")));
    }
    let ab_t = schedule.alpha_bar_at(t)?;
    let ab_prev = schedule.alpha_bar_at(t_prev)?;
    let step = |x: f64, e: f64| ddim_update(x, e, ab_t, ab_prev).1;
    VectorField::new(zip(x_t.u(), eps_hat.u(), step)?, zip(x_t.v(), eps_hat.v(), step)?)
}

/// `samples + 1` timesteps from `T` down to 0, uniformly spaced.
pub fn sample_timesteps(train_steps: usize, samples: usize) -> Result<Vec<usize>> {
    if samples == 0 || samples > train_steps {
        return Err(Error::Domain(format!(
            "sample steps {samples} must lie in 1..={train_steps}"
        )));
    }
    Ok((0..=samples)
        .rev()
        .map(|i| ((train_steps * i) as f64 / samples as f64).round() as usize)
        .collect())
}

/// Draws `x_T` from a seeded unit Gaussian (u channel first, row-major) and
/// walks the uniform timestep subset. The result is in pixels, tagged
/// `Backward`.
pub fn ddim_sample(
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    dims: (usize, usize),
    config: &ScheduleConfig,
    seed: u64,
) -> Result<FlowField> {
    let schedule = config.schedule()?;
    let (h, w) = dims;
    if cond.dims() != dims {
        return Err(Error::shape(dims, cond.dims()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |_: usize, _: usize| -> f64 { StandardNormal.sample(&mut rng) };
    let u = Raster::from_fn(h, w, &mut noise)?;
    let v = Raster::from_fn(h, w, &mut noise)?;
    let mut x = VectorField::new(u, v)?;
    let times = sample_timesteps(schedule.steps(), config.sample_steps)?;
    for pair in times.windows(2) {
        let eps = denoiser.predict(&x, pair[0], cond)?;
        if eps.dims() != dims {
            return Err(Error::shape(dims, eps.dims()));
        }
        x = ddim_step(&x, &eps, pair[0], pair[1], &schedule)?;
    }
    Ok(FlowField::new(x.scale(config.max_displacement)?, Direction::Backward))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(h: usize, w: usize) -> Conditioning {
        let frame = Frame::new(vec![Raster::filled(h, w, 0.5).unwrap(); 3]).unwrap();
        let feats = structural_features(&frame);
        assemble_condition(&Mask::ones(h, w).unwrap(), &frame, &feats).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[1.0, 0.5]);
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar().len(), 1001);
        assert_eq!(s.alpha_bar()[0], 1.0);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn conditioning_order() {
        let (h, w) = (4, 5);
        let frame = Frame::new(vec![
            Raster::filled(h, w, 0.1).unwrap(),
            Raster::filled(h, w, 0.2).unwrap(),
            Raster::filled(h, w, 0.3).unwrap(),
        ])
        .unwrap();
        let mask = Mask::ones(h, w).unwrap();
        let c = assemble_condition(&mask, &frame, &[]).unwrap();
        assert_eq!(c.channel_count(), 4);
        let feats: Vec<Raster> = (0..8).map(|k| Raster::filled(h, w, 10.0 + k as f64).unwrap()).collect();
        let c = assemble_condition(&mask, &frame, &feats).unwrap();
        assert_eq!(c.channel_count(), 12);
        let probes: Vec<f64> = c.channels().iter().map(|r| r.get(2, 1)).collect();
        assert_eq!(&probes[..4], &[1.0, 0.1, 0.2, 0.3]);
        for k in 0..8 {
            assert_eq!(probes[4 + k], 10.0 + k as f64);
        }
        let bad = Raster::zeros(h, w + 1).unwrap();
        assert!(matches!(
            assemble_condition(&mask, &frame, &[bad]),
            Err(Error::Shape { .. })
        ));
        let gray = Frame::gray_from_fn(h, w, |_, _| 0.5).unwrap();
        assert!(assemble_condition(&mask, &gray, &[]).is_err());
    }

    #[test]
    fn structural_features_on_ramp() {
        let frame = Frame::gray_from_fn(6, 8, |x, _| 0.1 * x as f64).unwrap();
        let f = structural_features(&frame);
        assert_eq!(f.len(), 2);
        assert!((f[0].get(3, 2) - 0.1).abs() < 1e-12);
        assert!((f[1].get(3, 2) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn step_examples() {
        let (x0, prev) = ddim_update(1.0, 0.5, 0.25, 0.81);
        let x0_ref = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert!((x0 - x0_ref).abs() < 1e-15);
        assert!((prev - (0.9 * x0_ref + 0.19f64.sqrt() * 0.5)).abs() < 1e-15);
        assert_eq!(ddim_update(0.7, 0.3, 1.0, 1.0).1, 0.7);
        assert!((ddim_update(0.7, 0.0, 0.49, 1.0).1 - 1.0).abs() < 1e-15);

        let s = make_schedule(4, 0.1, 0.3).unwrap();
        let x = VectorField::constant(2, 2, 1.0, -1.0).unwrap();
        let e = VectorField::zeros(2, 2).unwrap();
        let out = ddim_step(&x, &e, 3, 0, &s).unwrap();
        let k = 1.0 / s.alpha_bar()[3].sqrt();
        assert!((out.get(1, 1).0 - k).abs() < 1e-15);
        assert!(ddim_step(&x, &e, 2, 2, &s).is_err());
        assert!(ddim_step(&x, &e, 5, 0, &s).is_err());
    }

    #[test]
    fn timesteps_include_endpoints() {
        assert_eq!(sample_timesteps(1000, 1).unwrap(), vec![1000, 0]);
        assert_eq!(sample_timesteps(1000, 5).unwrap(), vec![1000, 800, 600, 400, 200, 0]);
        let t = sample_timesteps(1000, 50).unwrap();
        assert_eq!(t.len(), 51);
        assert!(t.windows(2).all(|w| w[0] > w[1]));
        assert!(sample_timesteps(10, 11).is_err());
        assert!(sample_timesteps(10, 0).is_err());
    }

    #[test]
    fn oracle_recovers_target() {
        let (h, w) = (16, 16);
        let target = FlowField::from_fn(h, w, Direction::Backward, |x, y| {
            (3.0 * (x as f64 * 0.4).sin(), -20.0 + y as f64)
        })
        .unwrap();
        let c = cond(h, w);
        for steps in [1, 5, 50] {
            let cfg = ScheduleConfig {
                sample_steps: steps,
                ..ScheduleConfig::default()
            };
            let oracle = OracleDenoiser::new(&target, &cfg.schedule().unwrap(), cfg.max_displacement).unwrap();
            for seed in [0, 7] {
                let out = ddim_sample(&oracle, &c, (h, w), &cfg, seed).unwrap();
                assert_eq!(out.direction(), Direction::Backward);
                let err = out.vectors().sub(target.vectors()).unwrap().max_norm();
                assert!(err < 1e-5, "S={steps}: {err}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_finite() {
        let (h, w) = (8, 8);
        let c = cond(h, w);
        let cfg = ScheduleConfig {
            sample_steps: 10,
            ..ScheduleConfig::default()
        };
        let stub = RandomProjectionDenoiser::new(c.channel_count(), cfg.train_steps, 3);
        let a = ddim_sample(&stub, &c, (h, w), &cfg, 11).unwrap();
        let b = ddim_sample(&stub, &c, (h, w), &cfg, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.u().data().iter().chain(a.v().data()).all(|v| v.is_finite()));

        let zero = |x: &VectorField, _: usize, _: &Conditioning| VectorField::zeros(x.height(), x.width());
        let cfg1 = ScheduleConfig {
            train_steps: 1,
            sample_steps: 1,
            ..ScheduleConfig::default()
        };
        let out = ddim_sample(&zero, &c, (h, w), &cfg1, 5).unwrap();
        assert_eq!(out.dims(), (h, w));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let first: f64 = StandardNormal.sample(&mut rng);
        let ab1 = 1.0 - cfg1.beta_min;
        assert!((out.get(0, 0).0 - cfg1.max_displacement * first / ab1.sqrt()).abs() < 1e-12);

        let bad = ScheduleConfig {
            train_steps: 10,
            sample_steps: 11,
            ..ScheduleConfig::default()
        };
        assert!(ddim_sample(&zero, &c, (h, w), &bad, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn step_is_linear(
            x1 in -5.0f64..5.0, e1 in -5.0f64..5.0,
            x2 in -5.0f64..5.0, e2 in -5.0f64..5.0,
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            t in 1usize..100,
        ) {
            let s = make_schedule(100, 1e-4, 0.02).unwrap();
            let (ab_t, ab_p) = (s.alpha_bar()[t], s.alpha_bar()[t / 2]);
            let f = |x, e| ddim_update(x, e, ab_t, ab_p).1;
            let lhs = f(a * x1 + b * x2, a * e1 + b * e2);
            let rhs = a * f(x1, e1) + b * f(x2, e2);
            proptest::prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
