//! Line straightness, landmark shape similarity and the frequency-domain
//! stability score.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::TrajectorySeries;

/// Ordered points along one annotated line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSample {
    points: Vec<(f64, f64)>,
}

impl LineSample {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Input(format!(
                "a line needs at least 3 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::Input("line points must be finite".into()));
        }
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("consecutive line points must be distinct".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// Unit vector along the dominant axis of the centred points.
fn principal_axis(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.0 - mx, p.1 - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let phi = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    (phi.cos(), phi.sin())
}

fn line_score(line: &LineSample) -> f64 {
    let axis = principal_axis(&line.points);
    let segs = &line.points;
    let total: f64 = segs
        .windows(2)
        .map(|w| {
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            (dx * axis.0 + dy * axis.1).abs() / dx.hypot(dy)
        })
        .sum();
    100.0 * total / (segs.len() - 1) as f64
}

/// Mean over lines of the mean `|cos|` between each segment and the line's
/// principal axis, times 100.
pub fn line_acc(lines: &[LineSample]) -> Result<f64> {
    if lines.is_empty() {
        return Err(Error::Input("line_acc needs at least one line".into()));
    }
    Ok(lines.iter().map(line_score).sum::<f64>() / lines.len() as f64)
}

fn centered_flat(points: &[(f64, f64)]) -> Vec<f64> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    points.iter().flat_map(|p| [p.0 - mx, p.1 - my]).collect()
}

/// Cosine similarity of the centred landmark vectors, times 100, clamped to
/// `[0, 100]`.
pub fn shape_acc(reference: &[(f64, f64)], corrected: &[(f64, f64)]) -> Result<f64> {
    if reference.len() != corrected.len() {
        return Err(Error::Input(format!(
            "landmark counts differ: {} vs {}",
            reference.len(),
            corrected.len()
        )));
    }
    if reference.len() < 3 {
        return Err(Error::Input("shape_acc needs at least 3 landmarks".into()));
    }
    let a = centered_flat(reference);
    let b = centered_flat(corrected);
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !(na.is_finite() && nb.is_finite()) {
        return Err(Error::Input("degenerate landmark set".into()));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok((100.0 * dot / (na * nb)).clamp(0.0, 100.0))
}

/// Inclusive range of DFT bins counted as low frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityBand {
    pub low: usize,
    pub high: usize,
}

impl Default for StabilityBand {
    fn default() -> Self {
        Self { low: 2, high: 6 }
    }
}

impl StabilityBand {
    pub fn validate(&self) -> Result<()> {
        if self.low == 0 || self.high < self.low {
            return Err(Error::Input(format!(
                "stability band must satisfy 1 <= low <= high, got {}..{}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

pub const MIN_STABILITY_FRAMES: usize = 8;
const ZERO_ENERGY: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub avg: f64,
    pub translational: f64,
    pub rotational: f64,
}

/// `|X_k|^2` for bins `0..=N/2`.
pub fn power_spectrum(series: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = series.iter().map(|v| Complex::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[..=series.len() / 2].iter().map(|c| c.norm_sqr()).collect()
}

/// Share of the energy in bins `band.low..=N/2` that falls in
/// `band.low..=band.high`. A series with no such energy scores 1.
pub fn band_score(series: &[f64], band: StabilityBand) -> Result<f64> {
    band.validate()?;
    if series.len() < MIN_STABILITY_FRAMES {
        return Err(Error::Length(format!(
            "stability needs at least {MIN_STABILITY_FRAMES} frames, got {}",
            series.len()
        )));
    }
    let spec = power_spectrum(series);
    let top = spec.len() - 1;
    let total: f64 = spec.iter().skip(band.low).sum();
    if total < ZERO_ENERGY {
        return Ok(1.0);
    }
    let low: f64 = spec
        .iter()
        .enumerate()
        .filter(|(k, _)| *k >= band.low && *k <= band.high.min(top))
        .map(|(_, e)| e)
        .sum();
    Ok((low / total).clamp(0.0, 1.0))
}

/// Per-frame `(sqrt(tx^2 + ty^2), theta)` from the similarity fit of `R(t)`.
pub fn motion_series(trajectory: &TrajectorySeries) -> (Vec<f64>, Vec<f64>) {
    trajectory
        .similarity_series()
        .iter()
        .map(|s| (s.tx.hypot(s.ty), s.theta))
        .unzip()
}

pub fn stability_from_series(translation: &[f64], rotation: &[f64], band: StabilityBand) -> Result<StabilityReport> {
    if translation.len() != rotation.len() {
        return Err(Error::Length("translation and rotation series differ in length".into()));
    }
    let translational = band_score(translation, band)?;
    let rotational = band_score(rotation, band)?;
    Ok(StabilityReport {
        avg: 0.5 * (translational + rotational),
        translational,
        rotational,
    })
}

pub fn stability_score(trajectory: &TrajectorySeries, band: StabilityBand) -> Result<StabilityReport> {
    if trajectory.len() < MIN_STABILITY_FRAMES {
        return Err(Error::Length(format!(
            "stability needs at least {MIN_STABILITY_FRAMES} frames, got {}",
            trajectory.len()
        )));
    }
    let (t, r) = motion_series(trajectory);
    stability_from_series(&t, &r, band)
}

/// CSV with header `bin,translational,rotational`.
pub fn spectrum_csv(translation: &[f64], rotation: &[f64]) -> String {
    let a = power_spectrum(translation);
    let b = power_spectrum(rotation);
    let mut out = String::from("bin,translational,rotational\n");
    for (k, (x, y)) in a.iter().zip(&b).enumerate() {
        out.push_str(&format!("{k},{x:.9e},{y:.9e}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub line_acc: Option<f64>,
    pub shape_acc: Option<f64>,
    pub stability: Option<StabilityReport>,
    /// Where the inputs came from: run directory, seed, config hash, ...
    pub provenance: BTreeMap<String, String>,
}

pub fn report(
    line_acc: Option<f64>,
    shape_acc: Option<f64>,
    stability: Option<StabilityReport>,
    provenance: BTreeMap<String, String>,
) -> MetricReport {
    MetricReport {
        line_acc,
        shape_acc,
        stability,
        provenance,
    }
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are plain data") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VectorField;
    use crate::trajectory::accumulate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn line(points: &[(f64, f64)]) -> LineSample {
        LineSample::new(points.to_vec()).unwrap()
    }

    #[test]
    fn line_examples() {
        let straight = line(&[(0.0, 0.0), (1.0, 0.5), (3.0, 1.5), (4.0, 2.0)]);
        assert!((line_acc(&[straight]).unwrap() - 100.0).abs() < 1e-12);

        let zig: Vec<(f64, f64)> = (0..9).map(|k| (((k + 1) / 2) as f64, (k / 2) as f64)).collect();
        let score = line_acc(&[line(&zig)]).unwrap();
        assert!((score - 100.0 / 2f64.sqrt()).abs() < 1e-9, "{score}");
        assert!((score - 70.71).abs() < 0.01);

        assert!(LineSample::new(vec![(0.0, 0.0), (1.0, 0.0)]).is_err());
        assert!(LineSample::new(vec![(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)]).is_err());
        assert!(line_acc(&[]).is_err());
    }

    /// Principal axis found by searching the angle that maximises the sum of
    /// squared projections, then the segment score evaluated directly.
    fn brute_line(points: &[(f64, f64)]) -> f64 {
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let spread = |a: f64| -> f64 {
            points
                .iter()
                .map(|p| ((p.0 - mx) * a.cos() + (p.1 - my) * a.sin()).powi(2))
                .sum()
        };
        let mut best = 0.0;
        for k in 0..18000 {
            let a = PI * k as f64 / 18000.0;
            if spread(a) > spread(best) {
                best = a;
            }
        }
        let (mut lo, mut hi) = (best - PI / 18000.0, best + PI / 18000.0);
        for _ in 0..100 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if spread(m1) < spread(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        let a = 0.5 * (lo + hi);
        let mut acc = 0.0;
        for i in 1..points.len() {
            let dx = points[i].0 - points[i - 1].0;
            let dy = points[i].1 - points[i - 1].1;
            let ang = dy.atan2(dx) - a;
            acc += ang.cos().abs();
        }
        100.0 * acc / (points.len() - 1) as f64
    }

    #[test]
    fn semicircle_matches_brute_force() {
        let pts: Vec<(f64, f64)> = (0..=18)
            .map(|k| {
                let a = (10.0 * k as f64).to_radians();
                (50.0 + 20.0 * a.cos(), 40.0 + 20.0 * a.sin())
            })
            .collect();
        let got = line_acc(&[line(&pts)]).unwrap();
        let want = brute_line(&pts);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!(got < 100.0 && got > 0.0);
    }

    #[test]
    fn line_acc_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(f64, f64)> = (0..12)
            .map(|k| {
                (
                    k as f64 * 3.0 + rng.random_range(-1.0..1.0),
                    k as f64 + rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let base = line_acc(&[line(&pts)]).unwrap();
        for (angle, scale) in [(0.3, 1.0), (1.9, 2.5), (-2.2, 0.1)] {
            let (s, c) = f64::sin_cos(angle);
            let moved: Vec<(f64, f64)> = pts
                .iter()
                .map(|p| (scale * (c * p.0 - s * p.1) + 7.0, scale * (s * p.0 + c * p.1) - 3.0))
                .collect();
            assert!((line_acc(&[line(&moved)]).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_examples() {
        let reference = vec![(0.0, 0.0), (4.0, 1.0), (2.0, 5.0), (-1.0, 3.0)];
        assert!((shape_acc(&reference, &reference).unwrap() - 100.0).abs() < 1e-12);
        let scaled: Vec<(f64, f64)> = reference
            .iter()
            .map(|p| (1.25 + 3.0 * (p.0 - 1.25), 2.25 + 3.0 * (p.1 - 2.25)))
            .collect();
        assert!((shape_acc(&reference, &scaled).unwrap() - 100.0).abs() < 1e-12);

        let cy = 2.25;
        let reflected: Vec<(f64, f64)> = reference.iter().map(|p| (p.0, 2.0 * cy - p.1)).collect();
        // direct evaluation: centred x parts agree, centred y parts flip sign
        let xs = [-1.25, 2.75, 0.75, -2.25];
        let ys = [-2.25, -1.25, 2.75, 0.75];
        let sx: f64 = xs.iter().map(|v| v * v).sum();
        let sy: f64 = ys.iter().map(|v| v * v).sum();
        let want = (100.0 * (sx - sy) / (sx + sy)).clamp(0.0, 100.0);
        let got = shape_acc(&reference, &reflected).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(got < 100.0);

        assert!(shape_acc(&reference, &reference[..3]).is_err());
        assert!(shape_acc(&[(1.0, 1.0); 4], &reference).is_err());
    }

    fn translation_trajectory(tx: &[f64]) -> TrajectorySeries {
        let mut prev = 0.0;
        let residuals = tx
            .iter()
            .map(|&x| {
                let r = VectorField::constant(6, 6, x - prev, 0.0).unwrap();
                prev = x;
                r
            })
            .collect();
        accumulate(residuals).unwrap()
    }

    #[test]
    fn stability_anchors() {
        let band = StabilityBand::default();
        let zero = translation_trajectory(&[0.0; 16]);
        let r = stability_score(&zero, band).unwrap();
        assert_eq!((r.avg, r.translational, r.rotational), (1.0, 1.0, 1.0));

        let n = 64;
        let raised: Vec<f64> = (0..n)
            .map(|t| 1.0 - (2.0 * PI * 2.0 * t as f64 / n as f64).cos())
            .collect();
        let traj = translation_trajectory(&raised);
        let r = stability_score(&traj, band).unwrap();
        assert!((r.translational - 1.0).abs() < 1e-9, "{}", r.translational);

        let alt: Vec<f64> = (0..n).map(|t| if t % 2 == 0 { 0.0 } else { 2.0 }).collect();
        let r = stability_score(&translation_trajectory(&alt), band).unwrap();
        assert!(r.translational < 1e-9, "{}", r.translational);

        assert!(matches!(
            stability_score(&translation_trajectory(&[0.0; 7]), band),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn stability_drops_with_noise() {
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.0, 0.05, 0.1, 0.2, 0.4] {
            let series: Vec<f64> = (0..n)
                .map(|t| 3.0 - 2.0 * (2.0 * PI * 3.0 * t as f64 / n as f64).cos() + amp * noise[t])
                .collect();
            let score = stability_from_series(&series, &vec![0.0; n], StabilityBand::default())
                .unwrap()
                .translational;
            assert!(score <= last + 1e-12, "amp {amp}: {score} > {last}");
            last = score;
        }
        assert!(last < 0.99);
    }

    #[test]
    fn spectrum_and_report() {
        let spec = power_spectrum(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(spec.len(), 3);
        assert!((spec[0] - 16.0).abs() < 1e-12 && spec[1].abs() < 1e-12);
        let csv = spectrum_csv(&[0.0; 8], &[0.0; 8]);
        assert!(csv.starts_with("bin,translational,rotational\n"));
        assert_eq!(csv.lines().count(), 6);

        let mut prov = BTreeMap::new();
        prov.insert("seed".to_string(), "7".to_string());
        let rep = report(
            Some(90.0),
            None,
            Some(StabilityReport {
                avg: 1.0,
                translational: 1.0,
                rotational: 1.0,
            }),
            prov,
        );
        let back: MetricReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
        assert!(StabilityBand { low: 3, high: 2 }.validate().is_err());
    }
}
