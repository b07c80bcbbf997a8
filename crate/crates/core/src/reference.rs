//! Target sequences `r_1, ..., r_T`.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    targets: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormReport {
    pub max_norm: f64,
    /// Number of targets with `||r_t|| > 1`.
    pub above_unit: usize,
}

impl ReferenceTrajectory {
    pub fn new(targets: Vec<DVector<f64>>) -> Result<Self> {
        let first = targets
            .first()
            .ok_or_else(|| Error::InvalidInput("reference must have at least one target".into()))?;
        let n = first.len();
        for (t, r) in targets.iter().enumerate() {
            if r.len() != n {
                return Err(Error::dim("reference target", n, r.len()));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite target at t={}", t + 1)));
            }
        }
        Ok(Self { targets })
    }

    pub fn horizon(&self) -> usize {
        self.targets.len()
    }

    pub fn dim(&self) -> usize {
        self.targets[0].len()
    }

    /// Zero-based access: `get(0)` is `r_1`.
    pub fn get(&self, k: usize) -> &DVector<f64> {
        &self.targets[k]
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }

    /// Targets `k..k+len` clipped to the horizon.
    pub fn window(&self, k: usize, len: usize) -> &[DVector<f64>] {
        let end = (k + len).min(self.targets.len());
        &self.targets[k.min(end)..end]
    }

    pub fn norm_report(&self) -> NormReport {
        let norms = self.targets.iter().map(|r| r.norm());
        NormReport {
            max_norm: norms.clone().fold(0.0, f64::max),
            above_unit: norms.filter(|&n| n > 1.0).count(),
        }
    }

    /// Copy with the targets from zero-based index `k` on replaced.
    pub fn with_tail_replaced(&self, k: usize, f: impl Fn(usize) -> DVector<f64>) -> Result<Self> {
        let mut targets = self.targets.clone();
        for (j, r) in targets.iter_mut().enumerate().skip(k) {
            *r = f(j);
        }
        Self::new(targets)
    }
}

/// `r_t = amplitude * sin(2 pi t / period)` on one channel and zero elsewhere,
/// for `t = 1..=horizon`.
pub fn sine(n_z: usize, channel: usize, amplitude: f64, period: f64, horizon: usize) -> Result<ReferenceTrajectory> {
    if channel >= n_z {
        return Err(Error::IndexOutOfRange(format!("channel {channel} for n_z = {n_z}")));
    }
    if !(period > 0.0) {
        return Err(Error::InvalidInput("sine period must be positive".into()));
    }
    let targets = (1..=horizon)
        .map(|t| {
            let mut r = DVector::zeros(n_z);
            r[channel] = amplitude * (2.0 * PI * t as f64 / period).sin();
            r
        })
        .collect();
    ReferenceTrajectory::new(targets)
}

/// Heart curve position at parameter `s`.
pub fn heart_point(s: f64) -> (f64, f64) {
    let x = 16.0 * (s - 6.0).sin().powi(3);
    let y = 13.0 * s.cos() - 5.0 * (2.0 * s - 12.0).cos() - 2.0 * (3.0 * s - 18.0).cos() - (4.0 * s - 24.0).cos();
    (x, y)
}

/// Heart-shaped pose reference `(x, y, heading)` sampled at
/// `s_k = 2 pi k / steps_per_cycle` for `k = 0..cycles * steps_per_cycle`.
///
/// The heading is the four-quadrant angle of the forward difference, unwrapped
/// so consecutive headings differ by less than pi.
pub fn heart(cycles: usize, steps_per_cycle: usize) -> Result<ReferenceTrajectory> {
    if cycles == 0 || steps_per_cycle < 2 {
        return Err(Error::InvalidInput("heart reference needs cycles >= 1 and steps_per_cycle >= 2".into()));
    }
    let n = cycles * steps_per_cycle;
    let ds = 2.0 * PI / steps_per_cycle as f64;
    let pts: Vec<(f64, f64)> = (0..=n).map(|k| heart_point(k as f64 * ds)).collect();
    let mut targets = Vec::with_capacity(n);
    let mut prev: Option<f64> = None;
    for k in 0..n {
        let (x0, y0) = pts[k];
        let (x1, y1) = pts[k + 1];
        let raw = (y1 - y0).atan2(x1 - x0);
        let heading = match prev {
            None => raw,
            Some(p) => p + wrap_pi(raw - p),
        };
        prev = Some(heading);
        targets.push(DVector::from_vec(vec![x0, y0, heading]));
    }
    ReferenceTrajectory::new(targets)
}

/// Wrap to `[-pi, pi)`.
pub fn wrap_pi(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Arc length of one heart cycle, by fine polyline.
pub fn heart_perimeter() -> f64 {
    let n = 100_000;
    let ds = 2.0 * PI / n as f64;
    (0..n)
        .map(|k| {
            let (x0, y0) = heart_point(k as f64 * ds);
            let (x1, y1) = heart_point((k + 1) as f64 * ds);
            (x1 - x0).hypot(y1 - y0)
        })
        .sum()
}
