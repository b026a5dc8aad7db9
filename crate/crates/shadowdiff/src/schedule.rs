//! Noise schedule (alpha-bar) and shadow-residual schedule (beta-bar), plus
//! strided timestep subsequences for interval sampling.
//!
//! All schedule arithmetic is done in f64; callers narrow at the network
//! boundary.

use crate::error::{Error, Result};

/// Precomputed coefficient tables for `t = 0..=t_max`.
///
/// `alpha_bar[0] = 1` and `beta_bar[0] = 0` exactly; `beta_bar[t_max] = 1`
/// exactly. The network is never evaluated at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    t_max: usize,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
    beta_min: f64,
    beta_max: f64,
}

/// Cumulative noise coefficients of a linear-beta schedule: per-step noise
/// rate interpolated from `beta_min` to `beta_max`, alpha_bar as the running
/// product of `(1 - rate)` with `alpha_bar[0] = 1`.
pub fn build_noise_schedule(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Vec<f64>> {
    if t_max < 1 {
        return Err(Error::InvalidArgument("t_max must be >= 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for t in 1..=t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            (t - 1) as f64 / (t_max - 1) as f64
        };
        let rate = beta_min + (beta_max - beta_min) * frac;
        acc *= 1.0 - rate;
        alpha_bar.push(acc);
    }
    Ok(alpha_bar)
}

/// Cumulative residual coefficients: linear from 0 at t=0 to 1 at t=t_max,
/// `beta_bar[t] = t / t_max` exactly at integer grid points.
pub fn build_residual_schedule(t_max: usize) -> Result<Vec<f64>> {
    if t_max < 1 {
        return Err(Error::InvalidArgument("t_max must be >= 1".into()));
    }
    Ok((0..=t_max).map(|t| t as f64 / t_max as f64).collect())
}

impl ScheduleTable {
    pub const DEFAULT_BETA_MIN: f64 = 1e-4;
    pub const DEFAULT_BETA_MAX: f64 = 0.02;

    pub fn build(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        let alpha_bar = build_noise_schedule(t_max, beta_min, beta_max)?;
        let beta_bar = build_residual_schedule(t_max)?;
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            t_max,
            alpha_bar,
            beta_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
            beta_min,
            beta_max,
        })
    }

    pub fn with_defaults(t_max: usize) -> Result<Self> {
        Self::build(t_max, Self::DEFAULT_BETA_MIN, Self::DEFAULT_BETA_MAX)
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alpha_bar[t]
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_one_minus_alpha_bar[t]
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_bar_table(&self) -> &[f64] {
        &self.beta_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::InvalidArgument(format!(
                "t={} out of range 0..={}",
                t, self.t_max
            )));
        }
        Ok(())
    }
}

/// Strictly increasing timesteps tau_1 < ... < tau_S with tau_S = t_max and
/// tau_1 >= 1, for interval sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepSubsequence {
    steps: Vec<usize>,
}

impl TimestepSubsequence {
    pub fn make_strided(t_max: usize, n_steps: usize) -> Result<Self> {
        if n_steps < 1 || n_steps > t_max {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= n_steps <= t_max, got n_steps={n_steps}, t_max={t_max}"
            )));
        }
        let mut steps: Vec<usize> = (1..=n_steps)
            .map(|k| {
                let v = (t_max as f64 * k as f64 / n_steps as f64).round() as usize;
                v.clamp(1, t_max)
            })
            .collect();
        steps.dedup();
        debug_assert_eq!(*steps.last().unwrap(), t_max);
        Ok(Self { steps })
    }

    pub fn from_steps(steps: Vec<usize>, t_max: usize) -> Result<Self> {
        if steps.is_empty() || *steps.last().unwrap() != t_max {
            return Err(Error::InvalidArgument(
                "subsequence must be non-empty and end at t_max".into(),
            ));
        }
        if steps[0] < 1 || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "subsequence must be strictly increasing within [1, t_max]".into(),
            ));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}
