//! Noise-level discretization, training step schedule, loss weighting and the
//! boundary-respecting skip/out scalings.

use crate::error::{Error, Result};

/// Noise-level range and shape constants.
///
/// `sigma_min` is the minimal noise level at which the model is the identity,
/// `sigma_max` the level pure noise is drawn at, `rho` the curvature of the
/// discretization, and `sigma_data` the assumed data standard deviation
/// entering the scalings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64, sigma_data: f64) -> Result<Self> {
        let s = NoiseSchedule {
            sigma_min,
            sigma_max,
            rho,
            sigma_data,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Schedule(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho >= 1.0) {
            return Err(Error::Schedule(format!("need rho >= 1, got {}", self.rho)));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Schedule(format!(
                "need sigma_data > 0, got {}",
                self.sigma_data
            )));
        }
        Ok(())
    }

    /// Levels `t_1..t_N`: `t_i = (min^{1/rho} + (i-1)/(N-1) * (max^{1/rho} - min^{1/rho}))^rho`.
    ///
    /// Endpoints are pinned to `sigma_min` / `sigma_max` exactly; the closed
    /// form is required to land within 1e-12 relative of them first.
    pub fn discretize(&self, n: usize) -> Result<Vec<f64>> {
        if n < 2 {
            return Err(Error::Schedule(format!(
                "discretize needs N >= 2, got {n}"
            )));
        }
        let inv_rho = 1.0 / self.rho;
        let lo = self.sigma_min.powf(inv_rho);
        let hi = self.sigma_max.powf(inv_rho);
        let mut levels = Vec::with_capacity(n);
        for i in 0..n {
            let u = i as f64 / (n - 1) as f64;
            levels.push((lo + u * (hi - lo)).powf(self.rho));
        }
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        if rel(levels[0], self.sigma_min) > 1e-12 || rel(levels[n - 1], self.sigma_max) > 1e-12 {
            return Err(Error::Schedule(format!(
                "discretization endpoints {} / {} drifted from {} / {}",
                levels[0],
                levels[n - 1],
                self.sigma_min,
                self.sigma_max
            )));
        }
        levels[0] = self.sigma_min;
        levels[n - 1] = self.sigma_max;
        for w in levels.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Schedule(format!(
                    "levels not strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(levels)
    }

    /// Skip/out blend for the consistency parameterization:
    /// `a_skip(t) = sigma_data^2 / ((t - sigma_min)^2 + sigma_data^2)`,
    /// `a_out(t) = sigma_data * (t - sigma_min) / sqrt(sigma_data^2 + t^2)`.
    ///
    /// At `t = sigma_min` this is exactly `(1, 0)`, which makes the model the
    /// identity at the minimal noise level.
    pub fn scalings(&self, t: f64) -> Result<(f64, f64)> {
        if !(t >= self.sigma_min && t <= self.sigma_max) {
            return Err(Error::Schedule(format!(
                "t = {t} outside [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        let sd2 = self.sigma_data * self.sigma_data;
        let dt = t - self.sigma_min;
        let a_skip = sd2 / (dt * dt + sd2);
        let a_out = self.sigma_data * dt / (sd2 + t * t).sqrt();
        Ok((a_skip, a_out))
    }
}

/// Parameters of the doubling step schedule `M(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepScheduleConfig {
    /// Initial discretization size (number of intervals at k = 0).
    pub s0: u32,
    /// Final discretization size.
    pub s1: u32,
    /// Total training iterations K.
    pub total_iters: u64,
}

impl StepScheduleConfig {
    pub fn new(s0: u32, s1: u32, total_iters: u64) -> Result<Self> {
        let c = StepScheduleConfig {
            s0,
            s1,
            total_iters,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 1 && self.s0 <= self.s1) {
            return Err(Error::Schedule(format!(
                "need 1 < s0 <= s1, got s0 = {}, s1 = {}",
                self.s0, self.s1
            )));
        }
        if self.total_iters < 1 {
            return Err(Error::Schedule("need K >= 1".into()));
        }
        Ok(())
    }

    /// Number of levels at iteration `k`:
    /// `M(k) = min(s0 * 2^floor(k / K'), s1) + 1` with
    /// `K' = floor(K / (log2(s1/s0) + 1))`, so the size doubles on a fixed
    /// cadence and saturates at `s1 + 1`.
    pub fn steps_at(&self, k: u64) -> Result<usize> {
        if k >= self.total_iters {
            return Err(Error::Schedule(format!(
                "iteration {k} out of range [0, {})",
                self.total_iters
            )));
        }
        let doublings = (self.s1 as f64 / self.s0 as f64).log2();
        let k_prime = ((self.total_iters as f64 / (doublings + 1.0)).floor() as u64).max(1);
        let exponent = (k / k_prime).min(63) as u32;
        let size = (self.s0 as u64)
            .saturating_mul(1u64 << exponent)
            .min(self.s1 as u64);
        Ok(size as usize + 1)
    }
}

/// Loss weighting for an adjacent level pair: `1 / (t_{n+1} - t_n)`.
pub fn weighting(t_n: f64, t_np1: f64) -> Result<f64> {
    if !(t_np1 > t_n) {
        return Err(Error::Schedule(format!(
            "weighting needs t_np1 > t_n, got {t_n} and {t_np1}"
        )));
    }
    Ok(1.0 / (t_np1 - t_n))
}
