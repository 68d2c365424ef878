use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Automated gradual pruning schedule: a cubic ramp from `initial` to
/// `final_sparsity` over `n_steps` pruning steps spaced `interval` apart,
/// starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgpSchedule {
    pub initial: f64,
    pub final_sparsity: f64,
    pub start: u64,
    pub n_steps: u64,
    pub interval: u64,
}

impl AgpSchedule {
    pub fn new(initial: f64, final_sparsity: f64, start: u64, n_steps: u64, interval: u64) -> Result<Self> {
        if !(0.0 <= initial && initial <= final_sparsity && final_sparsity < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "AGP needs 0 <= s_i <= s_f < 1, got s_i={initial} s_f={final_sparsity}"
            )));
        }
        if n_steps == 0 || interval == 0 {
            return Err(Error::InvalidConfig("AGP needs n_steps >= 1 and interval >= 1".into()));
        }
        Ok(Self { initial, final_sparsity, start, n_steps, interval })
    }

    pub fn end(&self) -> u64 {
        self.start + self.n_steps * self.interval
    }

    /// Whether `t` lies inside `[start, end]`.
    pub fn in_window(&self, t: u64) -> bool {
        (self.start..=self.end()).contains(&t)
    }

    /// Target sparsity at each pruning step `start, start + dt, ..., end`.
    pub fn steps(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        (0..=self.n_steps).map(move |k| {
            let t = self.start + k * self.interval;
            (t, agp_target_sparsity(self, t))
        })
    }
}

/// `s_t = s_f + (s_i - s_f) * (1 - (t - t0) / (n dt))^3`, clamped to
/// `[s_i, s_f]`. Steps before the window return `s_i`; see
/// [`AgpSchedule::in_window`] to detect that case.
pub fn agp_target_sparsity(sched: &AgpSchedule, t: u64) -> f64 {
    if t <= sched.start {
        return sched.initial;
    }
    if t >= sched.end() {
        return sched.final_sparsity;
    }
    let span = (sched.n_steps * sched.interval) as f64;
    let remaining = 1.0 - (t - sched.start) as f64 / span;
    let s = sched.final_sparsity + (sched.initial - sched.final_sparsity) * remaining.powi(3);
    s.clamp(sched.initial, sched.final_sparsity)
}
