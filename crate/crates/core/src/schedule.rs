//! Exploration schedules: fixed, geometric, and the two theoretical forms
//! driven by the current (or estimated) weight error e_t.
//!
//! The theoretical schedules evaluate
//!
//!   eps_t = c_eps * kappa*sqrt(N) * e_t / ((1 - C) * |A| * R_max) - C / (1 - C)
//!
//! where C is a fixed shift bound (or an optional per-step value) and the
//! calibration knob kappa stands in for the hidden constant in front of
//! sqrt(N). The oracle form takes the measured e_t; the estimated form
//! substitutes (gamma + c_eps (1 - gamma))^t * e_0. Raw values are clamped
//! into [eps_min, eps_max], which itself sits inside [0, 1]; the formula
//! legitimately goes negative once e_t is small, so negative values clamp
//! rather than error.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Fixed,
    Geometric,
    TheoreticalOracle,
    TheoreticalEstimated,
}

/// Raw schedule parameters as they appear in configuration files. The
/// runtime schedule is materialized once instance quantities (gamma, |A|,
/// R_max, N, e_0, measured C_0) are known.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub eps0: f64,
    pub decay: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    pub c_eps: f64,
    /// Calibration constant multiplying sqrt(N); defaults to 1/sqrt(d).
    pub kappa: Option<f64>,
    /// Fixed shift bound; defaults to the measured C_0 of the initial
    /// greedy policy.
    pub c_max: Option<f64>,
    /// Use the measured per-step C_t instead of the fixed bound in the
    /// oracle formula.
    pub use_per_t_c: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Geometric,
            eps0: 1.0,
            decay: 0.9,
            eps_min: 0.0,
            eps_max: 1.0,
            c_eps: 0.15,
            kappa: None,
            c_max: None,
            use_per_t_c: false,
        }
    }
}

/// Materialized schedule; immutable once built.
#[derive(Debug, Clone)]
pub struct EpsilonSchedule {
    kind: ScheduleKind,
    eps0: f64,
    decay: f64,
    eps_min: f64,
    eps_max: f64,
    c_eps: f64,
    kappa_sqrt_n: f64,
    c_max: f64,
    /// |A| * R_max of the instance.
    action_reward: f64,
    gamma: f64,
    e0: f64,
}

impl EpsilonSchedule {
    pub fn fixed(eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Parameter(format!("fixed epsilon {eps} outside [0,1]")));
        }
        Ok(Self::bare(ScheduleKind::Fixed, eps, 1.0, 0.0, 1.0))
    }

    pub fn geometric(eps0: f64, decay: f64, eps_min: f64, eps_max: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Parameter(format!(
                "geometric decay {decay} outside [0,1]; schedule must be nonincreasing"
            )));
        }
        check_band(eps_min, eps_max)?;
        Ok(Self::bare(ScheduleKind::Geometric, eps0, decay, eps_min, eps_max))
    }

    fn bare(kind: ScheduleKind, eps0: f64, decay: f64, eps_min: f64, eps_max: f64) -> Self {
        EpsilonSchedule {
            kind,
            eps0,
            decay,
            eps_min,
            eps_max,
            c_eps: 0.0,
            kappa_sqrt_n: 0.0,
            c_max: 0.0,
            action_reward: 1.0,
            gamma: 0.5,
            e0: 0.0,
        }
    }

    /// Theoretical schedule (oracle or estimated form).
    #[allow(clippy::too_many_arguments)]
    pub fn theoretical(
        kind: ScheduleKind,
        c_eps: f64,
        kappa_sqrt_n: f64,
        c_max: f64,
        gamma: f64,
        num_actions: usize,
        r_max: f64,
        e0: f64,
        eps_min: f64,
        eps_max: f64,
    ) -> Result<Self> {
        match kind {
            ScheduleKind::TheoreticalOracle | ScheduleKind::TheoreticalEstimated => {}
            _ => return Err(Error::Parameter("theoretical constructor with plain kind".into())),
        }
        let cap = (1.0 - gamma) * (1.0 - gamma);
        if !(c_eps > 0.0 && c_eps <= cap) {
            return Err(Error::Parameter(format!(
                "c_eps {c_eps} outside (0, (1-gamma)^2] = (0, {cap}]"
            )));
        }
        if !(0.0..1.0).contains(&c_max) {
            return Err(Error::Parameter(format!("C_max {c_max} outside [0, 1)")));
        }
        if !(kappa_sqrt_n > 0.0) {
            return Err(Error::Parameter(format!("kappa*sqrt(N) must be positive, got {kappa_sqrt_n}")));
        }
        let action_reward = num_actions as f64 * r_max;
        if !(action_reward > 0.0) {
            return Err(Error::Parameter(
                "theoretical schedule needs |A| * R_max > 0 (degenerate zero-reward instance)".into(),
            ));
        }
        check_band(eps_min, eps_max)?;
        Ok(EpsilonSchedule {
            kind,
            eps0: 1.0,
            decay: 1.0,
            eps_min,
            eps_max,
            c_eps,
            kappa_sqrt_n,
            c_max,
            action_reward,
            gamma,
            e0,
        })
    }

    /// Builds the runtime schedule from raw configuration plus instance
    /// quantities. `measured_c0` feeds the C_max default.
    #[allow(clippy::too_many_arguments)]
    pub fn materialize(
        cfg: &ScheduleConfig,
        gamma: f64,
        num_actions: usize,
        r_max: f64,
        buffer_size: usize,
        feature_dim: usize,
        e0: f64,
        measured_c0: f64,
    ) -> Result<Self> {
        match cfg.kind {
            ScheduleKind::Fixed => Self::fixed(cfg.eps0),
            ScheduleKind::Geometric => Self::geometric(cfg.eps0, cfg.decay, cfg.eps_min, cfg.eps_max),
            kind => {
                let kappa = cfg.kappa.unwrap_or(1.0 / (feature_dim as f64).sqrt());
                let kappa_sqrt_n = kappa * (buffer_size as f64).sqrt();
                let c_max = cfg.c_max.unwrap_or(measured_c0);
                Self::theoretical(
                    kind,
                    cfg.c_eps,
                    kappa_sqrt_n,
                    c_max,
                    gamma,
                    num_actions,
                    r_max,
                    e0,
                    cfg.eps_min,
                    cfg.eps_max,
                )
            }
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn c_eps(&self) -> f64 {
        self.c_eps
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    /// Exploration probability at outer loop `t`.
    ///
    /// The oracle form requires the measured `e_t`; the estimated form
    /// ignores it. `c_t` optionally replaces the fixed C_max for this step.
    pub fn epsilon_at(&self, t: usize, e_t: Option<f64>, c_t: Option<f64>) -> Result<f64> {
        let raw = match self.kind {
            ScheduleKind::Fixed => self.eps0,
            ScheduleKind::Geometric => self.eps0 * self.decay.powi(t as i32),
            ScheduleKind::TheoreticalOracle => {
                let e = e_t.ok_or_else(|| {
                    Error::Parameter("oracle schedule requires the current e_t".into())
                })?;
                self.theoretical_raw(e, c_t)
            }
            ScheduleKind::TheoreticalEstimated => {
                let rate = self.gamma + self.c_eps * (1.0 - self.gamma);
                let e = rate.powi(t as i32) * self.e0;
                self.theoretical_raw(e, c_t)
            }
        };
        Ok(clamp01(raw.clamp(self.eps_min, self.eps_max)))
    }

    fn theoretical_raw(&self, e_t: f64, c_t: Option<f64>) -> f64 {
        let c = c_t.unwrap_or(self.c_max).clamp(0.0, 1.0 - 1e-12);
        self.c_eps * self.kappa_sqrt_n * e_t / ((1.0 - c) * self.action_reward) - c / (1.0 - c)
    }
}

fn check_band(eps_min: f64, eps_max: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps_min) || !(0.0..=1.0).contains(&eps_max) || eps_min > eps_max {
        return Err(Error::Parameter(format!(
            "epsilon band [{eps_min}, {eps_max}] must sit inside [0,1]"
        )));
    }
    Ok(())
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Admissible exploration band at error level `e_t`:
/// lower = 1 - kappa*sqrt(N) * (1 - e_t), keeping a usable initialization
/// region; upper = (1-gamma)^2 * kappa*sqrt(N) * e_t / ((1-C_t)|A|R_max)
/// - C_t/(1-C_t), keeping the error shrinking. Both are clamped to [0, 1].
pub fn epsilon_bounds(
    kappa_sqrt_n: f64,
    e_t: f64,
    gamma: f64,
    c_t: f64,
    num_actions: usize,
    r_max: f64,
) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&c_t) {
        return Err(Error::Parameter(format!("C_t {c_t} outside [0, 1)")));
    }
    let lower = 1.0 - kappa_sqrt_n * (1.0 - e_t);
    let upper = (1.0 - gamma) * (1.0 - gamma) * kappa_sqrt_n * e_t
        / ((1.0 - c_t) * num_actions as f64 * r_max)
        - c_t / (1.0 - c_t);
    Ok((lower.clamp(0.0, 1.0), upper.clamp(0.0, 1.0)))
}
