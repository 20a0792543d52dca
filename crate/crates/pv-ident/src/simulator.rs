//! Plant simulation: ripple input generation and fixed-step integration of
//! the capacitor-voltage ODE.
//!
//! The converter is abstracted into its imposed current, a dc value with a
//! small sinusoidal ripple whose first and second derivatives are known in
//! closed form. The plant itself is integrated with a classic 4th-order
//! one-step method at a fixed step chosen well below the local time
//! constant (about 2 us near the catalog operating points), so no implicit
//! solver is needed.

use crate::error::{PvError, Result};
use crate::model::{plant_output, plant_rhs, EtaParams, OperatingMode};

/// Sinusoidal converter current: u(t) = mean * (1 + f sin(2 pi freq t)).
#[derive(Debug, Clone, Copy)]
pub struct RippleInput {
    /// Mean current, A.
    pub mean: f64,
    /// Relative ripple amplitude (0.05 in the scenarios).
    pub ripple_fraction: f64,
    /// Ripple frequency, Hz.
    pub frequency: f64,
}

impl RippleInput {
    pub fn new(mean: f64, ripple_fraction: f64, frequency: f64) -> Self {
        RippleInput {
            mean,
            ripple_fraction,
            frequency,
        }
    }

    /// Scenario ripple for a catalog mode: 5% at 20 kHz around the mode's
    /// mean current.
    pub fn for_mode(mode: &OperatingMode) -> Self {
        RippleInput::new(mode.mean_current, 0.05, 20e3)
    }

    pub fn is_valid(&self) -> bool {
        self.mean > 0.0
            && (0.0..1.0).contains(&self.ripple_fraction)
            && self.frequency > 0.0
    }
}

/// u, udot, uddot at time t (exact analytic forms).
pub fn input_at(t: f64, r: &RippleInput) -> (f64, f64, f64) {
    let omega = 2.0 * std::f64::consts::PI * r.frequency;
    let (s, c) = (omega * t).sin_cos();
    let u = r.mean * (1.0 + r.ripple_fraction * s);
    let u_dot = r.mean * r.ripple_fraction * omega * c;
    let u_ddot = -r.mean * r.ripple_fraction * omega * omega * s;
    (u, u_dot, u_ddot)
}

/// Initial plant state: either an explicit capacitor voltage or the steady
/// state associated with the mean current.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum InitialState {
    SteadyState,
    Voltage(f64),
}

/// Fixed-step simulation setup.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Integration step, s.
    pub step: f64,
    /// Total simulated time, s.
    pub duration: f64,
    pub initial_state: InitialState,
    /// (switch time, mode label); times strictly increasing starting at 0.
    pub mode_schedule: Vec<(f64, String)>,
    /// Keep every n-th record when collecting trajectories.
    pub decimation: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(PvError::Config(format!("step must be > 0, got {}", self.step)));
        }
        if self.duration < self.step {
            return Err(PvError::Config(format!(
                "duration {} shorter than one step {}",
                self.duration, self.step
            )));
        }
        if self.decimation == 0 {
            return Err(PvError::Config("decimation must be >= 1".into()));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, (t, label)) in self.mode_schedule.iter().enumerate() {
            if i == 0 && *t != 0.0 {
                return Err(PvError::Config("mode schedule must start at t = 0".into()));
            }
            if *t <= prev {
                return Err(PvError::Config("mode schedule times must be strictly increasing".into()));
            }
            if crate::model::mode_by_label(label).is_none() {
                return Err(PvError::Config(format!("unknown mode label '{label}'")));
            }
            prev = *t;
        }
        Ok(())
    }
}

/// One sampled step of the simulation. `x_true` is ground truth retained
/// for diagnostics; the estimator side only ever sees `Measurables`.
#[derive(Debug, Clone, Copy)]
pub struct SampleRecord {
    pub t: f64,
    pub u: f64,
    pub u_dot: f64,
    pub u_ddot: f64,
    pub y: f64,
    pub x_true: f64,
}

/// The signals the identification pipeline is allowed to read.
#[derive(Debug, Clone, Copy)]
pub struct Measurables {
    pub t: f64,
    pub u: f64,
    pub u_dot: f64,
    pub u_ddot: f64,
    pub y: f64,
}

impl SampleRecord {
    pub fn measurables(&self) -> Measurables {
        Measurables {
            t: self.t,
            u: self.u,
            u_dot: self.u_dot,
            u_ddot: self.u_ddot,
            y: self.y,
        }
    }
}

/// Unique root of the state equation for a constant input, by bisection on
/// [-5/b, 60/b]. The rhs is strictly decreasing in x, so a sign change
/// brackets exactly one root.
pub fn steady_state_voltage(eta: &EtaParams, b: f64, u_const: f64) -> Result<f64> {
    let mut lo = -5.0 / b;
    let mut hi = 60.0 / b;
    let f_lo = plant_rhs(lo, u_const, eta, b)?;
    let f_hi = plant_rhs(hi, u_const, eta, b)?;
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(PvError::BracketFailure { lo, hi });
    }
    // iterate to the bracket's floating-point limit; this is far inside the
    // |rhs| <= 1e-9 * max(eta3, eta4 u) tolerance and keeps equilibrium
    // starts drift-free at the 1e-9 V level
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = plant_rhs(mid, u_const, eta, b)?;
        if f_mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// The plant as a steppable state machine. Parameters can be swapped
/// between steps (mode switching) while the state stays continuous.
#[derive(Debug, Clone)]
pub struct PlantSim {
    pub eta: EtaParams,
    pub b: f64,
    pub x: f64,
    step: f64,
}

impl PlantSim {
    pub fn new(eta: EtaParams, b: f64, x0: f64, step: f64) -> Self {
        PlantSim { eta, b, x: x0, step }
    }

    /// Swap plant parameters at a mode boundary; the state is untouched.
    pub fn switch_mode(&mut self, eta: EtaParams, b: f64) {
        self.eta = eta;
        self.b = b;
    }

    /// Advance one step from time `t` and return the record at `t + step`.
    pub fn advance(&mut self, t: f64, ripple: &RippleInput) -> Result<SampleRecord> {
        let h = self.step;
        let f = |x: f64, tau: f64| -> Result<f64> {
            let (u, _, _) = input_at(tau, ripple);
            plant_rhs(x, u, &self.eta, self.b)
        };
        let k1 = f(self.x, t)?;
        let k2 = f(self.x + 0.5 * h * k1, t + 0.5 * h)?;
        let k3 = f(self.x + 0.5 * h * k2, t + 0.5 * h)?;
        let k4 = f(self.x + h * k3, t + h)?;
        let dx = h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if dx.abs() > 1.0 {
            return Err(PvError::StepTooLarge {
                context: "plant step moved x by more than 1 V",
                dt: h,
                limit: 1.0,
            });
        }
        self.x += dx;
        let t_next = t + h;
        let (u, u_dot, u_ddot) = input_at(t_next, ripple);
        Ok(SampleRecord {
            t: t_next,
            u,
            u_dot,
            u_ddot,
            y: plant_output(self.x, u, self.eta.eta5),
            x_true: self.x,
        })
    }
}

/// Schedule of mode switches resolved to step indices. Switch times are
/// rounded to the nearest step boundary.
#[derive(Debug, Clone)]
pub struct ResolvedSchedule {
    /// (step index, mode) sorted by index; first entry is index 0.
    pub entries: Vec<(u64, &'static OperatingMode)>,
    /// true when some switch time was more than half a step away from a boundary.
    pub rounding_warning: bool,
}

pub fn resolve_schedule(schedule: &[(f64, String)], step: f64) -> Result<ResolvedSchedule> {
    let mut entries = Vec::with_capacity(schedule.len());
    let mut warning = false;
    for (t, label) in schedule {
        let mode = crate::model::mode_by_label(label)
            .ok_or_else(|| PvError::Config(format!("unknown mode label '{label}'")))?;
        let idx = (t / step).round();
        if (t - idx * step).abs() > 0.5 * step {
            warning = true;
        }
        entries.push((idx as u64, mode));
    }
    Ok(ResolvedSchedule {
        entries,
        rounding_warning: warning,
    })
}

/// Run a full trajectory and collect decimated records. The first record is
/// the initial condition at t = 0.
pub fn integrate_plant(
    config: &SimConfig,
    mode: &OperatingMode,
    ripple: &RippleInput,
) -> Result<Vec<SampleRecord>> {
    config.validate()?;
    let schedule = resolve_schedule(&config.mode_schedule, config.step)?;
    let eta0 = mode.eta();
    let x0 = match config.initial_state {
        InitialState::SteadyState => steady_state_voltage(&eta0, mode.b, ripple.mean)?,
        InitialState::Voltage(v) => v,
    };
    let mut plant = PlantSim::new(eta0, mode.b, x0, config.step);
    let n_steps = (config.duration / config.step).round() as u64;
    let mut records = Vec::with_capacity((n_steps / config.decimation as u64 + 2) as usize);
    let (u, u_dot, u_ddot) = input_at(0.0, ripple);
    records.push(SampleRecord {
        t: 0.0,
        u,
        u_dot,
        u_ddot,
        y: plant_output(x0, u, eta0.eta5),
        x_true: x0,
    });
    let mut active = *ripple;
    for k in 0..n_steps {
        for (idx, m) in &schedule.entries {
            if *idx == k && *idx > 0 {
                plant.switch_mode(m.eta(), m.b);
                active.mean = m.mean_current;
            }
        }
        let t = k as f64 * config.step;
        let rec = plant.advance(t, &active)?;
        if (k + 1) % config.decimation as u64 == 0 {
            records.push(rec);
        }
    }
    Ok(records)
}
