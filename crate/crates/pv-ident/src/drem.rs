//! Dynamics extension and mixing: turns the vector regression
//! z = Omega' theta into eight scalar regressions and runs independent
//! gradient estimators on the first four.
//!
//! The extension combines a first-order (Kreisselmeier-style) filter of the
//! outer products with a feedforward term:
//!
//!   Phi_f' = -a Phi_f + a Omega Omega',   Y_f' = -a Y_f + a Omega z,
//!   Phi = c Phi_f + d Omega Omega',       Y = c Y_f + d Omega z,
//!
//! so Y(t) = Phi(t) theta holds identically for consistent streams.
//! Multiplying by adj(Phi) scalarizes the regression element-wise:
//! calY_i = Delta theta_i with Delta = det(Phi). Each theta_i then decays
//! as thetatilde_i' = -gamma_i Delta^2 thetatilde_i, so convergence only
//! needs the integral of Delta^2 to diverge.

use nalgebra::{SMatrix, SVector};

use crate::error::{PvError, Result};

pub type Mat8 = SMatrix<f64, 8, 8>;
pub type Vec8 = SVector<f64, 8>;

/// Exact product: a * b = p + e.
#[inline]
fn two_product(a: f64, b: f64) -> (f64, f64) {
    const SPLIT: f64 = 134_217_729.0; // 2^27 + 1
    let p = a * b;
    let aa = a * SPLIT;
    let a_hi = aa - (aa - a);
    let a_lo = a - a_hi;
    let bb = b * SPLIT;
    let b_hi = bb - (bb - b);
    let b_lo = b - b_hi;
    let e = ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo;
    (p, e)
}

/// Exact sum: a + b = s + e.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let a1 = s - b;
    let b1 = s - a1;
    let e = (a - a1) + (b - b1);
    (s, e)
}

/// One compensated scalar of the decay recursion x <- beta x + g.
/// The running compensation keeps the represented value within O(eps^2)
/// of the exact recursion instead of letting per-step rounding random-walk;
/// the mixing stage amplifies any drift between Y_f and Phi_f theta by the
/// conditioning of the excitation geometry, so plain accumulation would
/// leak visibly into the scalar regression targets.
#[inline]
fn decay_step(value: &mut f64, comp: &mut f64, beta: f64, g: f64, g_err: f64) {
    let (p, e1) = two_product(beta, *value);
    let (s, e2) = two_sum(p, g);
    *comp = beta * *comp + (e1 + e2 + g_err);
    *value = s;
}

/// State of the dynamics extension (filtered outer products), accumulated
/// in compensated form.
#[derive(Debug, Clone)]
pub struct ExtensionState {
    pub phi_f: Mat8,
    pub y_f: Vec8,
    phi_f_comp: Mat8,
    y_f_comp: Vec8,
    /// Filter pole a, feedforward mix c, d.
    pub a: f64,
    pub c: f64,
    pub d: f64,
}

impl ExtensionState {
    pub fn new(a: f64, c: f64, d: f64) -> Self {
        ExtensionState {
            phi_f: Mat8::zeros(),
            y_f: Vec8::zeros(),
            phi_f_comp: Mat8::zeros(),
            y_f_comp: Vec8::zeros(),
            a,
            c,
            d,
        }
    }

    /// Advance the filtered states one step (exact scalar-decay hold) and
    /// return the extended pair (Phi, Y).
    pub fn step(&mut self, omega: &Vec8, z: f64, dt: f64) -> Result<(Mat8, Vec8)> {
        let limit = 0.1 / self.a;
        if self.a * dt > 0.1 {
            return Err(PvError::StepTooLarge {
                context: "dynamics extension step",
                dt,
                limit,
            });
        }
        let beta = (-self.a * dt).exp();
        let gain = 1.0 - beta; // exact: beta in [0.5, 1]
        for i in 0..8 {
            for j in 0..8 {
                let (o, o_err) = two_product(omega[i], omega[j]);
                let (g, g_err) = two_product(gain, o);
                decay_step(
                    &mut self.phi_f[(i, j)],
                    &mut self.phi_f_comp[(i, j)],
                    beta,
                    g,
                    gain * o_err + g_err,
                );
            }
            let (o, o_err) = two_product(omega[i], z);
            let (g, g_err) = two_product(gain, o);
            decay_step(
                &mut self.y_f[i],
                &mut self.y_f_comp[i],
                beta,
                g,
                gain * o_err + g_err,
            );
        }
        let outer = omega * omega.transpose();
        let phi = (self.phi_f + self.phi_f_comp) * self.c + outer * self.d;
        let y = (self.y_f + self.y_f_comp) * self.c + omega * (z * self.d);
        Ok((phi, y))
    }
}

/// Result of the mixing step: Delta = det(Phi) and calY = adj(Phi) Y.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub delta: f64,
    pub cal_y: Vec8,
}

/// Diagonal equilibration scale: d_i = sqrt(Phi_ii), with unit fallback
/// for non-positive diagonals. The regressor channels span five orders of
/// magnitude, so factorizations run on the balanced matrix
/// Phi_eq = D^-1 Phi D^-1, whose conditioning reflects the excitation
/// geometry instead of the channel scales.
fn equilibration(m: &Mat8) -> [f64; 8] {
    let mut d = [1.0f64; 8];
    for i in 0..8 {
        let v = m[(i, i)];
        if v > 0.0 {
            d[i] = v.sqrt();
        } else {
            let v = v.abs();
            if v > 0.0 {
                d[i] = v.sqrt();
            }
        }
    }
    d
}

fn equilibrated(m: &Mat8, d: &[f64; 8]) -> Mat8 {
    Mat8::from_fn(|i, j| m[(i, j)] / (d[i] * d[j]))
}

/// Explicit adjugate via cofactors (7x7 minor determinants), computed in
/// the equilibrated basis: adj(Phi) = det(D)^2 D^-1 adj(Phi_eq) D^-1.
/// Well-defined (and exact in the limit) at det = 0.
pub fn adjugate(m: &Mat8) -> Mat8 {
    let d = equilibration(m);
    let m_eq = equilibrated(m, &d);
    let det_d_sq: f64 = d.iter().map(|v| v * v).product();
    let mut adj = Mat8::zeros();
    for row in 0..8 {
        for col in 0..8 {
            let minor = minor_determinant(&m_eq, row, col);
            let sign = if (row + col) % 2 == 0 { 1.0 } else { -1.0 };
            // adj = transpose of the cofactor matrix
            adj[(col, row)] = sign * minor * det_d_sq / (d[col] * d[row]);
        }
    }
    adj
}

/// Determinant of the 7x7 submatrix with `skip_row`/`skip_col` removed,
/// by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn minor_determinant(m: &Mat8, skip_row: usize, skip_col: usize) -> f64 {
    let mut a = [[0.0f64; 7]; 7];
    let mut r = 0;
    for i in 0..8 {
        if i == skip_row {
            continue;
        }
        let mut c = 0;
        for j in 0..8 {
            if j == skip_col {
                continue;
            }
            a[r][c] = m[(i, j)];
            c += 1;
        }
        r += 1;
    }
    let mut det = 1.0;
    for k in 0..7 {
        let mut pivot = k;
        for i in (k + 1)..7 {
            if a[i][k].abs() > a[pivot][k].abs() {
                pivot = i;
            }
        }
        if a[pivot][k] == 0.0 {
            return 0.0;
        }
        if pivot != k {
            a.swap(pivot, k);
            det = -det;
        }
        det *= a[k][k];
        for i in (k + 1)..7 {
            let f = a[i][k] / a[k][k];
            for j in k..7 {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    det
}

/// Delta = det(Phi), calY = adj(Phi) Y.
///
/// Whenever the equilibrated factorization is usable, calY is computed as
/// Delta * solve(Phi, Y): the solve is backward stable, whereas summing
/// adj(Phi) against Y cancels catastrophically on ill-conditioned Phi and
/// would leak conditioning-amplified noise into the scalar regressions.
/// The explicit cofactor route remains as the fallback at (near-)exact
/// singularity, where adj(Phi) Y is still well-defined while the inverse
/// is not.
pub fn mix(phi: &Mat8, y: &Vec8) -> MixedSample {
    let d = equilibration(phi);
    let phi_eq = equilibrated(phi, &d);
    let det_d_sq: f64 = d.iter().map(|v| v * v).product();
    let lu = phi_eq.lu();
    let det_eq = lu.determinant();
    let delta = det_eq * det_d_sq;
    if det_eq != 0.0 && det_eq.is_finite() {
        let y_eq = Vec8::from_fn(|i, _| y[i] / d[i]);
        if let Some(w_eq) = lu.solve(&y_eq) {
            let cal_y = Vec8::from_fn(|i, _| w_eq[i] / d[i] * delta);
            if cal_y.iter().all(|v| v.is_finite()) {
                return MixedSample { delta, cal_y };
            }
        }
    }
    MixedSample {
        delta,
        cal_y: adjugate(phi) * y,
    }
}

/// Excitation verdict over the run window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ExcitationVerdict {
    Excited,
    Stalled,
}

/// The four scalar gradient estimators plus the excitation bookkeeping.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub theta_hat: [f64; 4],
    pub gains: [f64; 4],
    pub excitation_integral: f64,
    elapsed: f64,
    /// (elapsed, integral) checkpoints for the excitation report.
    history: Vec<(f64, f64)>,
    steps: u64,
}

/// Checkpoint the excitation integral every this many gradient steps.
const HISTORY_STRIDE: u64 = 64;

impl EstimatorState {
    pub fn new(gains: [f64; 4]) -> Self {
        EstimatorState {
            theta_hat: [0.0; 4],
            gains,
            excitation_integral: 0.0,
            elapsed: 0.0,
            history: vec![(0.0, 0.0)],
            steps: 0,
        }
    }

    pub fn with_initial(gains: [f64; 4], theta0: [f64; 4]) -> Self {
        let mut s = Self::new(gains);
        s.theta_hat = theta0;
        s
    }

    /// One gradient update theta_i += dt gamma_i Delta (calY_i - Delta theta_i),
    /// sub-stepped when gamma Delta^2 dt exceeds the stability guard. The
    /// sign moves each estimate toward calY_i/Delta so the error obeys the
    /// decay law thetatilde' = -gamma Delta^2 thetatilde.
    pub fn gradient_step(&mut self, mixed: &MixedSample, dt: f64) {
        let delta = mixed.delta;
        let delta_sq = delta * delta;
        self.excitation_integral += delta_sq * dt;
        self.elapsed += dt;
        self.steps += 1;
        if self.steps.is_multiple_of(HISTORY_STRIDE) {
            self.history.push((self.elapsed, self.excitation_integral));
        }
        if delta == 0.0 {
            return;
        }
        for i in 0..4 {
            let rate = self.gains[i] * delta_sq;
            let spill = rate * dt;
            if spill <= 0.5 {
                self.theta_hat[i] += dt * self.gains[i] * delta * (mixed.cal_y[i] - delta * self.theta_hat[i]);
            } else {
                let n = (spill / 0.5).ceil();
                if n <= 64.0 {
                    let sub = dt / n;
                    for _ in 0..n as u32 {
                        self.theta_hat[i] +=
                            sub * self.gains[i] * delta * (mixed.cal_y[i] - delta * self.theta_hat[i]);
                    }
                } else {
                    // limit of infinitely fine sub-stepping
                    let target = mixed.cal_y[i] / delta;
                    let decay = (-spill).exp();
                    self.theta_hat[i] = target + (self.theta_hat[i] - target) * decay;
                }
            }
        }
    }

    /// Integral of Delta^2 plus the verdict: EXCITED when the integral grew
    /// by at least 10% over the last half of the run window.
    pub fn excitation_report(&self) -> (f64, ExcitationVerdict) {
        let total = self.excitation_integral;
        if !(total > 0.0) {
            return (total, ExcitationVerdict::Stalled);
        }
        let half_t = self.elapsed / 2.0;
        // integral value at the checkpoint closest to half-time
        let at_half = self
            .history
            .iter()
            .min_by(|a, b| {
                (a.0 - half_t)
                    .abs()
                    .partial_cmp(&(b.0 - half_t).abs())
                    .unwrap()
            })
            .map(|(_, v)| *v)
            .unwrap_or(0.0);
        if at_half == 0.0 || total >= 1.1 * at_half {
            (total, ExcitationVerdict::Excited)
        } else {
            (total, ExcitationVerdict::Stalled)
        }
    }
}
