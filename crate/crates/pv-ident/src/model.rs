//! Parameter algebra for the dynamic single-diode PV array model.
//!
//! The array is described by five physical unknowns (C, Rp, Rs, I0, Iirr)
//! plus a known diode coefficient b. Internally the plant is written in
//! terms of the transformed vector eta, and the estimator works on the
//! 8-dimensional regression parameter theta. This module holds the maps
//! between those coordinate systems, the operating-point catalog and the
//! continuous-time plant equations. Everything is in SI base units; the
//! catalog converts from datasheet units (uF, nA) on construction.

use crate::error::{PvError, Result};

/// Electron charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602e-19;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.3806503e-23;

/// Divisions by anything smaller than this are treated as degenerate.
pub const POSITIVITY_FLOOR: f64 = 1e-30;

/// Largest exponent argument fed to `exp` before flagging overflow.
const MAX_EXP_ARG: f64 = 709.0;

/// The five physical parameters of the array, SI units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PhysicalParams {
    /// Parasitic capacitance C, farads.
    pub capacitance: f64,
    /// Leakage (parallel) resistance Rp, ohms.
    pub parallel_resistance: f64,
    /// Ohmic (series) resistance Rs, ohms.
    pub series_resistance: f64,
    /// Diode saturation current I0, amperes.
    pub saturation_current: f64,
    /// Photoelectric (irradiance) current Iirr, amperes.
    pub irradiance_current: f64,
}

impl PhysicalParams {
    pub fn is_valid(&self) -> bool {
        self.capacitance > 0.0
            && self.parallel_resistance > 0.0
            && self.series_resistance > 0.0
            && self.saturation_current > 0.0
            && self.irradiance_current > 0.0
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.capacitance,
            self.parallel_resistance,
            self.series_resistance,
            self.saturation_current,
            self.irradiance_current,
        ]
    }
}

/// Transformed parameter vector eta with the derived eta6, eta7.
///
/// eta1 = 1/(Rp C)   [1/s]
/// eta2 = I0/C       [V/s]
/// eta3 = (Iirr+I0)/C [V/s]
/// eta4 = 1/C        [V/(A s)]
/// eta5 = Rs         [ohm]
/// eta6 = b eta5, eta7 = eta4 + eta1 eta5 (by construction)
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaParams {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
    pub eta5: f64,
    pub eta6: f64,
    pub eta7: f64,
}

impl EtaParams {
    /// Assemble from the five independent entries, filling the derived ones.
    pub fn new(eta1: f64, eta2: f64, eta3: f64, eta4: f64, eta5: f64, b: f64) -> Self {
        EtaParams {
            eta1,
            eta2,
            eta3,
            eta4,
            eta5,
            eta6: b * eta5,
            eta7: eta4 + eta1 * eta5,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.eta1 > 0.0
            && self.eta2 > 0.0
            && self.eta3 > self.eta2
            && self.eta4 > 0.0
            && self.eta5 > 0.0
    }
}

/// The 8-dimensional regression parameter: [mu; eta5*mu] with
/// mu = (eta5, eta1, eta7, eta3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaParams(pub [f64; 8]);

impl ThetaParams {
    /// The four entries the estimator actually tracks.
    pub fn heads(&self) -> [f64; 4] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }
}

/// Diode exponential coefficient b = q/(nkT), optionally scaled by the
/// number of series-connected cells.
#[derive(Debug, Clone, Copy)]
pub struct DiodeCoefficient {
    /// Reciprocal modified ideality factor, 1/V.
    pub b: f64,
    pub ideality_factor: Option<f64>,
    pub temperature: Option<f64>,
    pub series_cell_count: Option<u32>,
}

impl DiodeCoefficient {
    pub fn from_value(b: f64) -> Self {
        DiodeCoefficient {
            b,
            ideality_factor: None,
            temperature: None,
            series_cell_count: None,
        }
    }
}

/// One operating point of the catalog: environment, mean converter current
/// and the true parameters at that point.
#[derive(Debug, Clone, Copy)]
pub struct OperatingMode {
    pub label: &'static str,
    /// Solar irradiance G, W/m^2.
    pub irradiance: f64,
    /// Junction temperature T, K.
    pub temperature: f64,
    /// Average converter current, A.
    pub mean_current: f64,
    pub truth: PhysicalParams,
    /// Exponential coefficient, 1/V (catalog value, not recomputed).
    pub b: f64,
}

impl OperatingMode {
    pub fn eta(&self) -> EtaParams {
        eta_from_physical(&self.truth, self.b)
    }

    pub fn theta(&self) -> ThetaParams {
        theta_from_eta(&self.eta())
    }
}

/// The four catalog operating points (datasheet units converted to SI).
pub const CATALOG: [OperatingMode; 4] = [
    OperatingMode {
        label: "STC",
        irradiance: 1000.0,
        temperature: 298.15,
        mean_current: 4.54,
        truth: PhysicalParams {
            capacitance: 0.6e-6,
            parallel_resistance: 112.55,
            series_resistance: 0.2747,
            saturation_current: 10.57e-9,
            irradiance_current: 5.00,
        },
        b: 0.958,
    },
    OperatingMode {
        label: "Mode1",
        irradiance: 748.9,
        temperature: 302.15,
        mean_current: 3.40,
        truth: PhysicalParams {
            capacitance: 0.6e-6,
            parallel_resistance: 150.28,
            series_resistance: 0.2747,
            saturation_current: 17.68e-9,
            irradiance_current: 3.75,
        },
        b: 0.945,
    },
    OperatingMode {
        label: "Mode2",
        irradiance: 740.4,
        temperature: 302.40,
        mean_current: 3.36,
        truth: PhysicalParams {
            capacitance: 0.6e-6,
            parallel_resistance: 152.02,
            series_resistance: 0.2747,
            saturation_current: 18.24e-9,
            irradiance_current: 3.70,
        },
        b: 0.944,
    },
    OperatingMode {
        label: "Mode3",
        irradiance: 715.8,
        temperature: 302.71,
        mean_current: 3.25,
        truth: PhysicalParams {
            capacitance: 0.6e-6,
            parallel_resistance: 157.23,
            series_resistance: 0.2747,
            saturation_current: 18.97e-9,
            irradiance_current: 3.58,
        },
        b: 0.943,
    },
];

/// Look up a catalog mode by its label ("STC", "Mode1", "Mode2", "Mode3").
pub fn mode_by_label(label: &str) -> Option<&'static OperatingMode> {
    CATALOG.iter().find(|m| m.label == label)
}

/// K -> eta.
pub fn eta_from_physical(k: &PhysicalParams, b: f64) -> EtaParams {
    EtaParams::new(
        1.0 / (k.parallel_resistance * k.capacitance),
        k.saturation_current / k.capacitance,
        (k.irradiance_current + k.saturation_current) / k.capacitance,
        1.0 / k.capacitance,
        k.series_resistance,
        b,
    )
}

/// eta -> K, the inverse map. Fails on degenerate divisors or when
/// eta3 < eta2 (which would imply a negative irradiance current; only
/// estimate transients produce that).
pub fn physical_from_eta(eta: &EtaParams) -> Result<PhysicalParams> {
    if eta.eta4 <= POSITIVITY_FLOOR {
        return Err(PvError::DegenerateEta {
            context: "eta4",
            value: eta.eta4,
        });
    }
    if eta.eta1 <= POSITIVITY_FLOOR {
        return Err(PvError::DegenerateEta {
            context: "eta1",
            value: eta.eta1,
        });
    }
    if eta.eta3 < eta.eta2 {
        return Err(PvError::NegativeIrradianceCurrent {
            eta2: eta.eta2,
            eta3: eta.eta3,
        });
    }
    Ok(PhysicalParams {
        capacitance: 1.0 / eta.eta4,
        parallel_resistance: eta.eta4 / eta.eta1,
        series_resistance: eta.eta5,
        saturation_current: eta.eta2 / eta.eta4,
        irradiance_current: (eta.eta3 - eta.eta2) / eta.eta4,
    })
}

/// eta -> theta = [eta5, eta1, eta7, eta3, eta5^2, eta5*eta1, eta5*eta7, eta5*eta3].
pub fn theta_from_eta(eta: &EtaParams) -> ThetaParams {
    let mu = [eta.eta5, eta.eta1, eta.eta7, eta.eta3];
    ThetaParams([
        mu[0],
        mu[1],
        mu[2],
        mu[3],
        eta.eta5 * mu[0],
        eta.eta5 * mu[1],
        eta.eta5 * mu[2],
        eta.eta5 * mu[3],
    ])
}

/// The first four eta entries recovered from theta heads:
/// (eta1, eta3, eta4, eta5) = (theta2, theta4, theta3 - theta1*theta2, theta1).
pub fn eta_heads_from_theta(theta14: &[f64; 4]) -> (f64, f64, f64, f64) {
    (
        theta14[1],
        theta14[3],
        theta14[2] - theta14[0] * theta14[1],
        theta14[0],
    )
}

/// b = q/(n k T count), 1/V.
pub fn compute_b(ideality_factor: f64, temperature: f64, series_cell_count: u32) -> f64 {
    ELEMENTARY_CHARGE
        / (ideality_factor * BOLTZMANN * temperature * f64::from(series_cell_count))
}

/// Right-hand side of the capacitor-voltage state equation:
/// xdot = -eta1 x - eta2 e^{b x} + eta3 - eta4 u.
pub fn plant_rhs(x: f64, u: f64, eta: &EtaParams, b: f64) -> Result<f64> {
    let exponent = b * x;
    if exponent > MAX_EXP_ARG {
        return Err(PvError::ExpOverflow { exponent });
    }
    Ok(-eta.eta1 * x - eta.eta2 * exponent.exp() + eta.eta3 - eta.eta4 * u)
}

/// Terminal voltage y = x - eta5 u.
pub fn plant_output(x: f64, u: f64, eta5: f64) -> f64 {
    x - eta5 * u
}
