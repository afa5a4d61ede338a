//! Joint-angle waypoints and the quintic reference motion through them.
//!
//! Each arm joint follows a C4 quintic spline with knots at
//! `0, 0.1, 0.2, 0.3, 0.4, 0.5` s. It starts at rest with zero angle, rate
//! and acceleration, passes through the four waypoints at the interior
//! knots and ends with vanishing second to fourth derivatives.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RIGID_DOF;

/// Simulated horizon (s).
pub const HORIZON: f64 = 0.5;
pub const N_WAYPOINTS: usize = 4;
const N_SEGMENTS: usize = N_WAYPOINTS + 1;
const SEGMENT: f64 = HORIZON / N_SEGMENTS as f64;
const N_COEFFS: usize = 6 * N_SEGMENTS;

/// Inclusive waypoint range per joint (rad).
pub const JOINT_BOUNDS: [(f64, f64); RIGID_DOF] = [(-PI, PI), (-PI / 2.0, PI / 4.0)];

/// Knot times of the waypoints.
pub fn waypoint_times() -> [f64; N_WAYPOINTS] {
    std::array::from_fn(|k| (k + 1) as f64 * SEGMENT)
}

/// Piecewise joint-angle waypoints, one row per joint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub theta: [[f64; N_WAYPOINTS]; RIGID_DOF],
}

impl ControlInput {
    pub fn zero() -> Self {
        Self {
            theta: [[0.0; N_WAYPOINTS]; RIGID_DOF],
        }
    }

    /// Checked constructor; every waypoint must lie within [`JOINT_BOUNDS`].
    pub fn new(theta: [[f64; N_WAYPOINTS]; RIGID_DOF]) -> Result<Self> {
        let c = Self { theta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (j, row) in self.theta.iter().enumerate() {
            let (lo, hi) = JOINT_BOUNDS[j];
            for (k, &v) in row.iter().enumerate() {
                if !(v.is_finite() && (lo..=hi).contains(&v)) {
                    return Err(Error::OutOfDomain {
                        what: WAYPOINT_NAMES[j][k],
                        value: v,
                        lo,
                        hi,
                    });
                }
            }
        }
        Ok(())
    }

    /// Clamps every waypoint into its joint range.
    pub fn clamped(mut self) -> Self {
        for (j, row) in self.theta.iter_mut().enumerate() {
            let (lo, hi) = JOINT_BOUNDS[j];
            for v in row.iter_mut() {
                *v = if v.is_finite() { v.clamp(lo, hi) } else { 0.0 };
            }
        }
        self
    }

    pub fn flat(&self) -> [f64; RIGID_DOF * N_WAYPOINTS] {
        std::array::from_fn(|i| self.theta[i / N_WAYPOINTS][i % N_WAYPOINTS])
    }

    pub fn from_flat(v: &[f64; RIGID_DOF * N_WAYPOINTS]) -> Self {
        Self {
            theta: std::array::from_fn(|j| std::array::from_fn(|k| v[j * N_WAYPOINTS + k])),
        }
    }
}

const WAYPOINT_NAMES: [[&str; N_WAYPOINTS]; RIGID_DOF] = [
    ["theta[0][0]", "theta[0][1]", "theta[0][2]", "theta[0][3]"],
    ["theta[1][0]", "theta[1][1]", "theta[1][2]", "theta[1][3]"],
];

/// Angle, rate and acceleration of every arm joint at one instant.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointMotion {
    pub angle: [f64; RIGID_DOF],
    pub rate: [f64; RIGID_DOF],
    pub accel: [f64; RIGID_DOF],
}

/// Coefficients of one joint's spline for unit waypoint `k`; the spline is
/// linear in the waypoints so any control is a combination of these.
fn unit_splines() -> &'static [SVector<f64, N_COEFFS>; N_WAYPOINTS] {
    static CACHE: OnceLock<[SVector<f64, N_COEFFS>; N_WAYPOINTS]> = OnceLock::new();
    CACHE.get_or_init(|| {
        let (a, rows) = spline_system();
        let lu = a.lu();
        std::array::from_fn(|k| {
            let mut rhs = SVector::<f64, N_COEFFS>::zeros();
            for &(row, wp) in &rows {
                if wp == k {
                    rhs[row] = 1.0;
                }
            }
            lu.solve(&rhs).expect("spline system is nonsingular")
        })
    })
}

/// `d`-th derivative of the monomials `tau^0..tau^5`.
fn monomial_derivs(tau: f64, d: usize) -> [f64; 6] {
    std::array::from_fn(|j| {
        if j < d {
            0.0
        } else {
            let falling: f64 = (0..d).map(|i| (j - i) as f64).product();
            falling * tau.powi((j - d) as i32)
        }
    })
}

/// Linear system for the spline coefficients, plus the rows whose right-hand
/// side is a waypoint value `(row, waypoint index)`.
fn spline_system() -> (SMatrix<f64, N_COEFFS, N_COEFFS>, Vec<(usize, usize)>) {
    let mut a = SMatrix::<f64, N_COEFFS, N_COEFFS>::zeros();
    let mut wp_rows = Vec::new();
    let mut row = 0;
    let put = |a: &mut SMatrix<f64, N_COEFFS, N_COEFFS>, row: usize, seg: usize, v: [f64; 6], sign: f64| {
        for j in 0..6 {
            a[(row, 6 * seg + j)] += sign * v[j];
        }
    };
    // Clamped start: angle, rate, acceleration.
    for d in 0..3 {
        put(&mut a, row, 0, monomial_derivs(0.0, d), 1.0);
        row += 1;
    }
    for k in 0..N_WAYPOINTS {
        put(&mut a, row, k, monomial_derivs(SEGMENT, 0), 1.0);
        wp_rows.push((row, k));
        row += 1;
        put(&mut a, row, k + 1, monomial_derivs(0.0, 0), 1.0);
        wp_rows.push((row, k));
        row += 1;
        for d in 1..5 {
            put(&mut a, row, k, monomial_derivs(SEGMENT, d), 1.0);
            put(&mut a, row, k + 1, monomial_derivs(0.0, d), -1.0);
            row += 1;
        }
    }
    for d in 2..5 {
        put(&mut a, row, N_SEGMENTS - 1, monomial_derivs(SEGMENT, d), 1.0);
        row += 1;
    }
    debug_assert_eq!(row, N_COEFFS);
    (a, wp_rows)
}

fn locate(t: f64) -> (usize, f64) {
    let seg = ((t / SEGMENT).floor() as usize).min(N_SEGMENTS - 1);
    (seg, t - seg as f64 * SEGMENT)
}

/// Values of the unit splines (angle, rate, accel) at `t`.
fn unit_values(t: f64) -> [[f64; N_WAYPOINTS]; 3] {
    let (seg, tau) = locate(t);
    let units = unit_splines();
    std::array::from_fn(|d| {
        let m = monomial_derivs(tau, d);
        std::array::from_fn(|k| (0..6).map(|j| units[k][6 * seg + j] * m[j]).sum())
    })
}

/// Reference joint motion at time `t` in `[0, HORIZON]`.
pub fn reference_trajectory(control: &ControlInput, t: f64) -> Result<JointMotion> {
    if !(0.0..=HORIZON + 1e-9).contains(&t) {
        return Err(Error::OutOfDomain {
            what: "t",
            value: t,
            lo: 0.0,
            hi: HORIZON,
        });
    }
    let u = unit_values(t.min(HORIZON));
    let mut out = JointMotion::default();
    for j in 0..RIGID_DOF {
        let w = &control.theta[j];
        let dot = |d: usize| -> f64 { u[d].iter().zip(w).map(|(a, b)| a * b).sum() };
        out.angle[j] = dot(0);
        out.rate[j] = dot(1);
        out.accel[j] = dot(2);
    }
    Ok(out)
}

/// Least-squares waypoints whose reference angles best match `angles[i][j]`
/// (joint `j` at `times[i]`). The result is not clamped.
pub fn fit_waypoints(times: &[f64], angles: &[[f64; RIGID_DOF]]) -> Result<ControlInput> {
    if times.len() != angles.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} angle rows", times.len()),
            got: format!("{}", angles.len()),
        });
    }
    let mut normal = SMatrix::<f64, N_WAYPOINTS, N_WAYPOINTS>::zeros();
    let mut rhs = SMatrix::<f64, N_WAYPOINTS, RIGID_DOF>::zeros();
    for (&t, row) in times.iter().zip(angles) {
        if !(0.0..=HORIZON + 1e-9).contains(&t) {
            return Err(Error::OutOfDomain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: HORIZON,
            });
        }
        let b = SVector::<f64, N_WAYPOINTS>::from(unit_values(t.min(HORIZON))[0]);
        normal += b * b.transpose();
        for j in 0..RIGID_DOF {
            let mut col = rhs.column_mut(j);
            col += b * row[j];
        }
    }
    let sol = normal
        .cholesky()
        .ok_or_else(|| Error::validation("times", "too few samples to determine the waypoints"))?
        .solve(&rhs);
    Ok(ControlInput {
        theta: std::array::from_fn(|j| std::array::from_fn(|k| sol[(k, j)])),
    })
}
