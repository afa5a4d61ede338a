//! Rod model description: geometry, material, strain basis and discretization.
//!
//! Arclength is normalized to `s` in `[0, 1]`; strains are physical (1/m for
//! curvature, dimensionless for stretch) and every integral over the rod is
//! scaled by `rod_length`.

use std::path::Path;

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::se3::{so3_exp, Pose, Twist};

/// Total generalized coordinates.
pub const DOF: usize = 20;
/// Kinematically driven arm joints, stored first in every configuration.
pub const RIGID_DOF: usize = 2;
/// Strain-basis coefficients of the rope.
pub const SOFT_DOF: usize = DOF - RIGID_DOF;
/// Highest Legendre degree per bending channel.
pub const BASIS_DEGREE: usize = 8;
const MODES_PER_CHANNEL: usize = BASIS_DEGREE + 1;

pub type Config = SVector<f64, DOF>;
pub type SoftVector = SVector<f64, SOFT_DOF>;
pub type StrainMatrix = SMatrix<f64, 6, SOFT_DOF>;

/// Legendre values `P_0..P_8` of the shifted argument `2s - 1`.
pub fn legendre(s: f64) -> [f64; MODES_PER_CHANNEL] {
    let x = 2.0 * s - 1.0;
    let mut p = [0.0; MODES_PER_CHANNEL];
    p[0] = 1.0;
    p[1] = x;
    for k in 1..BASIS_DEGREE {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * x * p[k] - kf * p[k - 1]) / (kf + 1.0);
    }
    p
}

/// Strain basis: two strain channels each spanned by Legendre polynomials of
/// degree 0..=8 in `s`; the remaining channels are locked to the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrainBasis {
    /// Twist components (0..6, angular first) carrying the soft modes.
    pub channels: [usize; 2],
    /// Stress-free strain; `(0, 0, 0, 1, 0, 0)` is an unstretched straight rod along local x.
    pub reference_strain: [f64; 6],
}

impl Default for StrainBasis {
    fn default() -> Self {
        Self {
            channels: [1, 2],
            reference_strain: [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        }
    }
}

impl StrainBasis {
    pub const N_DOF_SOFT: usize = SOFT_DOF;

    pub fn reference(&self) -> Twist {
        Twist::from_vector(&self.reference_strain.into())
    }

    /// Basis matrix `Phi(s)`, 6 x 18.
    pub fn evaluate(&self, s: f64) -> StrainMatrix {
        let p = legendre(s);
        let mut phi = StrainMatrix::zeros();
        for (c, &row) in self.channels.iter().enumerate() {
            for (k, pk) in p.iter().enumerate() {
                phi[(row, c * MODES_PER_CHANNEL + k)] = *pk;
            }
        }
        phi
    }

    /// `Phi(s) q_soft + xi*` without forming the matrix.
    pub fn strain(&self, s: f64, q_soft: &SoftVector) -> Twist {
        let p = legendre(s);
        let mut x: nalgebra::Vector6<f64> = self.reference_strain.into();
        for (c, &row) in self.channels.iter().enumerate() {
            let coeffs = &q_soft.as_slice()[c * MODES_PER_CHANNEL..(c + 1) * MODES_PER_CHANNEL];
            x[row] += p.iter().zip(coeffs).map(|(a, b)| a * b).sum::<f64>();
        }
        Twist::from_vector(&x)
    }

    fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c >= 6) || self.channels[0] == self.channels[1] {
            return Err(Error::validation(
                "basis.channels",
                "need two distinct twist components in 0..6",
            ));
        }
        if self.reference_strain.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("basis.reference_strain", "non-finite entry"));
        }
        Ok(())
    }
}

/// Revolute joint of the arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidJoint {
    /// Rotation axis in the joint's local frame (normalized on use).
    pub axis: [f64; 3],
    /// Translation of the fixed offset applied before the joint rotation (m).
    #[serde(default)]
    pub offset_translation: [f64; 3],
    /// Rotation vector of the fixed offset (rad).
    #[serde(default)]
    pub offset_rotation: [f64; 3],
}

impl RigidJoint {
    pub fn revolute(axis: [f64; 3]) -> Self {
        Self {
            axis,
            offset_translation: [0.0; 3],
            offset_rotation: [0.0; 3],
        }
    }

    pub fn offset(&self) -> Pose {
        Pose::new(
            so3_exp(&Vector3::from(self.offset_rotation)),
            Vector3::from(self.offset_translation),
        )
    }

    /// Unit joint screw `(axis, 0)`.
    pub fn screw(&self) -> Twist {
        Twist::new(Vector3::from(self.axis).normalize(), Vector3::zeros())
    }
}

/// Two revolute joints carrying a tapered elastic rod.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RodModel {
    pub joints: [RigidJoint; RIGID_DOF],
    /// m
    pub rod_length: f64,
    /// Radius at the root (m); the radius tapers linearly to `radius_tip`.
    pub radius_base: f64,
    /// m
    pub radius_tip: f64,
    /// Pa
    pub youngs_modulus: f64,
    /// Pa
    pub shear_modulus: f64,
    /// kg/m^3
    pub density: f64,
    /// Kelvin-Voigt viscosity per strain channel (Pa s), scaled by the
    /// matching section property like the elastic moduli.
    pub damping: [f64; 6],
    /// m/s^2, world frame
    pub gravity: [f64; 3],
    pub n_intervals: usize,
    #[serde(default)]
    pub basis: StrainBasis,
}

impl Default for RodModel {
    fn default() -> Self {
        let e = 1e6;
        Self {
            joints: [
                RigidJoint::revolute([0.0, 0.0, 1.0]),
                RigidJoint::revolute([0.0, 1.0, 0.0]),
            ],
            rod_length: 0.5,
            radius_base: 0.012,
            radius_tip: 0.006,
            youngs_modulus: e,
            shear_modulus: e / 3.0,
            density: 1000.0,
            damping: [DEFAULT_VISCOSITY; 6],
            gravity: [0.0, 0.0, -9.81],
            n_intervals: 20,
            basis: StrainBasis::default(),
        }
    }
}

/// Default per-channel viscosity (Pa s).
pub const DEFAULT_VISCOSITY: f64 = 2.0e3;

/// Section properties at one arclength station.
#[derive(Clone, Copy, Debug)]
pub struct Section {
    pub area: f64,
    /// Second moment of area about either bending axis.
    pub inertia: f64,
    /// Polar moment.
    pub polar: f64,
}

impl RodModel {
    pub fn radius(&self, s: f64) -> f64 {
        self.radius_base + (self.radius_tip - self.radius_base) * s
    }

    pub fn section(&self, s: f64) -> Section {
        let r = self.radius(s);
        let area = std::f64::consts::PI * r * r;
        let inertia = std::f64::consts::PI * r.powi(4) / 4.0;
        Section {
            area,
            inertia,
            polar: 2.0 * inertia,
        }
    }

    /// Mass-inertia per unit length, `diag(rho J, rho I, rho I, rho A, rho A, rho A)`.
    pub fn inertia_density(&self, s: f64) -> [f64; 6] {
        let sec = self.section(s);
        let rho = self.density;
        [
            rho * sec.polar,
            rho * sec.inertia,
            rho * sec.inertia,
            rho * sec.area,
            rho * sec.area,
            rho * sec.area,
        ]
    }

    /// Cross-section stiffness `diag(G J, E I, E I, E A, G A, G A)`.
    pub fn section_stiffness(&self, s: f64) -> [f64; 6] {
        let sec = self.section(s);
        let (e, g) = (self.youngs_modulus, self.shear_modulus);
        [
            g * sec.polar,
            e * sec.inertia,
            e * sec.inertia,
            e * sec.area,
            g * sec.area,
            g * sec.area,
        ]
    }

    /// Cross-section viscosity, same section scaling as the stiffness.
    pub fn section_viscosity(&self, s: f64) -> [f64; 6] {
        let sec = self.section(s);
        let d = &self.damping;
        [
            d[0] * sec.polar,
            d[1] * sec.inertia,
            d[2] * sec.inertia,
            d[3] * sec.area,
            d[4] * sec.area,
            d[5] * sec.area,
        ]
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    pub fn interval(&self) -> f64 {
        1.0 / self.n_intervals as f64
    }

    /// Frame of the rope root when all joint angles are zero.
    pub fn root_offset(&self) -> Pose {
        self.joints[0].offset() * self.joints[1].offset()
    }

    /// Radius of a sphere around the first joint containing every reachable tip position, plus 10%.
    pub fn workspace_radius(&self) -> f64 {
        let base = self.joints[1].offset_translation;
        let stretch = self.basis.reference().v.norm();
        1.1 * (self.rod_length * stretch + Vector3::from(base).norm())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rod_length", self.rod_length),
            ("radius_base", self.radius_base),
            ("radius_tip", self.radius_tip),
            ("youngs_modulus", self.youngs_modulus),
            ("shear_modulus", self.shear_modulus),
            ("density", self.density),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, format!("must be positive, got {v}")));
            }
        }
        if self.n_intervals == 0 {
            return Err(Error::validation("n_intervals", "must be at least 1"));
        }
        if self.damping.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::validation("damping", "entries must be finite and >= 0"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(Vector3::from(j.axis).norm() > 0.0) {
                return Err(Error::validation(format!("joints[{i}].axis"), "zero axis"));
            }
        }
        self.basis.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let model: RodModel = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("rod model serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn soft_part(q: &Config) -> SoftVector {
    q.fixed_rows::<SOFT_DOF>(RIGID_DOF).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_matches_closed_forms() {
        let s = 0.37;
        let x: f64 = 2.0 * s - 1.0;
        let p = legendre(s);
        assert!((p[2] - 0.5 * (3.0 * x * x - 1.0)).abs() < 1e-15);
        assert!((p[3] - 0.5 * (5.0 * x.powi(3) - 3.0 * x)).abs() < 1e-15);
        let p8 = (6435.0 * x.powi(8) - 12012.0 * x.powi(6) + 6930.0 * x.powi(4) - 1260.0 * x * x
            + 35.0)
            / 128.0;
        assert!((p[8] - p8).abs() < 1e-14);
    }

    #[test]
    fn default_model_is_valid_and_round_trips_through_toml() {
        let m = RodModel::default();
        m.validate().unwrap();
        let back = RodModel::from_toml_str(&m.to_toml_string()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
    }

    #[test]
    fn rejects_bad_values() {
        let mut m = RodModel::default();
        m.radius_tip = 0.0;
        assert!(matches!(m.validate(), Err(Error::Validation { .. })));
        let mut m = RodModel::default();
        m.n_intervals = 0;
        assert!(m.validate().is_err());
        let mut m = RodModel::default();
        m.basis.channels = [1, 1];
        assert!(m.validate().is_err());
        assert!(RodModel::from_toml_str("rod_length = 1.0").is_err());
    }

    #[test]
    fn basis_dimensions_add_up() {
        assert_eq!(RIGID_DOF + StrainBasis::N_DOF_SOFT, DOF);
        let phi = StrainBasis::default().evaluate(0.2);
        assert_eq!(phi.row(0).amax(), 0.0);
        assert_eq!(phi.row(3).amax(), 0.0);
        assert!(phi.row(1).amax() > 0.0 && phi.row(2).amax() > 0.0);
    }
}
