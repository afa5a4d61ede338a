//! Product-of-exponentials kinematics of the arm + rod chain.
//!
//! The arm contributes two revolute transforms `O_k exp(a_k q_k)`. The rod is
//! cut into `n_intervals` equal pieces and each piece is advanced with the
//! fourth-order Magnus step
//!
//! ```text
//! Omega = (H/2)(xi1 + xi2) + (sqrt(3) H^2 / 12) [xi1, xi2]
//! ```
//!
//! where `xi1`, `xi2` are the strains at the two Gauss-Legendre nodes of the
//! piece and `H` its physical length.
//!
//! [`sweep`] walks the chain once and returns, at arbitrary arclength
//! stations, the frame, its body Jacobian, and (when generalized velocities
//! are given) the body twist and the velocity-product part of the body
//! acceleration. Dynamics assembles all its integrals from that walk.

use nalgebra::{SMatrix, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::model::{
    soft_part, Config, RodModel, SoftVector, StrainMatrix, DOF, RIGID_DOF, SOFT_DOF,
};
use crate::se3::{ad, exp_se3, lie_bracket, right_jacobian, Pose, Twist};

pub type BodyJacobian = SMatrix<f64, 6, DOF>;

const GAUSS_HALF_GAP: f64 = 0.288_675_134_594_812_9; // sqrt(3)/6
const BRACKET_WEIGHT: f64 = 0.144_337_567_297_406_43; // sqrt(3)/12
const JR_FD_STEP: f64 = 1e-6;

fn check_arclength(what: &'static str, s: f64) -> Result<()> {
    // Allow a few ulps past 1 from accumulated interval sums.
    if (-1e-12..=1.0 + 1e-12).contains(&s) {
        Ok(())
    } else {
        Err(Error::OutOfDomain {
            what,
            value: s,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

/// Strain twist `Phi(s) q_soft + xi*` (physical units).
pub fn eval_strain(model: &RodModel, q: &Config, s: f64) -> Result<Twist> {
    check_arclength("s", s)?;
    Ok(model.basis.strain(s, &soft_part(q)))
}

/// One Magnus step over `[s_left, s_left + h]` and its derivative in the soft coordinates.
#[derive(Clone, Debug)]
pub struct MagnusStep {
    pub omega: Twist,
    /// d Omega / d q_soft
    pub d_omega: StrainMatrix,
    phi: [StrainMatrix; 2],
    /// Physical step length (m).
    length: f64,
}

impl MagnusStep {
    pub(crate) fn compute(model: &RodModel, q_soft: &SoftVector, s_left: f64, h: f64) -> Self {
        let hp = h * model.rod_length;
        let s1 = s_left + h * (0.5 - GAUSS_HALF_GAP);
        let s2 = s_left + h * (0.5 + GAUSS_HALF_GAP);
        let phi1 = model.basis.evaluate(s1);
        let phi2 = model.basis.evaluate(s2);
        let xi_ref = model.basis.reference().to_vector();
        let xi1 = Twist::from_vector(&(phi1 * q_soft + xi_ref));
        let xi2 = Twist::from_vector(&(phi2 * q_soft + xi_ref));
        let c = BRACKET_WEIGHT * hp * hp;
        let omega = (xi1 + xi2).scale(0.5 * hp) + lie_bracket(&xi1, &xi2).scale(c);
        let d_omega = (phi1 + phi2) * (0.5 * hp) + (ad(&xi1) * phi2 - ad(&xi2) * phi1) * c;
        Self {
            omega,
            d_omega,
            phi: [phi1, phi2],
            length: hp,
        }
    }

    /// Second time derivative of Omega at zero generalized acceleration,
    /// `2 c [Phi1 qd, Phi2 qd]`.
    fn velocity_product(&self, qd_soft: &SoftVector) -> Vector6<f64> {
        let c = BRACKET_WEIGHT * self.length * self.length;
        let x1 = Twist::from_vector(&(self.phi[0] * qd_soft));
        let x2 = Twist::from_vector(&(self.phi[1] * qd_soft));
        lie_bracket(&x1, &x2).to_vector() * (2.0 * c)
    }
}

pub fn magnus_step(model: &RodModel, q: &Config, s_left: f64, h: f64) -> Result<Twist> {
    check_arclength("s_left", s_left)?;
    check_arclength("s_left + h", s_left + h)?;
    if h < 0.0 {
        return Err(Error::OutOfDomain {
            what: "h",
            value: h,
            lo: 0.0,
            hi: 1.0 - s_left,
        });
    }
    Ok(MagnusStep::compute(model, &soft_part(q), s_left, h).omega)
}

/// Directional derivative `(d/de J_r(x + e d)) d` by central differences.
fn right_jacobian_rate(x: &Twist, dir: &Vector6<f64>) -> Vector6<f64> {
    let n = dir.norm();
    if n == 0.0 {
        return Vector6::zeros();
    }
    let u = dir / n;
    let step = Twist::from_vector(&(u * JR_FD_STEP));
    let diff = right_jacobian(&(*x + step)) - right_jacobian(&(*x - step));
    diff * u * (n * n / (2.0 * JR_FD_STEP))
}

/// Frame of every arm joint and rod station.
#[derive(Clone, Debug)]
pub struct FrameChain {
    /// Frames after each arm joint; the second one is the rope root.
    pub joints: [Pose; RIGID_DOF],
    /// `n_intervals + 1` frames at the rod material points.
    pub rod: Vec<Pose>,
}

impl FrameChain {
    pub fn tip(&self) -> &Pose {
        self.rod.last().expect("rod has at least one frame")
    }

    pub fn positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.rod.iter().map(|g| g.translation)
    }
}

fn joint_transform(model: &RodModel, k: usize, angle: f64) -> Pose {
    let joint = &model.joints[k];
    joint.offset() * exp_se3(&joint.screw().scale(angle))
}

fn arm_frames(model: &RodModel, q: &Config) -> [Pose; RIGID_DOF] {
    let g1 = joint_transform(model, 0, q[0]);
    let g2 = g1 * joint_transform(model, 1, q[1]);
    [g1, g2]
}

pub fn forward_kinematics(model: &RodModel, q: &Config) -> Result<FrameChain> {
    let joints = arm_frames(model, q);
    let q_soft = soft_part(q);
    let h = model.interval();
    let mut rod = Vec::with_capacity(model.n_intervals + 1);
    let mut g = joints[RIGID_DOF - 1];
    rod.push(g);
    for i in 0..model.n_intervals {
        let step = MagnusStep::compute(model, &q_soft, i as f64 * h, h);
        g = g * exp_se3(&step.omega);
        rod.push(g);
    }
    Ok(FrameChain { joints, rod })
}

pub fn tip_pose(model: &RodModel, q: &Config) -> Result<Pose> {
    Ok(*forward_kinematics(model, q)?.tip())
}

pub fn tip_position(model: &RodModel, q: &Config) -> Result<Vector3<f64>> {
    Ok(tip_pose(model, q)?.translation)
}

/// Frame data at one arclength station.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub s: f64,
    pub pose: Pose,
    /// Body Jacobian, column i = vee(g^-1 dg/dq_i).
    pub jacobian: BodyJacobian,
    /// Body twist `J qd` (zero when no velocities were given).
    pub velocity: Vector6<f64>,
    /// Body acceleration at zero generalized acceleration, `Jdot qd`.
    pub bias: Vector6<f64>,
}

impl FrameSample {
    /// World-frame linear velocity of the station's origin.
    pub fn linear_velocity(&self) -> Vector3<f64> {
        self.pose.rotation * self.velocity.fixed_rows::<3>(3)
    }

    /// World-frame position Jacobian, `R J_v`.
    pub fn position_jacobian(&self) -> SMatrix<f64, 3, DOF> {
        self.pose.rotation * self.jacobian.fixed_rows::<3>(3)
    }
}

#[derive(Clone)]
struct ChainState {
    pose: Pose,
    jacobian: BodyJacobian,
    velocity: Vector6<f64>,
    bias: Vector6<f64>,
}

impl ChainState {
    /// Appends `exp(Omega)` with `Omega` depending on the soft coordinates.
    fn advance(
        &self,
        step: &MagnusStep,
        qd_soft: Option<&SoftVector>,
    ) -> ChainState {
        let e = exp_se3(&step.omega);
        let ad_inv = e.adjoint_inverse();
        let jr = right_jacobian(&step.omega);
        let mut jacobian = ad_inv * self.jacobian;
        let mut soft_cols = jacobian.fixed_columns_mut::<SOFT_DOF>(RIGID_DOF);
        soft_cols += jr * step.d_omega;
        let (velocity, bias) = match qd_soft {
            Some(qd) => {
                let omega_rate = step.d_omega * qd;
                let psi = jr * omega_rate;
                let velocity = ad_inv * self.velocity + psi;
                let bias = ad_inv * self.bias
                    + ad(&Twist::from_vector(&velocity)) * psi
                    + jr * step.velocity_product(qd)
                    + right_jacobian_rate(&step.omega, &omega_rate);
                (velocity, bias)
            }
            None => (Vector6::zeros(), Vector6::zeros()),
        };
        ChainState {
            pose: self.pose * e,
            jacobian,
            velocity,
            bias,
        }
    }
}

fn arm_state(model: &RodModel, q: &Config, qd: Option<&Config>) -> ChainState {
    let mut st = ChainState {
        pose: Pose::identity(),
        jacobian: BodyJacobian::zeros(),
        velocity: Vector6::zeros(),
        bias: Vector6::zeros(),
    };
    for k in 0..RIGID_DOF {
        let t = joint_transform(model, k, q[k]);
        let ad_inv = t.adjoint_inverse();
        let screw = model.joints[k].screw().to_vector();
        st.pose = st.pose * t;
        st.jacobian = ad_inv * st.jacobian;
        st.jacobian.set_column(k, &screw);
        if let Some(qd) = qd {
            let psi = screw * qd[k];
            st.velocity = ad_inv * st.velocity + psi;
            st.bias = ad_inv * st.bias + ad(&Twist::from_vector(&st.velocity)) * psi;
        }
    }
    st
}

/// Frames, body Jacobians and (optionally) body velocities and bias
/// accelerations at the ascending arclength stations `points`.
pub fn sweep(
    model: &RodModel,
    q: &Config,
    qd: Option<&Config>,
    points: &[f64],
) -> Result<Vec<FrameSample>> {
    for w in points.windows(2) {
        if w[1] < w[0] {
            return Err(Error::validation("points", "must be ascending"));
        }
    }
    for &s in points {
        check_arclength("s", s)?;
    }
    let q_soft = soft_part(q);
    let qd_soft = qd.map(soft_part);
    let n = model.n_intervals;
    let h = model.interval();
    let mut node = arm_state(model, q, qd);
    let mut out = Vec::with_capacity(points.len());
    let mut next = 0;
    let emit = |st: &ChainState, s: f64| FrameSample {
        s,
        pose: st.pose,
        jacobian: st.jacobian,
        velocity: st.velocity,
        bias: st.bias,
    };
    for i in 0..n {
        let s_lo = i as f64 * h;
        let last = i + 1 == n;
        let s_hi = if last { 1.0 } else { (i + 1) as f64 * h };
        while let Some(&s) = points.get(next) {
            let inside = if last { s <= s_hi } else { s < s_hi };
            if !inside {
                break;
            }
            let sub = s - s_lo;
            if sub <= 0.0 {
                out.push(emit(&node, s));
            } else {
                let step = MagnusStep::compute(model, &q_soft, s_lo, sub);
                out.push(emit(&node.advance(&step, qd_soft.as_ref()), s));
            }
            next += 1;
        }
        let step = MagnusStep::compute(model, &q_soft, s_lo, s_hi - s_lo);
        node = node.advance(&step, qd_soft.as_ref());
    }
    // Stations a few ulps past the tip.
    out.extend(points[next..].iter().map(|&s| emit(&node, s)));
    Ok(out)
}

/// Body Jacobian of the tip frame, 6 x 20.
pub fn pose_jacobian(model: &RodModel, q: &Config) -> Result<BodyJacobian> {
    Ok(sweep(model, q, None, &[1.0])?.remove(0).jacobian)
}

/// Tip frame together with its body Jacobian.
pub fn tip_sample(model: &RodModel, q: &Config) -> Result<FrameSample> {
    Ok(sweep(model, q, None, &[1.0])?.remove(0))
}

/// Stations of the material points `i / n_intervals`.
pub fn material_stations(model: &RodModel) -> Vec<f64> {
    let n = model.n_intervals;
    (0..=n).map(|i| if i == n { 1.0 } else { i as f64 / n as f64 }).collect()
}
