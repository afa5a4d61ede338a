//! Lie-group primitives on SE(3) and its algebra se(3).
//!
//! Twists are stored angular part first, linear part second. Every 6-vector
//! and 6x6 matrix in this crate uses that ordering, so the little adjoint of
//! a twist `(w, v)` is
//!
//! ```text
//! ad = [ [w]x   0   ]
//!      [ [v]x  [w]x ]
//! ```
//!
//! Coefficient functions of the rotation angle switch to power series close
//! to zero. Below [`SMALL_ANGLE`] a two-term Taylor expansion is used; up to
//! [`SERIES_ANGLE`] a longer series avoids the cancellation the closed forms
//! suffer from.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angle below which the second-order Taylor branches are used.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Angle below which the extended power series replaces the closed forms.
pub const SERIES_ANGLE: f64 = 0.25;
/// `log` and the inverse Jacobians require `trace(R) > -1 + NEAR_PI_TRACE`.
pub const NEAR_PI_TRACE: f64 = 1e-9;

pub type Matrix6x = Matrix6<f64>;

/// Element of se(3): angular part `omega`, linear part `v`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            omega: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.omega * s, self.v * s)
    }

    pub fn angle(&self) -> f64 {
        self.omega.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.omega + rhs.omega, self.v + rhs.v)
    }
}

impl std::ops::Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist::new(self.omega - rhs.omega, self.v - rhs.v)
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.omega, -self.v)
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the rotation and translation blocks; the bottom row is ignored.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Big adjoint `[R, 0; [t]x R, R]`.
    pub fn adjoint(&self) -> Matrix6x {
        let r = &self.rotation;
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.translation) * r));
        ad
    }

    /// Adjoint of the inverse, `[R^T, 0; -R^T [t]x, R^T]`, without forming the inverse.
    pub fn adjoint_inverse(&self) -> Matrix6x {
        let rt = self.rotation.transpose();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-(rt * skew(&self.translation))));
        ad
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        *self * *rhs
    }
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn hat(x: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&x.omega));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&x.v);
    m
}

/// Inverse of [`hat`]. Reads the skew block and the translation column.
pub fn vee(m: &Matrix4<f64>) -> Twist {
    let w = m.fixed_view::<3, 3>(0, 0).into_owned();
    Twist::new(unskew(&w), m.fixed_view::<3, 1>(0, 3).into_owned())
}

/// Little adjoint, `ad_x y = [x, y]`.
pub fn ad(x: &Twist) -> Matrix6x {
    let w = skew(&x.omega);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&x.v));
    m
}

pub fn lie_bracket(a: &Twist, b: &Twist) -> Twist {
    Twist::new(
        a.omega.cross(&b.omega),
        a.omega.cross(&b.v) + a.v.cross(&b.omega),
    )
}

fn series(coeffs: &[f64], t2: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t2 + c)
}

/// Scalar coefficient functions of the rotation angle with their power series.
pub(crate) mod coeff {
    use super::{series, SERIES_ANGLE, SMALL_ANGLE};

    const A: [f64; 7] = [
        1.0,
        -1.0 / 6.0,
        1.0 / 120.0,
        -1.0 / 5040.0,
        1.0 / 362880.0,
        -1.0 / 39916800.0,
        1.0 / 6227020800.0,
    ];
    const B: [f64; 7] = [
        0.5,
        -1.0 / 24.0,
        1.0 / 720.0,
        -1.0 / 40320.0,
        1.0 / 3628800.0,
        -1.0 / 479001600.0,
        1.0 / 87178291200.0,
    ];
    const C: [f64; 7] = [
        1.0 / 6.0,
        -1.0 / 120.0,
        1.0 / 5040.0,
        -1.0 / 362880.0,
        1.0 / 39916800.0,
        -1.0 / 6227020800.0,
        1.0 / 1307674368000.0,
    ];
    const D: [f64; 7] = [
        1.0 / 24.0,
        -1.0 / 720.0,
        1.0 / 40320.0,
        -1.0 / 3628800.0,
        1.0 / 479001600.0,
        -1.0 / 87178291200.0,
        1.0 / 20922789888000.0,
    ];
    const E: [f64; 7] = [
        1.0 / 120.0,
        -1.0 / 2520.0,
        1.0 / 120960.0,
        -1.0 / 9979200.0,
        1.0 / 1245404160.0,
        -1.0 / 217945728000.0,
        1.0 / 50812489728000.0,
    ];
    const F: [f64; 7] = [
        1.0 / 12.0,
        1.0 / 720.0,
        1.0 / 30240.0,
        1.0 / 1209600.0,
        1.0 / 47900160.0,
        691.0 / 1307674368000.0,
        1.0 / 74724249600.0,
    ];

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Branch {
        Taylor,
        Series,
        Closed,
    }

    pub fn branch(theta: f64) -> Branch {
        if theta < SMALL_ANGLE {
            Branch::Taylor
        } else if theta < SERIES_ANGLE {
            Branch::Series
        } else {
            Branch::Closed
        }
    }

    fn eval(theta: f64, table: &[f64; 7], closed: impl Fn(f64) -> f64, br: Branch) -> f64 {
        let t2 = theta * theta;
        match br {
            Branch::Taylor => table[0] + table[1] * t2,
            Branch::Series => series(table, t2),
            Branch::Closed => closed(theta),
        }
    }

    /// sin(t)/t
    pub fn a_with(t: f64, br: Branch) -> f64 {
        eval(t, &A, |t| t.sin() / t, br)
    }
    /// (1 - cos t)/t^2
    pub fn b_with(t: f64, br: Branch) -> f64 {
        eval(t, &B, |t| (1.0 - t.cos()) / (t * t), br)
    }
    /// (t - sin t)/t^3
    pub fn c_with(t: f64, br: Branch) -> f64 {
        eval(t, &C, |t| (t - t.sin()) / (t * t * t), br)
    }
    /// (t^2 + 2 cos t - 2)/(2 t^4)
    pub fn d_with(t: f64, br: Branch) -> f64 {
        eval(t, &D, |t| (t * t + 2.0 * t.cos() - 2.0) / (2.0 * t.powi(4)), br)
    }
    /// (2t - 3 sin t + t cos t)/(2 t^5)
    pub fn e_with(t: f64, br: Branch) -> f64 {
        eval(
            t,
            &E,
            |t| (2.0 * t - 3.0 * t.sin() + t * t.cos()) / (2.0 * t.powi(5)),
            br,
        )
    }
    /// (1 - t sin t / (2 (1 - cos t)))/t^2
    pub fn f_with(t: f64, br: Branch) -> f64 {
        eval(
            t,
            &F,
            |t| (1.0 - t * t.sin() / (2.0 * (1.0 - t.cos()))) / (t * t),
            br,
        )
    }

    pub fn a(t: f64) -> f64 {
        a_with(t, branch(t))
    }
    pub fn b(t: f64) -> f64 {
        b_with(t, branch(t))
    }
    pub fn c(t: f64) -> f64 {
        c_with(t, branch(t))
    }
    pub fn d(t: f64) -> f64 {
        d_with(t, branch(t))
    }
    pub fn e(t: f64) -> f64 {
        e_with(t, branch(t))
    }
    pub fn f(t: f64) -> f64 {
        f_with(t, branch(t))
    }
}

/// Left Jacobian of SO(3), `I + b [w]x + c [w]x^2`.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let t = w.norm();
    let k = skew(w);
    Matrix3::identity() + k * coeff::b(t) + k * k * coeff::c(t)
}

pub fn so3_left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let t = w.norm();
    let k = skew(w);
    Matrix3::identity() - k * 0.5 + k * k * coeff::f(t)
}

pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let t = w.norm();
    let k = skew(w);
    Matrix3::identity() + k * coeff::a(t) + k * k * coeff::b(t)
}

pub fn exp_se3(x: &Twist) -> Pose {
    let t = x.angle();
    let k = skew(&x.omega);
    let k2 = k * k;
    let (a, b, c) = (coeff::a(t), coeff::b(t), coeff::c(t));
    let rot = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Pose::new(rot, v * x.v)
}

fn check_chart(trace: f64) -> Result<()> {
    if trace > -1.0 + NEAR_PI_TRACE {
        Ok(())
    } else {
        Err(Error::AngleNearPi { trace })
    }
}

/// Rotation angle encoded in a twist must stay inside the log chart.
fn check_twist_chart(x: &Twist) -> Result<()> {
    let t = x.angle();
    check_chart(1.0 + 2.0 * t.cos()).and_then(|_| {
        if t < std::f64::consts::PI {
            Ok(())
        } else {
            Err(Error::AngleNearPi {
                trace: 1.0 + 2.0 * t.cos(),
            })
        }
    })
}

pub fn log_se3(g: &Pose) -> Result<Twist> {
    let r = &g.rotation;
    let tr = r.trace();
    check_chart(tr)?;
    let s = unskew(&(r - r.transpose())) * 0.5;
    let cos_t = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.norm().atan2(cos_t);
    let omega = s / coeff::a(theta);
    let v = so3_left_jacobian_inverse(&omega) * g.translation;
    Ok(Twist::new(omega, v))
}

fn q_block(x: &Twist) -> Matrix3<f64> {
    let t = x.angle();
    let w = skew(&x.omega);
    let v = skew(&x.v);
    let wv = w * v;
    let vw = v * w;
    let wvw = wv * w;
    let ww = w * w;
    0.5 * v
        + coeff::c(t) * (wv + vw + wvw)
        + coeff::d(t) * (ww * v + vw * w - 3.0 * wvw)
        + coeff::e(t) * (wvw * w + w * wvw)
}

/// Left Jacobian: `exp(x + d) ~ exp(J_l(x) d) exp(x)`.
pub fn left_jacobian(x: &Twist) -> Matrix6x {
    let j = so3_left_jacobian(&x.omega);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&q_block(x));
    m
}

/// Right Jacobian: `exp(x + d) ~ exp(x) exp(J_r(x) d)`.
pub fn right_jacobian(x: &Twist) -> Matrix6x {
    left_jacobian(&-*x)
}

pub fn left_jacobian_inverse(x: &Twist) -> Result<Matrix6x> {
    check_twist_chart(x)?;
    let ji = so3_left_jacobian_inverse(&x.omega);
    let q = q_block(x);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(ji * q * ji)));
    Ok(m)
}

pub fn right_jacobian_inverse(x: &Twist) -> Result<Matrix6x> {
    left_jacobian_inverse(&-*x)
}

/// Relative twist `log(a^-1 b)`.
pub fn between(a: &Pose, b: &Pose) -> Result<Twist> {
    log_se3(&(a.inverse() * *b))
}
