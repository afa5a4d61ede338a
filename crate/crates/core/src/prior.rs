//! Differentiable goal and boundary-condition losses over generalized
//! coordinate trajectories.
//!
//! Trajectories are `N x 20` matrices, one configuration per row.

use nalgebra::{DMatrix, RowSVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{tip_position, tip_sample};
use crate::model::{Config, RodModel, DOF};
use crate::se3::{between, right_jacobian_inverse, Pose};

/// Which trajectory row is scored against the goal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrikePolicy {
    /// Row with the smallest tip-goal distance.
    #[default]
    MinDistanceOverTime,
    FixedIndex(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalTask {
    pub target_position: Vector3<f64>,
    /// When set, the goal loss is the squared SE(3) log distance to this pose.
    pub target_pose: Option<Pose>,
    pub strike_policy: StrikePolicy,
}

impl GoalTask {
    /// Point goal; must lie inside the model's workspace sphere.
    pub fn new(model: &RodModel, target: Vector3<f64>) -> Result<Self> {
        let radius = model.workspace_radius();
        let dist = target.norm();
        if !(dist <= radius) {
            return Err(Error::OutOfDomain {
                what: "goal distance from base",
                value: dist,
                lo: 0.0,
                hi: radius,
            });
        }
        Ok(Self {
            target_position: target,
            target_pose: None,
            strike_policy: StrikePolicy::default(),
        })
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.target_position = pose.translation;
        self.target_pose = Some(pose);
        self
    }

    pub fn with_strike_policy(mut self, policy: StrikePolicy) -> Self {
        self.strike_policy = policy;
        self
    }
}

/// Goal loss at a single configuration.
pub fn loss_pos(model: &RodModel, q: &Config, goal: &GoalTask) -> Result<f64> {
    match &goal.target_pose {
        None => Ok((tip_position(model, q)? - goal.target_position).norm_squared()),
        Some(target) => {
            let tip = tip_sample(model, q)?;
            Ok(between(target, &tip.pose)?.to_vector().norm_squared())
        }
    }
}

/// Gradient of [`loss_pos`] with respect to the 20 generalized coordinates.
pub fn grad_loss_pos(model: &RodModel, q: &Config, goal: &GoalTask) -> Result<Config> {
    let tip = tip_sample(model, q)?;
    let row: RowSVector<f64, DOF> = match &goal.target_pose {
        None => {
            let err = tip.pose.translation - goal.target_position;
            (err.transpose() * tip.position_jacobian()) * 2.0
        }
        Some(target) => {
            let delta = between(target, &tip.pose)?;
            let jr_inv = right_jacobian_inverse(&delta)?;
            (delta.to_vector().transpose() * jr_inv * tip.jacobian) * 2.0
        }
    };
    Ok(row.transpose())
}

/// Per-term weights of the boundary-condition loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbcWeights {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

impl KbcWeights {
    /// `(1, dt^2, dt^4)`: all three terms in units of the coordinates squared.
    pub fn normalized(dt: f64) -> Self {
        Self {
            position: 1.0,
            velocity: dt * dt,
            acceleration: dt.powi(4),
        }
    }
}

fn check_trajectory(traj: &DMatrix<f64>, min_rows: usize) -> Result<()> {
    if traj.ncols() != DOF {
        return Err(Error::ShapeMismatch {
            expected: format!("N x {DOF} trajectory"),
            got: format!("{} x {}", traj.nrows(), traj.ncols()),
        });
    }
    if traj.nrows() < min_rows {
        return Err(Error::TooShort {
            needed: min_rows,
            got: traj.nrows(),
        });
    }
    Ok(())
}

fn row(traj: &DMatrix<f64>, i: usize) -> Config {
    Config::from_iterator(traj.row(i).iter().copied())
}

/// Residuals `(Q0, (Q1-Q0)/dt, (Q2-2Q1+Q0)/dt^2)`.
fn kbc_residuals(traj: &DMatrix<f64>, dt: f64) -> [Config; 3] {
    let (q0, q1, q2) = (row(traj, 0), row(traj, 1), row(traj, 2));
    [q0, (q1 - q0) / dt, (q2 - q1 * 2.0 + q0) / (dt * dt)]
}

pub fn loss_kbc(traj: &DMatrix<f64>, dt: f64, weights: &KbcWeights) -> Result<f64> {
    check_trajectory(traj, 3)?;
    let [p, v, a] = kbc_residuals(traj, dt);
    Ok(weights.position * p.norm_squared()
        + weights.velocity * v.norm_squared()
        + weights.acceleration * a.norm_squared())
}

pub fn grad_loss_kbc(traj: &DMatrix<f64>, dt: f64, weights: &KbcWeights) -> Result<DMatrix<f64>> {
    check_trajectory(traj, 3)?;
    let [p, v, a] = kbc_residuals(traj, dt);
    let gp = p * (2.0 * weights.position);
    let gv = v * (2.0 * weights.velocity / dt);
    let ga = a * (2.0 * weights.acceleration / (dt * dt));
    let mut grad = DMatrix::zeros(traj.nrows(), DOF);
    let rows = [gp - gv + ga, gv - ga * 2.0, ga];
    for (i, r) in rows.iter().enumerate() {
        grad.row_mut(i).copy_from(&r.transpose());
    }
    Ok(grad)
}

/// Row whose configuration is scored by the goal loss.
pub fn strike_index(model: &RodModel, traj: &DMatrix<f64>, goal: &GoalTask) -> Result<usize> {
    check_trajectory(traj, 1)?;
    match goal.strike_policy {
        StrikePolicy::FixedIndex(k) if k < traj.nrows() => Ok(k),
        StrikePolicy::FixedIndex(k) => Err(Error::validation(
            "strike_policy",
            format!("index {k} outside a {}-row trajectory", traj.nrows()),
        )),
        StrikePolicy::MinDistanceOverTime => {
            let mut best = (f64::INFINITY, 0);
            for i in 0..traj.nrows() {
                let d = (tip_position(model, &row(traj, i))? - goal.target_position).norm();
                if d < best.0 {
                    best = (d, i);
                }
            }
            Ok(best.1)
        }
    }
}

/// Goal loss at the strike row plus the boundary-condition loss.
pub fn loss_total(
    model: &RodModel,
    traj: &DMatrix<f64>,
    goal: &GoalTask,
    dt: f64,
    weights: &KbcWeights,
) -> Result<f64> {
    let k = strike_index(model, traj, goal)?;
    Ok(loss_pos(model, &row(traj, k), goal)? + loss_kbc(traj, dt, weights)?)
}

/// Gradient of [`loss_total`] with the strike row held fixed.
pub fn grad_loss_total(
    model: &RodModel,
    traj: &DMatrix<f64>,
    goal: &GoalTask,
    dt: f64,
    weights: &KbcWeights,
) -> Result<DMatrix<f64>> {
    let k = strike_index(model, traj, goal)?;
    let mut grad = grad_loss_kbc(traj, dt, weights)?;
    let g = grad_loss_pos(model, &row(traj, k), goal)?;
    let mut r = grad.row_mut(k);
    r += g.transpose();
    Ok(grad)
}
