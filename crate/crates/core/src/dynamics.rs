//! Generalized Lagrangian dynamics of the arm + rod system.
//!
//! ```text
//! M(q) qdd + C(q, qd) qd + K q + D qd = F_grav(q) + tau
//! ```
//!
//! All rod integrals use 4-point Gauss-Legendre quadrature per interval over
//! the frames produced by [`crate::kinematics::sweep`]. The arm joints follow
//! the quintic reference exactly; `tau` is the constraint force that makes
//! them do so and only the soft block of the system is solved.
//!
//! The velocity-product force is assembled per station as
//! `J^T (M_s Jdot qd - ad(eta)^T M_s eta)` with `eta = J qd`, which is the
//! Christoffel term of the kinetic energy written in body coordinates.

use nalgebra::{SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::control::{reference_trajectory, ControlInput, JointMotion, HORIZON};
use crate::error::{Error, Result};
use crate::kinematics::{material_stations, sweep, FrameSample};
use crate::model::{soft_part, Config, RodModel, SoftVector, DOF, RIGID_DOF, SOFT_DOF};
use crate::se3::{ad, Twist};

pub type MassMatrix = SMatrix<f64, DOF, DOF>;
pub type SoftMatrix = SMatrix<f64, SOFT_DOF, SOFT_DOF>;

/// Integration step (s).
pub const TIME_STEP: f64 = 1e-3;
/// Samples per trajectory, including t = 0.
pub const N_SAMPLES: usize = 501;
/// Estimated condition number of the soft mass block above which a solve fails.
pub const MAX_CONDITION: f64 = 1e12;
/// |q| or |qd| beyond which a run counts as diverged.
const DIVERGENCE_LIMIT: f64 = 1e6;

const GL4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_8,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_8,
];

/// Generalized positions, velocities and time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemState {
    pub q: Config,
    pub qd: Config,
    pub t: f64,
}

impl SystemState {
    pub fn rest() -> Self {
        Self {
            q: Config::zeros(),
            qd: Config::zeros(),
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|x| x.is_finite()) && self.t.is_finite()
    }
}

/// Per-model quadrature tables and the configuration-independent matrices.
#[derive(Clone, Debug)]
pub struct Dynamics {
    pub model: RodModel,
    stations: Vec<f64>,
    /// Physical quadrature weights (m).
    weights: Vec<f64>,
    inertia: Vec<[f64; 6]>,
    stiffness: SoftMatrix,
    damping: SoftMatrix,
}

/// All force terms at one state.
#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    pub mass: MassMatrix,
    /// `C(q, qd) qd`
    pub coriolis: Config,
    /// `K(q)`; zero in the rigid rows.
    pub stiffness: Config,
    /// `D qd`; zero in the rigid rows.
    pub damping: Config,
    /// Generalized gravity force.
    pub gravity: Config,
}

impl DynamicsTerms {
    /// `-C qd - K - D qd + F_grav`
    pub fn generalized_force(&self) -> Config {
        self.gravity - self.coriolis - self.stiffness - self.damping
    }
}

/// Kinetic, elastic and gravitational energy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Energy {
    pub kinetic: f64,
    pub elastic: f64,
    /// Measured from the lowest height any rod point can reach.
    pub gravitational: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.kinetic + self.elastic + self.gravitational
    }
}

fn embed_soft(v: &SoftVector) -> Config {
    let mut out = Config::zeros();
    out.fixed_rows_mut::<SOFT_DOF>(RIGID_DOF).copy_from(v);
    out
}

impl Dynamics {
    pub fn new(model: &RodModel) -> Result<Self> {
        model.validate()?;
        let n = model.n_intervals;
        let h = model.interval();
        let mut stations = Vec::with_capacity(4 * n);
        let mut weights = Vec::with_capacity(4 * n);
        for i in 0..n {
            let s_lo = i as f64 * h;
            for (x, w) in GL4_NODES.iter().zip(GL4_WEIGHTS) {
                stations.push(s_lo + 0.5 * h * (1.0 + x));
                weights.push(0.5 * h * w * model.rod_length);
            }
        }
        let inertia: Vec<[f64; 6]> = stations.iter().map(|&s| model.inertia_density(s)).collect();
        let mut stiffness = SoftMatrix::zeros();
        let mut damping = SoftMatrix::zeros();
        for (&s, &w) in stations.iter().zip(&weights) {
            let phi = model.basis.evaluate(s);
            let k = Vector6::from(model.section_stiffness(s));
            let d = Vector6::from(model.section_viscosity(s));
            stiffness += phi.transpose() * SMatrix::from_diagonal(&k) * phi * w;
            damping += phi.transpose() * SMatrix::from_diagonal(&d) * phi * w;
        }
        Ok(Self {
            model: model.clone(),
            stations,
            weights,
            inertia,
            stiffness,
            damping,
        })
    }

    /// Constant soft stiffness matrix, `K(q) = K_ss q_soft`.
    pub fn stiffness_matrix(&self) -> &SoftMatrix {
        &self.stiffness
    }

    pub fn damping_matrix(&self) -> &SoftMatrix {
        &self.damping
    }

    pub fn quadrature(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.stations.iter().copied().zip(self.weights.iter().copied())
    }

    fn samples(&self, q: &Config, qd: Option<&Config>) -> Result<Vec<FrameSample>> {
        sweep(&self.model, q, qd, &self.stations)
    }

    pub fn mass_matrix(&self, q: &Config) -> Result<MassMatrix> {
        let samples = self.samples(q, None)?;
        let mut m = MassMatrix::zeros();
        for ((smp, w), rho) in samples.iter().zip(&self.weights).zip(&self.inertia) {
            let weighted = SMatrix::<f64, 6, 6>::from_diagonal(&Vector6::from(*rho)) * smp.jacobian;
            m.gemm_tr(*w, &smp.jacobian, &weighted, 1.0);
        }
        Ok(m)
    }

    pub fn terms(&self, q: &Config, qd: &Config) -> Result<DynamicsTerms> {
        let samples = self.samples(q, Some(qd))?;
        let g = self.model.gravity_vector();
        let mut mass = MassMatrix::zeros();
        let mut coriolis = Config::zeros();
        let mut gravity = Config::zeros();
        for ((smp, &w), rho) in samples.iter().zip(&self.weights).zip(&self.inertia) {
            let rho = Vector6::from(*rho);
            let weighted = SMatrix::<f64, 6, 6>::from_diagonal(&rho) * smp.jacobian;
            mass.gemm_tr(w, &smp.jacobian, &weighted, 1.0);
            let momentum = rho.component_mul(&smp.velocity);
            let wrench = rho.component_mul(&smp.bias)
                - ad(&Twist::from_vector(&smp.velocity)).transpose() * momentum;
            coriolis.gemv_tr(w, &smp.jacobian, &wrench, 1.0);
            let local_g = smp.pose.rotation.transpose() * g;
            let gw = Vector6::new(0.0, 0.0, 0.0, rho[3] * local_g.x, rho[4] * local_g.y, rho[5] * local_g.z);
            gravity.gemv_tr(w, &smp.jacobian, &gw, 1.0);
        }
        Ok(DynamicsTerms {
            mass,
            coriolis,
            stiffness: embed_soft(&(self.stiffness * soft_part(q))),
            damping: embed_soft(&(self.damping * soft_part(qd))),
            gravity,
        })
    }

    pub fn energy(&self, q: &Config, qd: &Config) -> Result<Energy> {
        let samples = self.samples(q, Some(qd))?;
        let g = self.model.gravity_vector();
        let reach = self.model.workspace_radius() / 1.1;
        let mut kinetic = 0.0;
        let mut gravitational = 0.0;
        for ((smp, &w), rho) in samples.iter().zip(&self.weights).zip(&self.inertia) {
            let rho = Vector6::from(*rho);
            kinetic += 0.5 * w * smp.velocity.dot(&rho.component_mul(&smp.velocity));
            // Potential of the section mass relative to the lowest reachable point.
            gravitational += w * rho[3] * (g.norm() * reach - g.dot(&smp.pose.translation));
        }
        let qs = soft_part(q);
        Ok(Energy {
            kinetic,
            elastic: 0.5 * qs.dot(&(self.stiffness * qs)),
            gravitational,
        })
    }

    /// Accelerations with the arm joints following `arm`.
    pub fn accelerations(&self, q: &Config, qd: &Config, arm: &JointMotion) -> Result<Config> {
        let terms = self.terms(q, qd)?;
        let mut qdd_rigid = SVector::<f64, RIGID_DOF>::zeros();
        for j in 0..RIGID_DOF {
            qdd_rigid[j] = arm.accel[j];
        }
        let m_ss = terms.mass.fixed_view::<SOFT_DOF, SOFT_DOF>(RIGID_DOF, RIGID_DOF).into_owned();
        let m_sr = terms.mass.fixed_view::<SOFT_DOF, RIGID_DOF>(RIGID_DOF, 0);
        let rhs = soft_part(&terms.generalized_force()) - m_sr * qdd_rigid;
        let chol = m_ss.cholesky().ok_or(Error::SolverSingular {
            condition: f64::INFINITY,
        })?;
        let diag = chol.l_dirty().diagonal();
        let condition = (diag.max() / diag.min()).powi(2);
        if !(condition.is_finite() && condition <= MAX_CONDITION) {
            return Err(Error::SolverSingular { condition });
        }
        let qdd_soft = chol.solve(&rhs);
        let mut qdd = embed_soft(&qdd_soft);
        qdd.fixed_rows_mut::<RIGID_DOF>(0).copy_from(&qdd_rigid);
        Ok(qdd)
    }

    /// Arm-joint constraint forces that realize the prescribed motion.
    pub fn constraint_forces(&self, q: &Config, qd: &Config, qdd: &Config) -> Result<SVector<f64, RIGID_DOF>> {
        let terms = self.terms(q, qd)?;
        let residual = terms.mass * qdd - terms.generalized_force();
        Ok(residual.fixed_rows::<RIGID_DOF>(0).into_owned())
    }

    /// One classic RK4 step of the soft coordinates; the arm rows are set
    /// from `arm_at(t)` at every stage.
    fn rk4_step(
        &self,
        state: &SystemState,
        dt: f64,
        arm_at: &dyn Fn(f64) -> Result<JointMotion>,
    ) -> Result<SystemState> {
        let with_arm = |q: &Config, qd: &Config, t: f64| -> Result<(Config, Config, JointMotion)> {
            let arm = arm_at(t)?;
            let mut q = *q;
            let mut qd = *qd;
            for j in 0..RIGID_DOF {
                q[j] = arm.angle[j];
                qd[j] = arm.rate[j];
            }
            Ok((q, qd, arm))
        };
        let deriv = |q: &Config, qd: &Config, t: f64| -> Result<(Config, Config)> {
            let (q, qd, arm) = with_arm(q, qd, t)?;
            Ok((qd, self.accelerations(&q, &qd, &arm)?))
        };
        let t = state.t;
        let (k1q, k1v) = deriv(&state.q, &state.qd, t)?;
        let (k2q, k2v) = deriv(&(state.q + k1q * (dt / 2.0)), &(state.qd + k1v * (dt / 2.0)), t + dt / 2.0)?;
        let (k3q, k3v) = deriv(&(state.q + k2q * (dt / 2.0)), &(state.qd + k2v * (dt / 2.0)), t + dt / 2.0)?;
        let (k4q, k4v) = deriv(&(state.q + k3q * dt), &(state.qd + k3v * dt), t + dt)?;
        let q = state.q + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0);
        let qd = state.qd + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0);
        let (q, qd, _) = with_arm(&q, &qd, t + dt)?;
        Ok(SystemState { q, qd, t: t + dt })
    }

    /// Integrates with the arm joints locked at their current angles.
    pub fn integrate_locked(&self, start: &SystemState, duration: f64, dt: f64) -> Result<SystemState> {
        let lock = JointMotion {
            angle: [start.q[0], start.q[1]],
            rate: [0.0; RIGID_DOF],
            accel: [0.0; RIGID_DOF],
        };
        let arm_at = move |_t: f64| Ok(lock);
        let steps = (duration / dt).round() as usize;
        let mut state = *start;
        for _ in 0..steps {
            state = self.rk4_step(&state, dt, &arm_at)?;
            check_state(&state)?;
        }
        Ok(state)
    }

    pub fn simulate(&self, control: &ControlInput) -> Trajectory {
        self.try_simulate(control).unwrap_or_else(|_| Trajectory::empty(*control, self.model.n_intervals + 1))
    }

    /// Like [`Dynamics::simulate`] but reports why a run failed.
    pub fn try_simulate(&self, control: &ControlInput) -> Result<Trajectory> {
        control.validate()?;
        let stations = material_stations(&self.model);
        let mut traj = Trajectory::empty(*control, stations.len());
        self.run(control, &stations, &mut traj)?;
        traj.valid = true;
        Ok(traj)
    }

    fn run(&self, control: &ControlInput, stations: &[f64], traj: &mut Trajectory) -> Result<()> {
        let arm_at = |t: f64| reference_trajectory(control, t.min(HORIZON));
        let n_points = stations.len();
        let mut state = SystemState::rest();
        for i in 0..N_SAMPLES {
            if i > 0 {
                state = self.rk4_step(&state, TIME_STEP, &arm_at)?;
                state.t = i as f64 * TIME_STEP;
                check_state(&state)?;
            }
            traj.q[i] = state.q;
            traj.qd[i] = state.qd;
            let samples = sweep(&self.model, &state.q, Some(&state.qd), stations)?;
            for (k, smp) in samples.iter().enumerate() {
                traj.positions[i * n_points + k] = smp.pose.translation;
                traj.velocities[i * n_points + k] = smp.linear_velocity();
            }
        }
        Ok(())
    }
}

fn check_state(state: &SystemState) -> Result<()> {
    if !state.is_finite() {
        return Err(Error::InvalidTrajectory(format!("non-finite state at t = {}", state.t)));
    }
    let worst = state.q.amax().max(state.qd.amax());
    if worst > DIVERGENCE_LIMIT {
        return Err(Error::InvalidTrajectory(format!("diverged at t = {} (|x| = {worst:.3e})", state.t)));
    }
    Ok(())
}

/// Simulated record of one control.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub q: Vec<Config>,
    pub qd: Vec<Config>,
    /// Row-major `[sample][point]` material-point positions (m).
    pub positions: Vec<Vector3<f64>>,
    /// Row-major `[sample][point]` world velocities (m/s).
    pub velocities: Vec<Vector3<f64>>,
    pub n_points: usize,
    pub control: ControlInput,
    pub goal: Vector3<f64>,
    pub valid: bool,
}

impl Trajectory {
    pub fn empty(control: ControlInput, n_points: usize) -> Self {
        Self {
            times: (0..N_SAMPLES).map(|i| i as f64 * TIME_STEP).collect(),
            q: vec![Config::zeros(); N_SAMPLES],
            qd: vec![Config::zeros(); N_SAMPLES],
            positions: vec![Vector3::zeros(); N_SAMPLES * n_points],
            velocities: vec![Vector3::zeros(); N_SAMPLES * n_points],
            n_points,
            control,
            goal: Vector3::zeros(),
            valid: false,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn position(&self, sample: usize, point: usize) -> Vector3<f64> {
        self.positions[sample * self.n_points + point]
    }

    pub fn velocity(&self, sample: usize, point: usize) -> Vector3<f64> {
        self.velocities[sample * self.n_points + point]
    }

    pub fn tip_positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        (0..self.len()).map(|i| self.position(i, self.n_points - 1))
    }

    pub fn tip_speeds(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|i| self.velocity(i, self.n_points - 1).norm())
    }
}

pub fn mass_matrix(model: &RodModel, q: &Config) -> Result<MassMatrix> {
    Dynamics::new(model)?.mass_matrix(q)
}

pub fn coriolis_force(model: &RodModel, q: &Config, qd: &Config) -> Result<Config> {
    Ok(Dynamics::new(model)?.terms(q, qd)?.coriolis)
}

pub fn stiffness_force(model: &RodModel, q: &Config) -> Result<Config> {
    let dynamics = Dynamics::new(model)?;
    Ok(embed_soft(&(dynamics.stiffness * soft_part(q))))
}

pub fn damping_force(model: &RodModel, _q: &Config, qd: &Config) -> Result<Config> {
    let dynamics = Dynamics::new(model)?;
    Ok(embed_soft(&(dynamics.damping * soft_part(qd))))
}

/// Accelerations at `state` under `control`; the arm rows are the reference accelerations.
pub fn forward_dynamics(model: &RodModel, state: &SystemState, control: &ControlInput) -> Result<Config> {
    let arm = reference_trajectory(control, state.t)?;
    Dynamics::new(model)?.accelerations(&state.q, &state.qd, &arm)
}

/// RK4 at 1 ms over the 0.5 s horizon. Failures mark the trajectory invalid.
pub fn simulate(model: &RodModel, control: &ControlInput) -> Trajectory {
    match Dynamics::new(model) {
        Ok(d) => d.simulate(control),
        Err(_) => Trajectory::empty(*control, model.n_intervals + 1),
    }
}

/// Model description stored with derived artifacts.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SimulationSettings {
    pub time_step: f64,
    pub n_samples: usize,
    pub horizon: f64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            time_step: TIME_STEP,
            n_samples: N_SAMPLES,
            horizon: HORIZON,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, scale: f64) -> (Config, Config) {
        let q = Config::from_fn(|i, _| {
            if i < RIGID_DOF {
                rng.random_range(-1.5..1.0)
            } else {
                rng.random_range(-scale..scale)
            }
        });
        let qd = Config::from_fn(|_, _| rng.random_range(-3.0..3.0));
        (q, qd)
    }

    fn quiet_model() -> RodModel {
        RodModel {
            damping: [0.0; 6],
            ..RodModel::default()
        }
    }

    #[test]
    fn mass_matrix_is_symmetric_positive_definite() {
        let d = Dynamics::new(&RodModel::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (q, _) = random_state(&mut rng, 3.0);
            let m = d.mass_matrix(&q).unwrap();
            assert!((m - m.transpose()).amax() < 1e-10 * m.amax());
            let dense = DMatrix::from_fn(DOF, DOF, |i, j| m[(i, j)]);
            let min = dense.symmetric_eigen().eigenvalues.min();
            assert!(min > 0.0, "min eigenvalue {min:e}");
        }
    }

    #[test]
    fn reference_strain_is_stress_free() {
        let model = RodModel::default();
        let mut q = Config::zeros();
        q[0] = 0.7;
        q[1] = -0.4;
        assert_eq!(stiffness_force(&model, &q).unwrap(), Config::zeros());
        q[5] = 0.3;
        assert!(stiffness_force(&model, &q).unwrap().amax() > 0.0);
    }

    /// Straight rod along x: each joint sees the rod as a pendulum.
    #[test]
    fn straight_rod_rigid_block_matches_pendulum_inertia() {
        let model = RodModel::default();
        let m = mass_matrix(&model, &Config::zeros()).unwrap();
        let n = 200_000;
        let len = model.rod_length;
        let mut about_z = 0.0;
        let mut about_y = 0.0;
        for i in 0..n {
            let s = (i as f64 + 0.5) / n as f64;
            let x = s * len;
            let sec = model.section(s);
            let rho = model.density;
            about_z += rho * (sec.area * x * x + sec.inertia) * len / n as f64;
            about_y += rho * (sec.area * x * x + sec.inertia) * len / n as f64;
        }
        assert!((m[(0, 0)] - about_z).abs() < 1e-6, "{} vs {}", m[(0, 0)], about_z);
        assert!((m[(1, 1)] - about_y).abs() < 1e-6);
        assert!(m[(0, 1)].abs() < 1e-12);
    }

    /// `C qd = Mdot qd - 1/2 d/dq (qd^T M qd)` with both derivatives by central differences.
    #[test]
    fn velocity_product_matches_christoffel_form() {
        let d = Dynamics::new(&RodModel::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..5 {
            let (q, qd) = random_state(&mut rng, 2.0);
            let m_dot = (d.mass_matrix(&(q + qd * h)).unwrap() - d.mass_matrix(&(q - qd * h)).unwrap()) / (2.0 * h);
            let mut grad = Config::zeros();
            for i in 0..DOF {
                let mut e = Config::zeros();
                e[i] = h;
                let up = qd.dot(&(d.mass_matrix(&(q + e)).unwrap() * qd));
                let down = qd.dot(&(d.mass_matrix(&(q - e)).unwrap() * qd));
                grad[i] = (up - down) / (2.0 * h);
            }
            let oracle = m_dot * qd - grad * 0.5;
            let got = d.terms(&q, &qd).unwrap().coriolis;
            let err = (got - oracle).amax() / oracle.amax();
            assert!(err < 1e-5, "relative error {err:e}");
        }
    }

    #[test]
    fn rest_without_gravity_is_equilibrium() {
        let model = RodModel {
            gravity: [0.0; 3],
            ..RodModel::default()
        };
        let qdd = forward_dynamics(&model, &SystemState::rest(), &ControlInput::zero()).unwrap();
        assert_eq!(qdd, Config::zeros());
    }

    #[test]
    fn initial_sag_matches_direct_solve() {
        let model = RodModel::default();
        let d = Dynamics::new(&model).unwrap();
        let q = Config::zeros();
        let qdd = forward_dynamics(&model, &SystemState::rest(), &ControlInput::zero()).unwrap();
        let terms = d.terms(&q, &Config::zeros()).unwrap();
        let m_ss = DMatrix::from_fn(SOFT_DOF, SOFT_DOF, |i, j| terms.mass[(i + 2, j + 2)]);
        let rhs = DVector::from_fn(SOFT_DOF, |i, _| terms.gravity[i + 2] - terms.stiffness[i + 2]);
        let oracle = m_ss.lu().solve(&rhs).unwrap();
        for i in 0..SOFT_DOF {
            assert!((qdd[i + 2] - oracle[i]).abs() < 1e-9 * oracle.amax());
        }
        assert!(oracle.amax() > 1.0);
    }

    #[test]
    fn conserves_energy_without_damping() {
        let d = Dynamics::new(&quiet_model()).unwrap();
        let traj = d.simulate(&ControlInput::zero());
        assert!(traj.valid);
        let e0 = d.energy(&traj.q[0], &traj.qd[0]).unwrap().total();
        for i in 1..=100 {
            let e = d.energy(&traj.q[i], &traj.qd[i]).unwrap().total();
            assert!(((e - e0) / e0).abs() < 1e-6, "sample {i}: {e} vs {e0}");
        }
    }

    fn power(d: &Dynamics, traj: &Trajectory, control: &ControlInput, i: usize) -> f64 {
        let (q, qd) = (traj.q[i], traj.qd[i]);
        let arm = reference_trajectory(control, traj.times[i]).unwrap();
        let qdd = d.accelerations(&q, &qd, &arm).unwrap();
        let tau = d.constraint_forces(&q, &qd, &qdd).unwrap();
        let dissipated = soft_part(&qd).dot(&(d.damping_matrix() * soft_part(&qd)));
        tau.dot(&qd.fixed_rows::<RIGID_DOF>(0)) - dissipated
    }

    fn check_power_balance(model: &RodModel, tolerance: f64) {
        let d = Dynamics::new(model).unwrap();
        let control = ControlInput::new([[0.3, 0.9, -0.4, 0.2], [-0.2, 0.1, -0.5, 0.0]]).unwrap();
        let traj = d.simulate(&control);
        assert!(traj.valid);
        let window = 50;
        let powers: Vec<f64> = (0..=2 * window).map(|i| power(&d, &traj, &control, i)).collect();
        let peak = powers.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        let energy = |i: usize| d.energy(&traj.q[i], &traj.qd[i]).unwrap().total();
        for start in [0, window] {
            // Simpson over the window's 1 ms samples.
            let work: f64 = (0..window / 2)
                .map(|k| {
                    let i = start + 2 * k;
                    (powers[i] + 4.0 * powers[i + 1] + powers[i + 2]) * TIME_STEP / 3.0
                })
                .sum();
            let change = energy(start + window) - energy(start);
            let duration = window as f64 * TIME_STEP;
            let mismatch = (change - work).abs() / duration;
            assert!(mismatch < tolerance * peak, "window {start}: mean mismatch {mismatch:e} vs peak {peak:e}");
        }
    }

    #[test]
    fn power_balance_with_damping() {
        check_power_balance(&RodModel::default(), 1e-2);
    }

    #[test]
    fn power_balance_without_damping() {
        check_power_balance(&quiet_model(), 1e-3);
    }

    #[test]
    fn prescribed_rows_and_clamped_start() {
        let control = ControlInput::new([[0.5, 1.0, -0.5, 0.0], [0.0, -0.3, 0.2, 0.1]]).unwrap();
        let traj = simulate(&RodModel::default(), &control);
        assert!(traj.valid);
        assert_eq!(traj.len(), N_SAMPLES);
        assert_eq!(traj.q[0], Config::zeros());
        assert_eq!(traj.qd[0], Config::zeros());
        for i in (0..N_SAMPLES).step_by(50) {
            let arm = reference_trajectory(&control, traj.times[i]).unwrap();
            assert_eq!(traj.q[i][0], arm.angle[0]);
            assert_eq!(traj.qd[i][1], arm.rate[1]);
        }
        let zero = simulate(&RodModel::default(), &ControlInput::zero());
        assert!(zero.q.iter().all(|q| q[0] == 0.0 && q[1] == 0.0));
        // The rope sags.
        assert!(zero.tip_positions().last().unwrap().z < -0.01);
    }

    #[test]
    fn simulation_is_deterministic() {
        let control = ControlInput::new([[0.2, 0.4, 0.6, 0.1], [-0.1, -0.2, 0.0, 0.0]]).unwrap();
        let model = RodModel::default();
        assert_eq!(simulate(&model, &control), simulate(&model, &control));
    }

    #[test]
    fn out_of_bounds_control_is_invalid() {
        let control = ControlInput {
            theta: [[4.0, 0.0, 0.0, 0.0], [0.0; 4]],
        };
        assert!(!simulate(&RodModel::default(), &control).valid);
    }

    #[test]
    fn divergence_is_reported() {
        let model = RodModel {
            damping: [5e4; 6],
            ..RodModel::default()
        };
        let traj = simulate(&model, &ControlInput::zero());
        assert!(!traj.valid);
    }
}
