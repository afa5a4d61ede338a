//! Denoising loss with a velocity term, the optimizer loop and DDIM sampling.

use nalgebra::{DMatrix, RowDVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig, Normalizer};
use super::params::{Adam, Ema, ParamSet};
use super::schedule::NoiseSchedule;
use crate::dynamics::{Trajectory, TIME_STEP};
use crate::error::{Error, Result};
use crate::model::DOF;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub ema_decay: f64,
    pub batch: usize,
    pub iterations: usize,
    pub lambda_q: f64,
    pub lambda_qd: f64,
    /// Simulation samples per token.
    pub stride: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            ema_decay: 0.9999,
            batch: 16,
            iterations: 20_000,
            lambda_q: 1.0,
            lambda_qd: 1e-4,
            stride: 10,
            grad_clip: 1.0,
            diffusion_steps: 512,
            beta_start: 1e-4,
            beta_end: 2e-2,
            seed: 0,
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if !(self.lambda_q >= 0.0 && self.lambda_qd >= 0.0) {
            return Err(Error::validation("lambda_q/lambda_qd", "must be non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::validation("ema_decay", "must be in [0, 1)"));
        }
        if self.batch == 0 || self.stride == 0 || self.diffusion_steps == 0 {
            return Err(Error::validation("batch/stride/diffusion_steps", "must be positive"));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::validation("beta_start/beta_end", "need 0 < start <= end < 1"));
        }
        Ok(())
    }

    /// Time between tokens (s).
    pub fn token_dt(&self) -> f64 {
        self.stride as f64 * TIME_STEP
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

/// Every `stride`-th configuration, `horizon` rows.
pub fn strided_rows(traj: &Trajectory, stride: usize, horizon: usize) -> Result<DMatrix<f64>> {
    let needed = (horizon - 1) * stride + 1;
    if traj.q.len() < needed {
        return Err(Error::TooShort {
            needed,
            got: traj.q.len(),
        });
    }
    Ok(DMatrix::from_fn(horizon, DOF, |i, j| traj.q[i * stride][j]))
}

/// Linear interpolation of token rows back onto the simulation grid.
pub fn upsample_rows(tokens: &DMatrix<f64>, stride: usize) -> DMatrix<f64> {
    let n = (tokens.nrows() - 1) * stride + 1;
    DMatrix::from_fn(n, tokens.ncols(), |i, j| {
        let k = i / stride;
        let r = (i % stride) as f64 / stride as f64;
        if k + 1 < tokens.nrows() {
            tokens[(k, j)] * (1.0 - r) + tokens[(k + 1, j)] * r
        } else {
            tokens[(k, j)]
        }
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub q: f64,
    pub qd: f64,
}

fn central_difference(x: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n.saturating_sub(2), x.ncols(), |i, j| (x[(i + 2, j)] - x[(i, j)]) / (2.0 * dt))
}

/// `lambda_q mean|pred - target|^2 + lambda_qd mean|D pred - D target|^2` and its
/// gradient with respect to `pred`; `D` is the central difference in time.
pub fn trajectory_loss(
    pred: &DMatrix<f64>,
    target: &DMatrix<f64>,
    lambda_q: f64,
    lambda_qd: f64,
    dt: f64,
) -> (LossComponents, DMatrix<f64>) {
    let diff = pred - target;
    let q = diff.norm_squared() / diff.len() as f64;
    let mut grad = &diff * (2.0 * lambda_q / diff.len() as f64);
    let dv = central_difference(&diff, dt);
    let qd = if dv.is_empty() { 0.0 } else { dv.norm_squared() / dv.len() as f64 };
    if !dv.is_empty() {
        let scale = 2.0 * lambda_qd / dv.len() as f64 / (2.0 * dt);
        for i in 0..dv.nrows() {
            for j in 0..DOF {
                let g = dv[(i, j)] * scale;
                grad[(i + 2, j)] += g;
                grad[(i, j)] -= g;
            }
        }
    }
    (
        LossComponents {
            total: lambda_q * q + lambda_qd * qd,
            q,
            qd,
        },
        grad,
    )
}

/// Normalized training pairs.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub x0: Vec<DMatrix<f64>>,
    pub goals: Vec<RowDVector<f64>>,
    pub normalizer: Normalizer,
}

impl TrainingSet {
    pub fn from_trajectories(trajs: &[Trajectory], config: &TrainConfig) -> Result<Self> {
        let valid: Vec<&Trajectory> = trajs.iter().filter(|t| t.valid).collect();
        if valid.is_empty() {
            return Err(Error::EmptyEval);
        }
        let rows = valid
            .iter()
            .map(|t| strided_rows(t, config.stride, config.denoiser.horizon))
            .collect::<Result<Vec<_>>>()?;
        let goals: Vec<Vector3<f64>> = valid.iter().map(|t| t.goal).collect();
        let normalizer = Normalizer::fit(&rows, &goals);
        Ok(Self::with_normalizer(&rows, &goals, normalizer))
    }

    pub fn with_normalizer(rows: &[DMatrix<f64>], goals: &[Vector3<f64>], normalizer: Normalizer) -> Self {
        Self {
            x0: rows.iter().map(|r| normalizer.encode(r)).collect(),
            goals: goals.iter().map(|g| normalizer.encode_goal(g)).collect(),
            normalizer,
        }
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Loss and parameter gradient for one example at a fixed step and noise.
pub fn example_loss(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &DMatrix<f64>,
    goal: &RowDVector<f64>,
    t: usize,
    eps: &DMatrix<f64>,
    config: &TrainConfig,
) -> Result<(LossComponents, ParamSet)> {
    let xt = schedule.q_sample(x0, t, eps)?;
    let (pred, cache) = net.forward(&xt, goal, t)?;
    let (loss, dpred) = trajectory_loss(&pred, x0, config.lambda_q, config.lambda_qd, config.token_dt());
    let (grads, _) = net.backward(&cache, &dpred);
    Ok((loss, grads))
}

/// Rescales `grads` so its global norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Optimizer state for denoiser training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Denoiser,
    pub adam: Adam,
    pub ema: Ema,
    pub schedule: NoiseSchedule,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossComponents>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Denoiser::new(config.denoiser.clone(), &config.schedule(), &mut rng)?;
        Ok(Self::from_net(config, net, rng))
    }

    /// Continues from existing weights.
    pub fn from_net(config: TrainConfig, net: Denoiser, rng: ChaCha8Rng) -> Self {
        Self {
            adam: Adam::new(&net.params, config.lr),
            ema: Ema::new(&net.params, config.ema_decay),
            schedule: config.schedule(),
            net,
            rng,
            history: Vec::new(),
            config,
        }
    }

    /// One optimizer step on a batch drawn with replacement.
    pub fn step(&mut self, data: &TrainingSet) -> Result<LossComponents> {
        if data.is_empty() {
            return Err(Error::EmptyEval);
        }
        let mut grads = self.net.params.zeros_like();
        let mut total = LossComponents::default();
        let b = self.config.batch;
        for _ in 0..b {
            let i = self.rng.random_range(0..data.len());
            let t = self.rng.random_range(0..self.schedule.steps());
            let eps = standard_normal(&mut self.rng, data.x0[i].nrows(), DOF);
            let (loss, g) = example_loss(&self.net, &self.schedule, &data.x0[i], &data.goals[i], t, &eps, &self.config)?;
            grads.axpy(1.0 / b as f64, &g);
            total.total += loss.total / b as f64;
            total.q += loss.q / b as f64;
            total.qd += loss.qd / b as f64;
        }
        if !total.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "iteration {}: loss {} (q {}, qd {}), gradient norm {}",
                self.history.len(),
                total.total,
                total.q,
                total.qd,
                grads.norm()
            )));
        }
        clip_gradients(&mut grads, self.config.grad_clip);
        self.adam.update(&mut self.net.params, &grads);
        self.ema.update(&self.net.params);
        self.history.push(total);
        Ok(total)
    }

    pub fn train(&mut self, data: &TrainingSet, iterations: usize) -> Result<LossComponents> {
        let mut last = LossComponents::default();
        for _ in 0..iterations {
            last = self.step(data)?;
        }
        Ok(last)
    }

    /// Sampling policy using the averaged weights.
    pub fn policy(&self, normalizer: &Normalizer) -> Result<Policy> {
        Ok(Policy {
            net: Denoiser::with_params(self.config.denoiser.clone(), &self.schedule, &self.ema.weights)?,
            schedule: self.schedule.clone(),
            normalizer: normalizer.clone(),
            config: self.config.clone(),
        })
    }
}

/// Everything needed to sample trajectories for a goal.
#[derive(Clone, Debug)]
pub struct Policy {
    pub net: Denoiser,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
    pub config: TrainConfig,
}

/// One deterministic DDIM move from step `t` to `t_next` given the clean estimate.
pub fn ddim_update(schedule: &NoiseSchedule, xt: &DMatrix<f64>, x0_hat: &DMatrix<f64>, t: usize, t_next: usize) -> DMatrix<f64> {
    let eps_hat = (xt - x0_hat * schedule.alpha(t)) / schedule.sigma(t);
    x0_hat * schedule.alpha(t_next) + eps_hat * schedule.sigma(t_next)
}

impl Policy {
    pub fn horizon(&self) -> usize {
        self.net.config.horizon
    }

    pub fn initial_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        standard_normal(rng, self.horizon(), DOF)
    }

    /// DDIM from `x_init` (normalized); returns the physical trajectory.
    pub fn ddim_from(&self, goal: &Vector3<f64>, n_steps: usize, x_init: DMatrix<f64>) -> Result<DMatrix<f64>> {
        let steps = self.schedule.ddim_steps(n_steps)?;
        let g = self.normalizer.encode_goal(goal);
        let mut x = x_init;
        for (k, &t) in steps.iter().enumerate() {
            let x0_hat = self.net.predict(&x, &g, t)?;
            match steps.get(k + 1) {
                Some(&next) => x = ddim_update(&self.schedule, &x, &x0_hat, t, next),
                None => return Ok(self.normalizer.decode(&x0_hat)),
            }
        }
        unreachable!("ddim_steps is never empty")
    }

    pub fn ddim_sample<R: Rng + ?Sized>(&self, goal: &Vector3<f64>, n_steps: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let x = self.initial_noise(rng);
        self.ddim_from(goal, n_steps, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::layers::random_matrix;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch: 4,
            diffusion_steps: 64,
            denoiser: DenoiserConfig {
                horizon: 6,
                d_model: 8,
                blocks: 1,
                heads: 2,
                goal_tokens: 2,
                ffn_mult: 2,
                skip: true,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(1), 6, DOF, 1.0);
        let (loss, grad) = trajectory_loss(&x, &x, 1.0, 0.5, 0.01);
        assert_eq!(loss.total, 0.0);
        assert_eq!(grad.amax(), 0.0);
    }

    #[test]
    fn zero_velocity_weight_is_plain_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 6, DOF, 1.0);
        let b = random_matrix(&mut rng, 6, DOF, 1.0);
        let (loss, _) = trajectory_loss(&a, &b, 1.0, 0.0, 0.01);
        assert!((loss.total - (&a - &b).norm_squared() / 120.0).abs() < 1e-14);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 6, DOF, 1.0);
        let b = random_matrix(&mut rng, 6, DOF, 1.0);
        let (_, grad) = trajectory_loss(&a, &b, 0.7, 2e-4, 0.01);
        let h = 1e-6;
        for k in (0..a.len()).step_by(5) {
            let mut up = a.clone();
            up[k] += h;
            let mut down = a.clone();
            down[k] -= h;
            let fd = (trajectory_loss(&up, &b, 0.7, 2e-4, 0.01).0.total - trajectory_loss(&down, &b, 0.7, 2e-4, 0.01).0.total) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }

    /// Training-loss gradient with respect to the final projection weights.
    #[test]
    fn projection_gradient_matches_finite_differences() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Denoiser::new(config.denoiser.clone(), &config.schedule(), &mut rng).unwrap();
        let schedule = config.schedule();
        let x0 = random_matrix(&mut rng, 6, DOF, 1.0);
        let eps = random_matrix(&mut rng, 6, DOF, 1.0);
        let goal = RowDVector::from_row_slice(&[0.3, 0.1, -0.2]);
        let t = 20;
        let (_, grads) = example_loss(&net, &schedule, &x0, &goal, t, &eps, &config).unwrap();
        let h = 1e-5;
        for id in net.projection_blocks() {
            for k in 0..net.params.get(id).len() {
                let mut up = net.clone();
                up.params.get_mut(id)[k] += h;
                let mut down = net.clone();
                down.params.get_mut(id)[k] -= h;
                let lu = example_loss(&up, &schedule, &x0, &goal, t, &eps, &config).unwrap().0.total;
                let ld = example_loss(&down, &schedule, &x0, &goal, t, &eps, &config).unwrap().0.total;
                let fd = (lu - ld) / (2.0 * h);
                let an = grads.get(id)[k];
                let rel = (fd - an).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4 || (fd - an).abs() < 1e-10, "{}[{k}]: {an} vs {fd}", net.params.name(id));
            }
        }
    }

    #[test]
    fn single_step_ddim_is_direct_prediction() {
        let config = tiny_config();
        let mut trainer = Trainer::new(config).unwrap();
        trainer.ema.weights = trainer.net.params.clone();
        let policy = trainer.policy(&Normalizer::identity()).unwrap();
        let goal = Vector3::new(0.1, 0.2, 0.0);
        let noise = policy.initial_noise(&mut ChaCha8Rng::seed_from_u64(5));
        let sample = policy.ddim_from(&goal, 1, noise.clone()).unwrap();
        let direct = policy.net.predict(&noise, &policy.normalizer.encode_goal(&goal), 63).unwrap();
        assert_eq!(sample, direct);
        let a = policy.ddim_sample(&goal, 8, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let b = policy.ddim_sample(&goal, 8, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stride_round_trip() {
        let mut traj = Trajectory::empty(crate::control::ControlInput::zero(), 2);
        for (i, q) in traj.q.iter_mut().enumerate() {
            q[0] = i as f64 * 0.5;
            q[7] = (i as f64) * (i as f64);
        }
        let rows = strided_rows(&traj, 10, 51).unwrap();
        assert_eq!(rows[(3, 0)], 15.0);
        let up = upsample_rows(&rows, 10);
        assert_eq!(up.nrows(), 501);
        for i in 0..501 {
            assert!((up[(i, 0)] - i as f64 * 0.5).abs() < 1e-12);
        }
        assert!(strided_rows(&traj, 11, 51).is_err());
    }

    #[test]
    fn short_training_run_reduces_loss() {
        let config = TrainConfig {
            iterations: 300,
            lambda_qd: 0.0,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<_> = (0..4).map(|_| random_matrix(&mut rng, 6, DOF, 1.0)).collect();
        let goals: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect();
        let data = TrainingSet::with_normalizer(&rows, &goals, Normalizer::identity());
        let mut trainer = Trainer::new(config).unwrap();
        trainer.train(&data, 300).unwrap();
        let first: f64 = trainer.history[..20].iter().map(|l| l.total).sum();
        let last: f64 = trainer.history[280..].iter().map(|l| l.total).sum();
        assert!(last < 0.6 * first, "{last} vs {first}");
    }
}
