//! Physics-informed test-time adaptation of the trajectory sampler, and
//! scoring of sampled trajectories by simulation.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::{fit_waypoints, ControlInput};
use crate::diffusion::denoiser::Denoiser;
use crate::diffusion::params::{Adam, ParamSet};
use crate::diffusion::train::{ddim_update, Policy};
use crate::dynamics::{Dynamics, Trajectory, TIME_STEP};
use crate::error::{Error, Result};
use crate::model::{Config, RodModel, DOF, RIGID_DOF};
use crate::prior::{grad_loss_kbc, grad_loss_pos, loss_kbc, loss_pos, strike_index, GoalTask, KbcWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    None,
    SampleGrad,
    #[default]
    ProjFinetune,
    FullFinetune,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 4] = [Self::None, Self::SampleGrad, Self::ProjFinetune, Self::FullFinetune];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::SampleGrad => "sample_grad",
            Self::ProjFinetune => "proj_finetune",
            Self::FullFinetune => "full_finetune",
        }
    }
}

impl std::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::validation("mode", format!("unknown mode `{s}` (none, sample_grad, proj_finetune, full_finetune)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub inner_steps: usize,
    pub lr_tta: f64,
    /// Guidance runs on steps `t < guide_from_step * T`.
    pub guide_from_step: f64,
    pub pos_weight: f64,
    pub kbc_weight: f64,
    pub ddim_steps: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::ProjFinetune,
            inner_steps: 2,
            lr_tta: 1e-3,
            guide_from_step: 0.5,
            pos_weight: 1.0,
            kbc_weight: 1.0,
            ddim_steps: 32,
        }
    }
}

impl AdaptConfig {
    pub fn unguided() -> Self {
        Self {
            mode: AdaptMode::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_tta > 0.0 && self.lr_tta.is_finite()) {
            return Err(Error::validation("lr_tta", format!("must be positive, got {}", self.lr_tta)));
        }
        if !(0.0..=1.0).contains(&self.guide_from_step) {
            return Err(Error::validation("guide_from_step", "must be in [0, 1]"));
        }
        if !(self.pos_weight >= 0.0 && self.kbc_weight >= 0.0) {
            return Err(Error::validation("pos_weight/kbc_weight", "must be non-negative"));
        }
        if self.ddim_steps == 0 {
            return Err(Error::validation("ddim_steps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub step: usize,
    pub t: usize,
    pub guided: bool,
    /// Losses after adaptation; NaN on unguided steps.
    pub loss_pos: f64,
    pub loss_kbc: f64,
    pub fallback: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct GuidedSample {
    /// Token trajectory in physical units.
    pub q: DMatrix<f64>,
    pub steps: Vec<StepDiagnostic>,
    pub seconds: f64,
    pub final_loss_pos: f64,
    pub final_loss_kbc: f64,
}

impl GuidedSample {
    pub fn fallbacks(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback).count()
    }

    pub fn diagnostics_csv(&self) -> String {
        let mut s = String::from("step,t,guided,loss_pos,loss_kbc,fallback,seconds\n");
        for d in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                d.step, d.t, d.guided as u8, d.loss_pos, d.loss_kbc, d.fallback as u8, d.seconds
            );
        }
        s
    }
}

/// Surrogate loss on a physical token trajectory and its gradient.
#[derive(Clone, Debug)]
pub struct Surrogate<'a> {
    pub model: &'a RodModel,
    pub goal: GoalTask,
    pub dt: f64,
    pub pos_weight: f64,
    pub kbc: KbcWeights,
}

impl<'a> Surrogate<'a> {
    pub fn new(model: &'a RodModel, goal: &Vector3<f64>, dt: f64, cfg: &AdaptConfig) -> Result<Self> {
        let w = KbcWeights::normalized(dt);
        Ok(Self {
            model,
            goal: GoalTask::new(model, *goal)?,
            dt,
            pos_weight: cfg.pos_weight,
            kbc: KbcWeights {
                position: w.position * cfg.kbc_weight,
                velocity: w.velocity * cfg.kbc_weight,
                acceleration: w.acceleration * cfg.kbc_weight,
            },
        })
    }

    /// `(weighted goal loss, weighted boundary loss)`.
    pub fn losses(&self, q: &DMatrix<f64>) -> Result<(f64, f64)> {
        let k = strike_index(self.model, q, &self.goal)?;
        Ok((
            self.pos_weight * loss_pos(self.model, &row(q, k), &self.goal)?,
            loss_kbc(q, self.dt, &self.kbc)?,
        ))
    }

    pub fn gradient(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k = strike_index(self.model, q, &self.goal)?;
        let mut grad = grad_loss_kbc(q, self.dt, &self.kbc)?;
        let g = grad_loss_pos(self.model, &row(q, k), &self.goal)? * self.pos_weight;
        let mut r = grad.row_mut(k);
        r += g.transpose();
        Ok(grad)
    }
}

fn row(q: &DMatrix<f64>, i: usize) -> Config {
    Config::from_iterator(q.row(i).iter().copied())
}

fn finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Optimizer state for the weights adapted during one sample.
struct Tuner {
    adam: Adam,
    /// Working copy of the projection blocks (projection mode only).
    projection: ParamSet,
}

impl Tuner {
    fn new(net: &Denoiser, cfg: &AdaptConfig) -> Self {
        let mut projection = ParamSet::new();
        if cfg.mode == AdaptMode::ProjFinetune {
            for id in net.projection_blocks() {
                projection.push(net.params.name(id), net.params.get(id).clone());
            }
        }
        let adam = match cfg.mode {
            AdaptMode::FullFinetune => Adam::new(&net.params, cfg.lr_tta),
            _ => Adam::new(&projection, cfg.lr_tta),
        };
        Self { adam, projection }
    }
}

/// Adapts `net` (or the noisy iterate) for one diffusion step; returns the new clean estimate.
fn adapt_step(
    policy: &Policy,
    net: &mut Denoiser,
    tuner: &mut Tuner,
    surrogate: &Surrogate,
    cfg: &AdaptConfig,
    xt: &mut DMatrix<f64>,
    goal: &nalgebra::RowDVector<f64>,
    t: usize,
) -> Result<DMatrix<f64>> {
    let (mut x0_hat, mut cache) = net.forward(xt, goal, t)?;
    let [weight, bias] = net.projection_blocks();
    for _ in 0..cfg.inner_steps {
        let q = policy.normalizer.decode(&x0_hat);
        let g = surrogate.gradient(&q)?;
        let d_out = policy.normalizer.pullback(&g);
        if !finite(&d_out) {
            return Err(Error::NonFiniteLoss(format!("surrogate gradient at t = {t}")));
        }
        match cfg.mode {
            AdaptMode::None => break,
            AdaptMode::ProjFinetune => {
                let [gw, gb] = net.projection_gradient(&cache, &d_out);
                let mut grads = ParamSet::new();
                grads.push("weight", gw);
                grads.push("bias", gb);
                tuner.adam.update(&mut tuner.projection, &grads);
                net.params.get_mut(weight).copy_from(tuner.projection.get(0));
                net.params.get_mut(bias).copy_from(tuner.projection.get(1));
                x0_hat = net.project(&cache);
            }
            AdaptMode::FullFinetune => {
                let (grads, _) = net.backward(&cache, &d_out);
                tuner.adam.update(&mut net.params, &grads);
                (x0_hat, cache) = net.forward(xt, goal, t)?;
            }
            AdaptMode::SampleGrad => {
                let (_, d_input) = net.backward(&cache, &d_out);
                *xt -= d_input * cfg.lr_tta;
                (x0_hat, cache) = net.forward(xt, goal, t)?;
            }
        }
    }
    if !finite(&x0_hat) {
        return Err(Error::NonFiniteLoss(format!("adapted estimate at t = {t}")));
    }
    Ok(x0_hat)
}

/// DDIM sampling with per-goal adaptation; `policy` is never modified.
pub fn guided_sample_from(
    policy: &Policy,
    model: &RodModel,
    goal: &Vector3<f64>,
    cfg: &AdaptConfig,
    x_init: DMatrix<f64>,
) -> Result<GuidedSample> {
    cfg.validate()?;
    let start = Instant::now();
    let surrogate = Surrogate::new(model, goal, policy.config.token_dt(), cfg)?;
    let steps = policy.schedule.ddim_steps(cfg.ddim_steps)?;
    let g = policy.normalizer.encode_goal(goal);
    let threshold = cfg.guide_from_step * policy.schedule.steps() as f64;
    let adapting = cfg.mode != AdaptMode::None && cfg.inner_steps > 0;
    let mut net = policy.net.clone();
    let mut tuner = Tuner::new(&net, cfg);
    let mut x = x_init;
    let mut diagnostics = Vec::with_capacity(steps.len());
    for (k, &t) in steps.iter().enumerate() {
        let step_start = Instant::now();
        let guided = adapting && (t as f64) < threshold;
        let mut diag = StepDiagnostic {
            step: k,
            t,
            guided,
            loss_pos: f64::NAN,
            loss_kbc: f64::NAN,
            fallback: false,
            seconds: 0.0,
        };
        let x0_hat = if guided {
            let saved = (net.params.clone(), x.clone());
            let attempt = adapt_step(policy, &mut net, &mut tuner, &surrogate, cfg, &mut x, &g, t).and_then(|x0| {
                let (lp, lk) = surrogate.losses(&policy.normalizer.decode(&x0))?;
                if !(lp + lk).is_finite() {
                    return Err(Error::NonFiniteLoss(format!("surrogate loss at t = {t}")));
                }
                Ok((x0, lp, lk))
            });
            match attempt {
                Ok((x0, lp, lk)) => {
                    diag.loss_pos = lp;
                    diag.loss_kbc = lk;
                    x0
                }
                Err(Error::NonFiniteLoss(_)) => {
                    (net.params, x) = saved;
                    tuner = Tuner::new(&net, cfg);
                    diag.fallback = true;
                    net.predict(&x, &g, t)?
                }
                Err(e) => return Err(e),
            }
        } else {
            net.predict(&x, &g, t)?
        };
        diag.seconds = step_start.elapsed().as_secs_f64();
        diagnostics.push(diag);
        match steps.get(k + 1) {
            Some(&next) => x = ddim_update(&policy.schedule, &x, &x0_hat, t, next),
            None => {
                let q = policy.normalizer.decode(&x0_hat);
                let (final_loss_pos, final_loss_kbc) = surrogate.losses(&q)?;
                return Ok(GuidedSample {
                    q,
                    steps: diagnostics,
                    seconds: start.elapsed().as_secs_f64(),
                    final_loss_pos,
                    final_loss_kbc,
                });
            }
        }
    }
    unreachable!("ddim_steps is never empty")
}

pub fn guided_sample<R: Rng + ?Sized>(
    policy: &Policy,
    model: &RodModel,
    goal: &Vector3<f64>,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<GuidedSample> {
    let x = policy.initial_noise(rng);
    guided_sample_from(policy, model, goal, cfg, x)
}

#[derive(Clone, Debug)]
pub struct RolloutScore {
    /// Minimum tip-goal distance over the rollout (m).
    pub distance: f64,
    /// Earliest simulation sample attaining it.
    pub strike_index: usize,
    pub control: ControlInput,
    pub trajectory: Trajectory,
}

/// Executes the rigid rows of a token trajectory and measures the closest approach.
pub fn rollout_and_score(dynamics: &Dynamics, tokens: &DMatrix<f64>, stride: usize, goal: &Vector3<f64>) -> Result<RolloutScore> {
    if tokens.ncols() != DOF || tokens.nrows() < 2 {
        return Err(Error::ShapeMismatch {
            expected: format!("N x {DOF} token trajectory, N >= 2"),
            got: format!("{} x {}", tokens.nrows(), tokens.ncols()),
        });
    }
    // Token rows are exact samples of the reference; the linear rows between
    // them only add chord error to the fit, so the fit uses the token instants.
    let times: Vec<f64> = (0..tokens.nrows()).map(|i| (i * stride) as f64 * TIME_STEP).collect();
    let angles: Vec<[f64; RIGID_DOF]> = (0..tokens.nrows()).map(|i| [tokens[(i, 0)], tokens[(i, 1)]]).collect();
    if angles.iter().flatten().any(|a| !a.is_finite()) {
        return Err(Error::InvalidTrajectory("non-finite joint angles".into()));
    }
    let control = fit_waypoints(&times, &angles)?.clamped();
    let trajectory = dynamics
        .try_simulate(&control)
        .map_err(|e| Error::InvalidTrajectory(format!("rollout failed: {e}")))?;
    let (mut distance, mut strike) = (f64::INFINITY, 0);
    for (i, p) in trajectory.tip_positions().enumerate() {
        let d = (p - goal).norm();
        if d < distance {
            (distance, strike) = (d, i);
        }
    }
    Ok(RolloutScore {
        distance,
        strike_index: strike,
        control,
        trajectory,
    })
}
