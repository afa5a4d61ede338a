//! Benchmark metrics, policy evaluation and the imitation / trajectory
//! optimization training strategies.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::denoiser::Denoiser;
use crate::diffusion::params::{Adam, ParamSet};
use crate::diffusion::train::{ddim_update, strided_rows, Policy, TrainConfig, Trainer, TrainingSet};
use crate::dynamics::{Dynamics, Trajectory};
use crate::error::{Error, Result};
use crate::model::RodModel;
use crate::pita::{guided_sample, rollout_and_score, AdaptConfig, AdaptMode, Surrogate};

pub const THRESHOLDS: [f64; 4] = [0.10, 0.05, 0.02, 0.01];
pub const CSV_SCHEMA: &str = "# rodiff-eval-report v1";
const CSV_HEADER: &str = "index,goal_x,goal_y,goal_z,distance,strike_index,mode,seconds,error";

/// Fraction of distances `<=` each threshold.
pub fn success_rates(distances: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::EmptyEval);
    }
    if let Some(d) = distances.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::validation("distances", format!("must be non-negative, got {d}")));
    }
    let n = distances.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&h| distances.iter().filter(|&&d| d <= h).count() as f64 / n)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub index: usize,
    pub goal: [f64; 3],
    /// NaN when the case failed.
    pub distance: f64,
    pub strike_index: Option<usize>,
    pub mode: String,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub n_failed: usize,
    /// Mean over cases that produced a rollout.
    pub mean_distance: f64,
    pub thresholds: Vec<f64>,
    /// Failed cases count as misses.
    pub success_rates: Vec<f64>,
    pub mean_seconds: f64,
    pub cases: Vec<CaseRow>,
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseRow>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::EmptyEval);
        }
        let scored: Vec<f64> = cases.iter().map(|c| c.distance).filter(|d| d.is_finite()).collect();
        let padded: Vec<f64> = cases
            .iter()
            .map(|c| if c.distance.is_finite() { c.distance } else { f64::INFINITY })
            .collect();
        let n = cases.len();
        Ok(Self {
            n_cases: n,
            n_failed: n - scored.len(),
            mean_distance: if scored.is_empty() {
                f64::NAN
            } else {
                scored.iter().sum::<f64>() / scored.len() as f64
            },
            thresholds: THRESHOLDS.to_vec(),
            success_rates: success_rates(&padded, &THRESHOLDS)?,
            mean_seconds: cases.iter().map(|c| c.seconds).sum::<f64>() / n as f64,
            cases,
        })
    }

    pub fn distances(&self) -> Vec<f64> {
        self.cases.iter().map(|c| c.distance).filter(|d| d.is_finite()).collect()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cases: {}", self.n_cases);
        let _ = writeln!(s, "failed: {}", self.n_failed);
        let _ = writeln!(s, "mean_min_distance_m: {:.6}", self.mean_distance);
        for (h, r) in self.thresholds.iter().zip(&self.success_rates) {
            let _ = writeln!(s, "success@{h:.2}m: {r:.4}");
        }
        let _ = writeln!(s, "mean_sample_seconds: {:.4}", self.mean_seconds);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_SCHEMA}\n{CSV_HEADER}\n");
        for c in &self.cases {
            let strike = c.strike_index.map(|k| k.to_string()).unwrap_or_default();
            let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{},{},{:?},{}",
                c.index, c.goal[0], c.goal[1], c.goal[2], c.distance, strike, c.mode, c.seconds, err
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_SCHEMA) {
            return Err(Error::validation("report", format!("missing `{CSV_SCHEMA}` schema line")));
        }
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::validation("report", "unexpected CSV header"));
        }
        let bad = |n: usize, what: &str| Error::validation("report", format!("row {n}: bad {what}"));
        let mut cases = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.splitn(9, ',').collect();
            if f.len() != 9 {
                return Err(bad(n, "column count"));
            }
            let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(n, what));
            cases.push(CaseRow {
                index: f[0].parse().map_err(|_| bad(n, "index"))?,
                goal: [num(1, "goal_x")?, num(2, "goal_y")?, num(3, "goal_z")?],
                distance: num(4, "distance")?,
                strike_index: if f[5].is_empty() {
                    None
                } else {
                    Some(f[5].parse().map_err(|_| bad(n, "strike_index"))?)
                },
                mode: f[6].to_string(),
                seconds: num(7, "seconds")?,
                error: (!f[8].is_empty()).then(|| f[8].to_string()),
            });
        }
        Self::from_cases(cases)
    }
}

/// Produces token trajectories (physical units) for goals.
pub trait TokenSampler: Sync {
    fn stride(&self) -> usize;
    fn label(&self) -> String;
    fn sample(&self, case: usize, goal: &Vector3<f64>, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>>;
}

pub struct PolicySampler<'a> {
    pub policy: &'a Policy,
    pub model: &'a RodModel,
    pub adapt: AdaptConfig,
}

impl TokenSampler for PolicySampler<'_> {
    fn stride(&self) -> usize {
        self.policy.config.stride
    }

    fn label(&self) -> String {
        self.adapt.mode.to_string()
    }

    fn sample(&self, _case: usize, goal: &Vector3<f64>, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
        if self.adapt.mode == AdaptMode::None {
            return self.policy.ddim_sample(goal, self.adapt.ddim_steps, rng);
        }
        Ok(guided_sample(self.policy, self.model, goal, &self.adapt, rng)?.q)
    }
}

/// Replays each case's source trajectory; an upper bound on achievable accuracy.
pub struct ReplaySampler<'a> {
    pub sources: &'a [Trajectory],
    pub stride: usize,
    pub horizon: usize,
}

impl TokenSampler for ReplaySampler<'_> {
    fn stride(&self) -> usize {
        self.stride
    }

    fn label(&self) -> String {
        "replay".into()
    }

    fn sample(&self, case: usize, _goal: &Vector3<f64>, _rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
        let src = self
            .sources
            .get(case)
            .ok_or_else(|| Error::validation("case", format!("no source trajectory for case {case}")))?;
        strided_rows(src, self.stride, self.horizon)
    }
}

/// RNG for evaluation case `case` under run seed `seed`.
pub fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64);
    rng
}

/// Samples, rolls out and scores every goal; per-case failures are recorded.
pub fn evaluate_policy(dynamics: &Dynamics, sampler: &dyn TokenSampler, goals: &[Vector3<f64>], seed: u64) -> Result<EvalReport> {
    if goals.is_empty() {
        return Err(Error::EmptyEval);
    }
    let label = sampler.label();
    let cases: Vec<CaseRow> = goals
        .par_iter()
        .enumerate()
        .map(|(i, goal)| {
            let start = Instant::now();
            let result = sampler.sample(i, goal, &mut case_rng(seed, i));
            let seconds = start.elapsed().as_secs_f64();
            let scored = result.and_then(|q| rollout_and_score(dynamics, &q, sampler.stride(), goal));
            let (distance, strike_index, error) = match scored {
                Ok(s) => (s.distance, Some(s.strike_index), None),
                Err(e) => (f64::NAN, None, Some(e.to_string())),
            };
            CaseRow {
                index: i,
                goal: (*goal).into(),
                distance,
                strike_index,
                mode: label.clone(),
                seconds,
                error,
            }
        })
        .collect();
    EvalReport::from_cases(cases)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Il,
    To,
    IlTo,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "il" => Ok(Self::Il),
            "to" => Ok(Self::To),
            "il_to" => Ok(Self::IlTo),
            _ => Err(Error::validation("strategy", format!("unknown strategy `{s}` (il, to, il_to)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub il_iterations: usize,
    pub to_iterations: usize,
    pub to_lr: f64,
    /// Learning-rate factor for the optimization stage after imitation.
    pub il_to_lr_scale: f64,
    pub to_batch: usize,
    pub ddim_steps: usize,
    pub pos_weight: f64,
    pub kbc_weight: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            il_iterations: 3000,
            to_iterations: 200,
            to_lr: 1e-3,
            il_to_lr_scale: 0.3,
            to_batch: 8,
            ddim_steps: 16,
            pos_weight: 1.0,
            kbc_weight: 1.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            pos_weight: self.pos_weight,
            kbc_weight: self.kbc_weight,
            ..AdaptConfig::default()
        }
    }
}

/// Imitation learning on the diffusion loss; returns the EMA policy and the trainer.
pub fn train_il(data: &TrainingSet, config: &TrainConfig, iterations: usize) -> Result<(Policy, Trainer)> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.train(data, iterations)?;
    Ok((trainer.policy(&data.normalizer)?, trainer))
}

/// Surrogate loss of one sample and its parameter gradient through the final
/// denoising step (earlier steps are treated as constants).
pub fn to_sample_gradient(
    policy: &Policy,
    surrogate: &Surrogate,
    goal: &Vector3<f64>,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParamSet)> {
    let steps = policy.schedule.ddim_steps(n_steps)?;
    let g = policy.normalizer.encode_goal(goal);
    let mut x = policy.initial_noise(rng);
    for w in steps.windows(2) {
        let x0 = policy.net.predict(&x, &g, w[0])?;
        x = ddim_update(&policy.schedule, &x, &x0, w[0], w[1]);
    }
    let last = *steps.last().expect("ddim_steps is never empty");
    let (x0, cache) = policy.net.forward(&x, &g, last)?;
    let q = policy.normalizer.decode(&x0);
    let (lp, lk) = surrogate.losses(&q)?;
    let d_out = policy.normalizer.pullback(&surrogate.gradient(&q)?);
    let (grads, _) = policy.net.backward(&cache, &d_out);
    Ok((lp + lk, grads))
}

/// Optimizes the surrogate loss of sampled trajectories over all weights.
pub fn trajectory_optimize(
    model: &RodModel,
    start: &Policy,
    goals: &[Vector3<f64>],
    lr: f64,
    config: &FinetuneConfig,
) -> Result<(Policy, Vec<f64>)> {
    if goals.is_empty() {
        return Err(Error::EmptyEval);
    }
    let adapt = config.adapt();
    let surrogates = goals
        .iter()
        .map(|g| Surrogate::new(model, g, start.config.token_dt(), &adapt))
        .collect::<Result<Vec<_>>>()?;
    let mut policy = start.clone();
    let mut adam = Adam::new(&policy.net.params, lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.to_iterations);
    for it in 0..config.to_iterations {
        let picks: Vec<(usize, u64)> = (0..config.to_batch)
            .map(|_| (rng.random_range(0..goals.len()), rng.random()))
            .collect();
        let results = picks
            .par_iter()
            .map(|&(i, s)| {
                to_sample_gradient(&policy, &surrogates[i], &goals[i], config.ddim_steps, &mut ChaCha8Rng::seed_from_u64(s))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = policy.net.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l / results.len() as f64;
            grads.axpy(1.0 / results.len() as f64, g);
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss(format!("trajectory optimization iteration {it}: loss {loss}")));
        }
        crate::diffusion::train::clip_gradients(&mut grads, start.config.grad_clip);
        adam.update(&mut policy.net.params, &grads);
        history.push(loss);
    }
    Ok((policy, history))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub policy: Policy,
    pub il_history: Vec<f64>,
    pub to_history: Vec<f64>,
}

/// Trains a policy with the given strategy. `TO` starts from random weights
/// but keeps the data normalizer so outputs share units with the other strategies.
pub fn finetune_to(
    model: &RodModel,
    data: &TrainingSet,
    goals: &[Vector3<f64>],
    strategy: Strategy,
    train: &TrainConfig,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let il = |iters| -> Result<(Policy, Vec<f64>)> {
        let (policy, trainer) = train_il(data, train, iters)?;
        Ok((policy, trainer.history.iter().map(|l| l.total).collect()))
    };
    match strategy {
        Strategy::Il => {
            let (policy, il_history) = il(config.il_iterations)?;
            Ok(FinetuneOutcome {
                policy,
                il_history,
                to_history: Vec::new(),
            })
        }
        Strategy::To => {
            let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
            let start = Policy {
                net: Denoiser::new(train.denoiser.clone(), &train.schedule(), &mut rng)?,
                schedule: train.schedule(),
                normalizer: data.normalizer.clone(),
                config: train.clone(),
            };
            let (policy, to_history) = trajectory_optimize(model, &start, goals, config.to_lr, config)?;
            Ok(FinetuneOutcome {
                policy,
                il_history: Vec::new(),
                to_history,
            })
        }
        Strategy::IlTo => {
            let (start, il_history) = il(config.il_iterations)?;
            let (policy, to_history) = trajectory_optimize(model, &start, goals, config.to_lr * config.il_to_lr_scale, config)?;
            Ok(FinetuneOutcome {
                policy,
                il_history,
                to_history,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(index: usize, distance: f64) -> CaseRow {
        CaseRow {
            index,
            goal: [0.1, -0.2, 0.3],
            distance,
            strike_index: distance.is_finite().then_some(7),
            mode: "none".into(),
            seconds: 0.25,
            error: (!distance.is_finite()).then(|| "rollout failed, diverged".into()),
        }
    }

    #[test]
    fn hand_counted_rates() {
        assert_eq!(success_rates(&[0.03], &THRESHOLDS).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        let r = success_rates(&[0.005, 0.04, 0.5], &THRESHOLDS).unwrap();
        assert_eq!(r, vec![2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(success_rates(&[0.02, 0.1], &THRESHOLDS).unwrap(), vec![1.0, 0.5, 0.5, 0.0]);
        assert!(matches!(success_rates(&[], &THRESHOLDS), Err(Error::EmptyEval)));
        assert!(success_rates(&[-0.1], &THRESHOLDS).is_err());
    }

    #[test]
    fn report_counts_failures_as_misses() {
        let report = EvalReport::from_cases(vec![row(0, 0.005), row(1, f64::NAN), row(2, 0.2)]).unwrap();
        assert_eq!(report.n_failed, 1);
        assert!((report.mean_distance - 0.1025).abs() < 1e-15);
        assert_eq!(report.success_rates, vec![1.0 / 3.0; 4]);
        for w in report.success_rates.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(matches!(EvalReport::from_cases(vec![]), Err(Error::EmptyEval)));
    }

    #[test]
    fn csv_round_trip() {
        let report = EvalReport::from_cases(vec![row(0, 0.0123456789), row(1, f64::NAN), row(2, 0.2)]).unwrap();
        let back = EvalReport::from_csv(&report.to_csv()).unwrap();
        assert_eq!(back.n_cases, 3);
        assert_eq!(back.mean_distance, report.mean_distance);
        assert_eq!(back.success_rates, report.success_rates);
        assert_eq!(back.distances(), report.distances());
        assert_eq!(back.cases[1].error.as_deref(), Some("rollout failed; diverged"));
        assert!(EvalReport::from_csv("index\n").is_err());
    }

    #[test]
    fn strategy_names_parse() {
        assert_eq!("IL+TO".parse::<Strategy>().unwrap(), Strategy::IlTo);
        assert_eq!("to".parse::<Strategy>().unwrap(), Strategy::To);
        assert!("rl".parse::<Strategy>().is_err());
    }
}
