//! Goal-conditioned transformer that predicts the clean trajectory.

use nalgebra::{DMatrix, RowDVector, Vector3};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::layers::{gelu, gelu_backward, positional_encoding, sinusoid, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear};
use super::params::{BlockId, ParamSet};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::DOF;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Tokens per trajectory.
    pub horizon: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Tokens the goal encoder emits for cross-attention.
    pub goal_tokens: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Output `alpha(t) x_t + sigma(t) F` instead of `F`.
    pub skip: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            horizon: 51,
            d_model: 256,
            blocks: 4,
            heads: 4,
            goal_tokens: 4,
            ffn_mult: 4,
            skip: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 3 {
            return Err(Error::validation("horizon", format!("must be at least 3, got {}", self.horizon)));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("goal_tokens", self.goal_tokens),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::validation(
                "heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        Ok(())
    }
}

/// Per-dimension affine standardization of trajectories and goals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub q_mean: Vec<f64>,
    pub q_std: Vec<f64>,
    pub goal_mean: [f64; 3],
    pub goal_std: [f64; 3],
}

const MIN_STD: f64 = 1e-3;

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            q_mean: vec![0.0; DOF],
            q_std: vec![1.0; DOF],
            goal_mean: [0.0; 3],
            goal_std: [1.0; 3],
        }
    }

    /// Statistics over every row of every trajectory.
    pub fn fit(trajs: &[DMatrix<f64>], goals: &[Vector3<f64>]) -> Self {
        let mut n = 0.0;
        let mut sum = vec![0.0; DOF];
        let mut sq = vec![0.0; DOF];
        for t in trajs {
            for r in t.row_iter() {
                n += 1.0;
                for j in 0..DOF {
                    sum[j] += r[j];
                    sq[j] += r[j] * r[j];
                }
            }
        }
        let stats = |s: f64, s2: f64, n: f64| {
            if n == 0.0 {
                return (0.0, 1.0);
            }
            let m = s / n;
            (m, (s2 / n - m * m).max(0.0).sqrt().max(MIN_STD))
        };
        let mut q_mean = vec![0.0; DOF];
        let mut q_std = vec![1.0; DOF];
        for j in 0..DOF {
            (q_mean[j], q_std[j]) = stats(sum[j], sq[j], n);
        }
        let mut goal_mean = [0.0; 3];
        let mut goal_std = [1.0; 3];
        for k in 0..3 {
            let s: f64 = goals.iter().map(|g| g[k]).sum();
            let s2: f64 = goals.iter().map(|g| g[k] * g[k]).sum();
            (goal_mean[k], goal_std[k]) = stats(s, s2, goals.len() as f64);
        }
        Self {
            q_mean,
            q_std,
            goal_mean,
            goal_std,
        }
    }

    pub fn encode(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| (q[(i, j)] - self.q_mean[j]) / self.q_std[j])
    }

    pub fn decode(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.q_std[j] + self.q_mean[j])
    }

    /// Gradient with respect to normalized values from one with respect to physical values.
    pub fn pullback(&self, grad: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(grad.nrows(), grad.ncols(), |i, j| grad[(i, j)] * self.q_std[j])
    }

    pub fn encode_goal(&self, goal: &Vector3<f64>) -> RowDVector<f64> {
        RowDVector::from_fn(3, |_, k| (goal[k] - self.goal_mean[k]) / self.goal_std[k])
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    time: Linear,
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Linear,
    goal_in: Linear,
    goal_out: Linear,
    blocks: Vec<BlockLayout>,
    ln_final: LayerNorm,
    projection: Linear,
}

/// Network weights plus the block layout that addresses them.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
    /// `(c_skip, c_out)` per diffusion step.
    mix: Vec<(f64, f64)>,
    layout: Layout,
}

struct BlockCache {
    ln_self: LayerNormCache,
    self_in: DMatrix<f64>,
    self_attn: AttentionCache,
    ln_cross: LayerNormCache,
    cross_in: DMatrix<f64>,
    cross_attn: AttentionCache,
    ln_ffn: LayerNormCache,
    ffn_x: DMatrix<f64>,
    ffn_pre: DMatrix<f64>,
    ffn_act: DMatrix<f64>,
}

/// Intermediate values of one forward pass.
pub struct ForwardCache {
    input: DMatrix<f64>,
    goal: DMatrix<f64>,
    goal_pre: DMatrix<f64>,
    goal_act: DMatrix<f64>,
    goal_tokens: DMatrix<f64>,
    time: DMatrix<f64>,
    blocks: Vec<BlockCache>,
    ln_final: LayerNormCache,
    /// Final-norm output, the input of the final projection.
    pub features: DMatrix<f64>,
    /// `(c_skip, c_out)` at the step of this pass.
    mix: (f64, f64),
}

/// Name prefix of the final projection block.
pub const PROJECTION: &str = "projection";

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut p = ParamSet::new();
        let embed = Linear::init(&mut p, rng, "embed", DOF, d);
        let goal_in = Linear::init(&mut p, rng, "goal.in", 3, d);
        let goal_out = Linear::init(&mut p, rng, "goal.out", d, d * config.goal_tokens);
        let blocks = (0..config.blocks)
            .map(|b| {
                let name = |s: &str| format!("block{b}.{s}");
                BlockLayout {
                    time: Linear::init(&mut p, rng, &name("time"), d, d),
                    ln_self: LayerNorm::init(&mut p, &name("ln_self"), d),
                    self_attn: Attention::init(&mut p, rng, &name("self_attn"), d, config.heads, true),
                    ln_cross: LayerNorm::init(&mut p, &name("ln_cross"), d),
                    cross_attn: Attention::init(&mut p, rng, &name("cross_attn"), d, config.heads, false),
                    ln_ffn: LayerNorm::init(&mut p, &name("ln_ffn"), d),
                    ffn_in: Linear::init(&mut p, rng, &name("ffn_in"), d, d * config.ffn_mult),
                    ffn_out: Linear::init(&mut p, rng, &name("ffn_out"), d * config.ffn_mult, d),
                }
            })
            .collect();
        let ln_final = LayerNorm::init(&mut p, "ln_final", d);
        let projection = Linear::init(&mut p, rng, PROJECTION, d, DOF);
        let mix = (0..schedule.steps())
            .map(|t| if config.skip { (schedule.alpha(t), schedule.sigma(t)) } else { (0.0, 1.0) })
            .collect();
        Ok(Self {
            config,
            params: p,
            mix,
            layout: Layout {
                embed,
                goal_in,
                goal_out,
                blocks,
                ln_final,
                projection,
            },
        })
    }

    /// Network with the given weights (matched by block name).
    pub fn with_params(config: DenoiserConfig, schedule: &NoiseSchedule, params: &ParamSet) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::new(config, schedule, &mut rng)?;
        net.params.load_from(params)?;
        if net.params.len() != params.len() {
            return Err(Error::validation(
                "checkpoint",
                format!("{} parameter blocks, architecture needs {}", params.len(), net.params.len()),
            ));
        }
        Ok(net)
    }

    /// Weight and bias blocks of the final projection.
    pub fn projection_blocks(&self) -> [BlockId; 2] {
        [self.layout.projection.weight, self.layout.projection.bias]
    }

    fn check_input(&self, xt: &DMatrix<f64>, t: usize) -> Result<()> {
        if xt.ncols() != DOF || xt.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("N x {DOF}"),
                got: format!("{} x {}", xt.nrows(), xt.ncols()),
            });
        }
        if t >= self.mix.len() {
            return Err(Error::OutOfDomain {
                what: "diffusion step",
                value: t as f64,
                lo: 0.0,
                hi: (self.mix.len() - 1) as f64,
            });
        }
        Ok(())
    }

    /// Prediction of the normalized clean trajectory from the noisy one.
    pub fn forward(&self, xt: &DMatrix<f64>, goal: &RowDVector<f64>, t: usize) -> Result<(DMatrix<f64>, ForwardCache)> {
        self.check_input(xt, t)?;
        let p = &self.params;
        let l = &self.layout;
        let d = self.config.d_model;
        let k = self.config.goal_tokens;
        let goal_m = DMatrix::from_row_slice(1, 3, goal.as_slice());
        let goal_pre = l.goal_in.forward(p, &goal_m);
        let goal_act = gelu(&goal_pre);
        let flat = l.goal_out.forward(p, &goal_act);
        let goal_tokens = DMatrix::from_fn(k, d, |i, j| flat[(0, i * d + j)]);
        let time = DMatrix::from_row_slice(1, d, sinusoid(t as f64, d).as_slice());
        let mut x = l.embed.forward(p, xt) + positional_encoding(xt.nrows(), d);
        let mut caches = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let shift = b.time.forward(p, &time);
            for mut r in x.row_iter_mut() {
                r += shift.row(0);
            }
            let (self_in, ln_self) = b.ln_self.forward(p, &x);
            let (sa, self_attn) = b.self_attn.forward(p, &self_in, &self_in);
            x += sa;
            let (cross_in, ln_cross) = b.ln_cross.forward(p, &x);
            let (ca, cross_attn) = b.cross_attn.forward(p, &cross_in, &goal_tokens);
            x += ca;
            let (ffn_x, ln_ffn) = b.ln_ffn.forward(p, &x);
            let ffn_pre = b.ffn_in.forward(p, &ffn_x);
            let ffn_act = gelu(&ffn_pre);
            x += b.ffn_out.forward(p, &ffn_act);
            caches.push(BlockCache {
                ln_self,
                self_in,
                self_attn,
                ln_cross,
                cross_in,
                cross_attn,
                ln_ffn,
                ffn_x,
                ffn_pre,
                ffn_act,
            });
        }
        let (features, ln_final) = l.ln_final.forward(p, &x);
        let mix = self.mix[t];
        let out = xt * mix.0 + l.projection.forward(p, &features) * mix.1;
        Ok((
            out,
            ForwardCache {
                mix,
                input: xt.clone(),
                goal: goal_m,
                goal_pre,
                goal_act,
                goal_tokens,
                time,
                blocks: caches,
                ln_final,
                features,
            },
        ))
    }

    pub fn predict(&self, xt: &DMatrix<f64>, goal: &RowDVector<f64>, t: usize) -> Result<DMatrix<f64>> {
        Ok(self.forward(xt, goal, t)?.0)
    }

    /// Predictions for several (input, goal) pairs at one step, in parallel.
    pub fn predict_batch(&self, batch: &[(DMatrix<f64>, RowDVector<f64>)], t: usize) -> Result<Vec<DMatrix<f64>>> {
        use rayon::prelude::*;
        batch.par_iter().map(|(x, g)| self.predict(x, g, t)).collect()
    }

    /// Output recomputed from a cached pass with the current projection weights.
    pub fn project(&self, cache: &ForwardCache) -> DMatrix<f64> {
        &cache.input * cache.mix.0 + self.layout.projection.forward(&self.params, &cache.features) * cache.mix.1
    }

    /// Gradients of the projection weight and bias for output gradient `d_out`.
    pub fn projection_gradient(&self, cache: &ForwardCache, d_out: &DMatrix<f64>) -> [DMatrix<f64>; 2] {
        let dy = d_out * cache.mix.1;
        let bias = DMatrix::from_iterator(1, DOF, dy.row_sum().iter().copied());
        [cache.features.transpose() * dy, bias]
    }

    /// Parameter gradients and the input gradient for output gradient `d_out`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &DMatrix<f64>) -> (ParamSet, DMatrix<f64>) {
        let p = &self.params;
        let l = &self.layout;
        let d = self.config.d_model;
        let k = self.config.goal_tokens;
        let mut g = p.zeros_like();
        let dfeat = l.projection.backward(p, &mut g, &cache.features, &(d_out * cache.mix.1));
        let mut dx = l.ln_final.backward(p, &mut g, &cache.ln_final, &dfeat);
        let mut dgoal_tokens = DMatrix::zeros(k, d);
        for (b, c) in l.blocks.iter().zip(&cache.blocks).rev() {
            let dact = b.ffn_out.backward(p, &mut g, &c.ffn_act, &dx);
            let dpre = gelu_backward(&c.ffn_pre, &dact);
            let dffn_x = b.ffn_in.backward(p, &mut g, &c.ffn_x, &dpre);
            dx += b.ln_ffn.backward(p, &mut g, &c.ln_ffn, &dffn_x);
            let (dcross_in, dtok) = b.cross_attn.backward(p, &mut g, &c.cross_in, &cache.goal_tokens, &c.cross_attn, &dx);
            dgoal_tokens += dtok;
            dx += b.ln_cross.backward(p, &mut g, &c.ln_cross, &dcross_in);
            let (dq, dkv) = b.self_attn.backward(p, &mut g, &c.self_in, &c.self_in, &c.self_attn, &dx);
            dx += b.ln_self.backward(p, &mut g, &c.ln_self, &(dq + dkv));
            let mut dshift = DMatrix::zeros(1, d);
            for r in dx.row_iter() {
                dshift += r;
            }
            b.time.backward(p, &mut g, &cache.time, &dshift);
        }
        let d_input = l.embed.backward(p, &mut g, &cache.input, &dx) + d_out * cache.mix.0;
        let dflat = DMatrix::from_fn(1, k * d, |_, c| dgoal_tokens[(c / d, c % d)]);
        let dact = l.goal_out.backward(p, &mut g, &cache.goal_act, &dflat);
        let dpre = gelu_backward(&cache.goal_pre, &dact);
        l.goal_in.backward(p, &mut g, &cache.goal, &dpre);
        (g, d_input)
    }
}
