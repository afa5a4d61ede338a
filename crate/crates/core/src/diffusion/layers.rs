//! Dense building blocks with hand-written backward passes. Activations
//! are `tokens x features` matrices.

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{BlockId, ParamSet};

const LN_EPS: f64 = 1e-5;

fn add_row(x: &mut DMatrix<f64>, row: &DMatrix<f64>) {
    for mut r in x.row_iter_mut() {
        r += row.row(0);
    }
}

fn column_sums(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(1, x.ncols());
    for r in x.row_iter() {
        out += r;
    }
    out
}

pub(crate) fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: BlockId,
    pub bias: BlockId,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(p: &mut ParamSet, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: p.push(format!("{name}.weight"), random_matrix(rng, fan_in, fan_out, std)),
            bias: p.push(format!("{name}.bias"), DMatrix::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, p: &ParamSet, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * p.get(self.weight);
        add_row(&mut y, p.get(self.bias));
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, x: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
        *g.get_mut(self.weight) += x.transpose() * dy;
        *g.get_mut(self.bias) += column_sums(dy);
        dy * p.get(self.weight).transpose()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: BlockId,
    pub bias: BlockId,
}

pub struct LayerNormCache {
    normalized: DMatrix<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn init(p: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gain: p.push(format!("{name}.gain"), DMatrix::from_element(1, dim, 1.0)),
            bias: p.push(format!("{name}.bias"), DMatrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, p: &ParamSet, x: &DMatrix<f64>) -> (DMatrix<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut r in normalized.row_iter_mut() {
            let mean = r.sum() / n;
            r.add_scalar_mut(-mean);
            let var = r.norm_squared() / n;
            let s = 1.0 / (var + LN_EPS).sqrt();
            r *= s;
            inv_std.push(s);
        }
        let gain = p.get(self.gain);
        let mut y = normalized.clone();
        for mut r in y.row_iter_mut() {
            r.component_mul_assign(&gain.row(0));
        }
        add_row(&mut y, p.get(self.bias));
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, cache: &LayerNormCache, dy: &DMatrix<f64>) -> DMatrix<f64> {
        let n = dy.ncols() as f64;
        let gain = p.get(self.gain);
        *g.get_mut(self.gain) += column_sums(&dy.component_mul(&cache.normalized));
        *g.get_mut(self.bias) += column_sums(dy);
        let mut dx = DMatrix::zeros(dy.nrows(), dy.ncols());
        for i in 0..dy.nrows() {
            let dxhat: RowDVector<f64> = dy.row(i).component_mul(&gain.row(0));
            let xhat = cache.normalized.row(i);
            let mean_d = dxhat.sum() / n;
            let mean_dx = dxhat.dot(&xhat) / n;
            let row = (dxhat - xhat * mean_dx).add_scalar(-mean_d) * cache.inv_std[i];
            dx.row_mut(i).copy_from(&row);
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

pub fn gelu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    x.zip_map(dy, |v, d| {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    })
}

/// Multi-head attention; queries from one sequence, keys and values from another.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub query: BlockId,
    pub key: BlockId,
    pub value: BlockId,
    pub out: Linear,
    pub heads: usize,
    pub causal: bool,
}

pub struct AttentionCache {
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<DMatrix<f64>>,
    mixed: DMatrix<f64>,
}

impl Attention {
    pub fn init<R: Rng + ?Sized>(p: &mut ParamSet, rng: &mut R, name: &str, dim: usize, heads: usize, causal: bool) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            query: p.push(format!("{name}.query"), random_matrix(rng, dim, dim, std)),
            key: p.push(format!("{name}.key"), random_matrix(rng, dim, dim, std)),
            value: p.push(format!("{name}.value"), random_matrix(rng, dim, dim, std)),
            out: Linear::init(p, rng, &format!("{name}.out"), dim, dim),
            heads,
            causal,
        }
    }

    pub fn forward(&self, p: &ParamSet, xq: &DMatrix<f64>, xkv: &DMatrix<f64>) -> (DMatrix<f64>, AttentionCache) {
        let q = xq * p.get(self.query);
        let k = xkv * p.get(self.key);
        let v = xkv * p.get(self.value);
        let dim = q.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = DMatrix::zeros(q.nrows(), dim);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.columns(h * dh, dh);
            let kh = k.columns(h * dh, dh);
            let mut s = qh * kh.transpose() * scale;
            for i in 0..s.nrows() {
                let limit = if self.causal { i + 1 } else { s.ncols() };
                let mut row = s.row_mut(i);
                let max = (0..limit).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..row.len() {
                    row[j] = if j < limit { (row[j] - max).exp() } else { 0.0 };
                    total += row[j];
                }
                row /= total;
            }
            mixed.columns_mut(h * dh, dh).copy_from(&(&s * v.columns(h * dh, dh)));
            probs.push(s);
        }
        let y = self.out.forward(p, &mixed);
        (y, AttentionCache { q, k, v, probs, mixed })
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(
        &self,
        p: &ParamSet,
        g: &mut ParamSet,
        xq: &DMatrix<f64>,
        xkv: &DMatrix<f64>,
        cache: &AttentionCache,
        dy: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let dmixed = self.out.backward(p, g, &cache.mixed, dy);
        let dim = cache.q.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = DMatrix::zeros(cache.q.nrows(), dim);
        let mut dk = DMatrix::zeros(cache.k.nrows(), dim);
        let mut dv = DMatrix::zeros(cache.v.nrows(), dim);
        for h in 0..self.heads {
            let a = &cache.probs[h];
            let dout = dmixed.columns(h * dh, dh);
            let da = dout * cache.v.columns(h * dh, dh).transpose();
            dv.columns_mut(h * dh, dh).copy_from(&(a.transpose() * dout));
            let mut ds = a.component_mul(&da);
            for i in 0..ds.nrows() {
                let dot = ds.row(i).sum();
                for j in 0..ds.ncols() {
                    ds[(i, j)] -= a[(i, j)] * dot;
                }
            }
            ds *= scale;
            dq.columns_mut(h * dh, dh).copy_from(&(&ds * cache.k.columns(h * dh, dh)));
            dk.columns_mut(h * dh, dh).copy_from(&(ds.transpose() * cache.q.columns(h * dh, dh)));
        }
        *g.get_mut(self.query) += xq.transpose() * &dq;
        *g.get_mut(self.key) += xkv.transpose() * &dk;
        *g.get_mut(self.value) += xkv.transpose() * &dv;
        let dxq = dq * p.get(self.query).transpose();
        let dxkv = dk * p.get(self.key).transpose() + dv * p.get(self.value).transpose();
        (dxq, dxkv)
    }
}

/// `[sin(x w_0), cos(x w_0), sin(x w_1), ...]` with geometric frequencies.
pub fn sinusoid(x: f64, dim: usize) -> RowDVector<f64> {
    RowDVector::from_fn(dim, |_, j| {
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (x * freq).sin()
        } else {
            (x * freq).cos()
        }
    })
}

pub fn positional_encoding(tokens: usize, dim: usize) -> DMatrix<f64> {
    let mut pe = DMatrix::zeros(tokens, dim);
    for i in 0..tokens {
        pe.row_mut(i).copy_from(&sinusoid(i as f64, dim));
    }
    pe
}
