use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Named weight matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<DMatrix<f64>>,
}

/// Index of a block inside a [`ParamSet`].
pub type BlockId = usize;

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DMatrix<f64>) -> BlockId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: BlockId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<BlockId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, id: BlockId) -> &DMatrix<f64> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: BlockId) -> &mut DMatrix<f64> {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DMatrix<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| DMatrix::zeros(v.nrows(), v.ncols())).collect(),
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &ParamSet) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b * s;
        }
    }

    /// Replaces values by name; every block of `self` must be present with the same shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other
                .id(name)
                .map(|i| other.get(i))
                .ok_or_else(|| Error::validation("checkpoint", format!("missing parameter block {name}")))?;
            if src.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {:?}", value.shape()),
                    got: format!("{:?}", src.shape()),
                });
            }
            value.copy_from(src);
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam with decoupled moments per block.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads.get(i);
            let m = self.m.get_mut(i);
            m.zip_apply(g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v.get_mut(i);
            v.zip_apply(g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (m, v) = (self.m.get(i), self.v.get(i));
            let p = params.get_mut(i);
            for k in 0..p.len() {
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Exponential moving average of the weights with the usual warm-up,
/// `decay_k = min(decay, (1 + k) / (10 + k))`.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    pub weights: ParamSet,
    updates: u64,
}

impl Ema {
    pub fn new(params: &ParamSet, decay: f64) -> Self {
        Self {
            decay,
            weights: params.clone(),
            updates: 0,
        }
    }

    pub fn current_decay(&self) -> f64 {
        let k = self.updates as f64;
        self.decay.min((1.0 + k) / (10.0 + k))
    }

    pub fn update(&mut self, params: &ParamSet) {
        let d = self.current_decay();
        self.weights.scale(d);
        self.weights.axpy(1.0 - d, params);
        self.updates += 1;
    }
}
