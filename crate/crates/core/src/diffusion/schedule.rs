use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-preserving noise schedule with a linear beta ramp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(512, 1e-4, 2e-2)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let mut prod = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                prod *= 1.0 - b;
                prod
            })
            .collect();
        Self { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bars[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::OutOfDomain {
                what: "diffusion step",
                value: t as f64,
                lo: 0.0,
                hi: (self.steps() - 1) as f64,
            });
        }
        Ok(())
    }

    /// `alpha(t) x0 + sigma(t) eps`
    pub fn q_sample(&self, x0: &DMatrix<f64>, t: usize, eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_step(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", x0.shape()),
                got: format!("{:?}", eps.shape()),
            });
        }
        Ok(x0 * self.alpha(t) + eps * self.sigma(t))
    }

    /// Descending, evenly strided subset of `n` steps starting at `T - 1`.
    pub fn ddim_steps(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if n == 0 || n > total {
            return Err(Error::validation("n_steps", format!("must be in 1..={total}, got {n}")));
        }
        let mut steps: Vec<usize> = (0..n)
            .map(|i| total - 1 - (i * total) / n)
            .collect();
        steps.dedup();
        Ok(steps)
    }
}
