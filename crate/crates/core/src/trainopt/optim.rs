//! First-order and quasi-Newton optimizers over flat parameter vectors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{structural, Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(structural(format!(
                "Adam state has {} entries, params {}, gradient {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient entry {i}")));
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Curvature pairs with `s^T y` at or below this are dropped.
pub const CURVATURE_FLOOR: f64 = 1e-10;
pub const ARMIJO_C1: f64 = 1e-4;
pub const MAX_BACKTRACKS: usize = 20;

/// Limited-memory BFGS with Armijo backtracking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lbfgs {
    pub memory: usize,
    pub s: VecDeque<Vec<f64>>,
    pub y: VecDeque<Vec<f64>>,
}

/// Result of one L-BFGS iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsStep {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Step length accepted, zero when stalled.
    pub step: f64,
    pub stalled: bool,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new(memory: usize) -> Self {
        Self {
            memory,
            s: VecDeque::new(),
            y: VecDeque::new(),
        }
    }

    /// Two-loop recursion: returns `-H g`.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let k = self.s.len();
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&self.s[i], &self.y[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One iteration from `params` with known `(loss, grad)`. `eval` returns
    /// loss and gradient; numeric errors during the search shrink the step.
    pub fn step(
        &mut self,
        params: &mut [f64],
        loss: f64,
        grad: &[f64],
        lr: f64,
        eval: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    ) -> Result<LbfgsStep> {
        if grad.len() != params.len() {
            return Err(structural("gradient length does not match parameters"));
        }
        let mut d = self.direction(grad);
        let mut slope = dot(grad, &d);
        if !(slope < 0.0) {
            // not a descent direction: restart from steepest descent
            self.s.clear();
            self.y.clear();
            d = grad.iter().map(|g| -g).collect();
            slope = -dot(grad, grad);
        }
        if slope == 0.0 {
            return Ok(LbfgsStep {
                loss,
                grad: grad.to_vec(),
                step: 0.0,
                stalled: true,
                evaluations: 0,
            });
        }
        let mut a = lr;
        let mut trial = vec![0.0; params.len()];
        for k in 0..=MAX_BACKTRACKS {
            for i in 0..params.len() {
                trial[i] = params[i] + a * d[i];
            }
            match eval(&trial) {
                Ok((f, g)) if f.is_finite() && f <= loss + ARMIJO_C1 * a * slope && g.iter().all(|v| v.is_finite()) => {
                    let s: Vec<f64> = d.iter().map(|di| a * di).collect();
                    let y: Vec<f64> = g.iter().zip(grad).map(|(a, b)| a - b).collect();
                    if dot(&s, &y) > CURVATURE_FLOOR {
                        if self.s.len() == self.memory {
                            self.s.pop_front();
                            self.y.pop_front();
                        }
                        self.s.push_back(s);
                        self.y.push_back(y);
                    }
                    params.copy_from_slice(&trial);
                    return Ok(LbfgsStep {
                        loss: f,
                        grad: g,
                        step: a,
                        stalled: false,
                        evaluations: k + 1,
                    });
                }
                Ok(_) | Err(Error::Numeric(_)) => a *= 0.5,
                Err(e) => return Err(e),
            }
        }
        Ok(LbfgsStep {
            loss,
            grad: grad.to_vec(),
            step: 0.0,
            stalled: true,
            evaluations: MAX_BACKTRACKS + 1,
        })
    }
}
