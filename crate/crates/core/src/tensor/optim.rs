use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Heavy-ball momentum; `momentum = 0` is plain SGD.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64, params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect::<Vec<_>>()
        };
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            learning_rate,
            weight_decay,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NanGradient(name.to_string()));
            }
        }
        self.steps += 1;
        let lr: T = cst(self.learning_rate);
        let wd: T = cst(self.weight_decay);
        for (slot, (_, t)) in params.iter_mut().enumerate() {
            let grad: Vec<T> = match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); t.numel()],
            };
            let m = &mut self.first[slot];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu: T = cst(momentum);
                    for ((p, &g), b) in t.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()) {
                        let d = g + wd * *p;
                        *b = mu * *b + d;
                        *p -= lr * *b;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[slot];
                    let (b1, b2, e): (T, T, T) = (cst(beta1), cst(beta2), cst(eps));
                    let bc1 = T::one() - b1.powi(self.steps as i32);
                    let bc2 = T::one() - b2.powi(self.steps as i32);
                    for (((p, &g), mi), vi) in t.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let d = g + wd * *p;
                        *mi = b1 * *mi + (T::one() - b1) * d;
                        *vi = b2 * *vi + (T::one() - b2) * d * d;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
            t.zero_grad();
        }
        Ok(())
    }

    /// Moment buffers for checkpointing: (first, second, step count).
    pub fn state(&self) -> (&[Vec<T>], &[Vec<T>], u64) {
        (&self.first, &self.second, self.steps)
    }

    pub fn restore(&mut self, first: Vec<Vec<T>>, second: Vec<Vec<T>>, steps: u64) -> Result<()> {
        let same = |a: &[Vec<T>], b: &[Vec<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
        };
        if !same(&first, &self.first) || !same(&second, &self.second) {
            return Err(Error::invalid("optimizer state does not match parameter shapes"));
        }
        self.first = first;
        self.second = second;
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: Option<f64>) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let slot = ps.push("w", Tensor::new(vec![1], vec![value]).unwrap());
        if let Some(g) = grad {
            ps.tensor_mut(slot).accumulate_grad(&[g]);
        }
        ps
    }

    #[test]
    fn plain_sgd_step() {
        let mut ps = single(0.0, Some(1.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, 0.0, &ps);
        opt.step(&mut ps).unwrap();
        assert!((ps.tensor(0).values()[0] + 0.1).abs() < 1e-15);
        assert!(ps.tensor(0).grad().is_none());
    }

    #[test]
    fn adam_first_step_closed_form() {
        for g in [0.3, -2.0, 1e-3] {
            let mut ps = single(1.0, Some(g));
            let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3, 0.0, &ps);
            opt.step(&mut ps).unwrap();
            // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps)
            let expect = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((ps.tensor(0).values()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        for kind in [OptimizerKind::Sgd { momentum: 0.9 }, OptimizerKind::adam()] {
            let mut ps = single(0.7, Some(0.0));
            let mut opt = Optimizer::new(kind, 0.24, 0.0, &ps);
            opt.step(&mut ps).unwrap();
            assert_eq!(ps.tensor(0).values()[0], 0.7);
            let mut ps = single(0.7, None);
            opt.step(&mut ps).unwrap();
            assert_eq!(ps.tensor(0).values()[0], 0.7);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = single(0.0, Some(f64::NAN));
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, 0.0, &ps);
        match opt.step(&mut ps) {
            Err(Error::NanGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut ps = single(0.0, Some(1.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, 1.0, 0.0, &ps);
        opt.step(&mut ps).unwrap();
        ps.tensor_mut(0).accumulate_grad(&[1.0]);
        opt.step(&mut ps).unwrap();
        // -1 then -(0.5 + 1)
        assert_eq!(ps.tensor(0).values()[0], -2.5);
    }
}
