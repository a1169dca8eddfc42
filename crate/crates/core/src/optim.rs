use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over a fixed list of flat parameter buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect();
        let (m, v) = match kind {
            OptimizerKind::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
        };
        Optimizer { kind, step: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters whose gradient is `None` are left
    /// untouched, including their moment estimates.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("optimizer", &[params.len()], &[grads.len()]));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    for (x, d) in p.iter_mut().zip(g.iter()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if self.m.len() != params.len() {
                    return Err(Error::dim("optimizer state", &[self.m.len()], &[params.len()]));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let Some(g) = g else { continue };
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..p.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        p[k] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::adam(0.1), &[2]);
        let mut p = [1.0, -1.0];
        let g = [3.0, -0.5];
        opt.step(&mut [&mut p[..]], &[Some(&g[..])]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.1 }, &[1]);
        let mut x = [5.0];
        for _ in 0..200 {
            let g = [2.0 * x[0]];
            opt.step(&mut [&mut x[..]], &[Some(&g[..])]).unwrap();
        }
        assert!(x[0].abs() < 1e-10);
    }

    #[test]
    fn missing_grad_leaves_param() {
        let mut opt = Optimizer::new(OptimizerKind::adam(0.1), &[1, 1]);
        let (mut a, mut b) = (vec![1.0], vec![2.0]);
        let g = [1.0];
        opt.step(&mut [&mut a[..], &mut b[..]], &[Some(&g[..]), None]).unwrap();
        assert_eq!(b, vec![2.0]);
        assert!(a[0] < 1.0);
    }
}
