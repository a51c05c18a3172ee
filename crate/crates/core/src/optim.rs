//! SGD with heavy-ball momentum and the staged learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::InvalidArgument("parameter group changed size".into()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.dims() != g.dims() || v.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "sgd step",
                    lhs: p.dims().to_vec(),
                    rhs: g.dims().to_vec(),
                });
            }
            let mut data = p.data().to_vec();
            for ((w, &gi), vi) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= lr * *vi;
            }
            **p = Tensor::new(g.dims().to_vec(), data)?;
        }
        Ok(())
    }
}

/// Base rate decayed ×0.1 at `floor(2T/3)` and again at `floor(5T/6)`.
pub fn staged_lr(base: f32, epoch: usize, total: usize) -> f32 {
    let mut lr = base;
    if epoch >= 2 * total / 3 {
        lr *= 0.1;
    }
    if epoch >= 5 * total / 6 {
        lr *= 0.1;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn quadratic_probe_geometric_decay() {
        // L = ½w², lr 0.1, no momentum: w_t = w_0 · 0.9^t.
        let mut w = Tensor::scalar(2.0);
        let mut opt = Sgd::new(0.0);
        for t in 1..=10 {
            let mut tape = Tape::new();
            let v = tape.param(w.clone());
            let sq = tape.square(v);
            let l = tape.scale(sq, 0.5);
            let g = tape.backward(l).unwrap().take(v).unwrap();
            opt.step(&mut [&mut w], &[&g], 0.1).unwrap();
            let expect = 2.0 * 0.9f64.powi(t);
            assert!((w.data()[0] as f64 - expect).abs() < 1e-6 * expect.max(1.0), "step {t}");
        }
    }

    #[test]
    fn momentum_recursion() {
        let mut w = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.5);
        opt.step(&mut [&mut w], &[&g], 1.0).unwrap();
        opt.step(&mut [&mut w], &[&g], 1.0).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(w.data()[0], -2.5);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut w = Tensor::new(vec![2], vec![0.3, -1.7]).unwrap();
        let before = w.clone();
        Sgd::new(0.9)
            .step(&mut [&mut w], &[&Tensor::new(vec![2], vec![5.0, 2.0]).unwrap()], 0.0)
            .unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(staged_lr(1.0, 39, 60), 1.0);
        assert!((staged_lr(1.0, 40, 60) - 0.1).abs() < 1e-7);
        assert!((staged_lr(1.0, 50, 60) - 0.01).abs() < 1e-7);
    }
}
