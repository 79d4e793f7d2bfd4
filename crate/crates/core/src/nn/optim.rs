use serde::{Deserialize, Serialize};

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v ← μ v + (g + λ θ)`, `θ ← θ − η v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: vec![0.0; len] }
    }

    /// Rescales `grads` so that its L2 norm is at most `max_norm`;
    /// returns the pre-clip norm.
    pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in grads.iter_mut() {
                *g *= s;
            }
        }
        norm
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.velocity.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let d = g + self.weight_decay * *p;
            *v = self.momentum * *v + d;
            *p -= self.lr * *v;
        }
    }
}
