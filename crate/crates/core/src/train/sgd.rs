use std::collections::HashMap;

use crate::graph::{Graph, Var};

/// SGD with heavy-ball momentum and L2 weight decay on `*.weight` arrays.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Reads the gradients of `bound` leaves from `g`.
    pub fn collect(g: &Graph, bound: &HashMap<String, Var>) -> HashMap<String, Vec<f32>> {
        bound.iter().filter_map(|(n, &v)| g.grad(v).map(|gr| (n.clone(), gr.to_vec()))).collect()
    }

    /// Updates every visited array that has a gradient.
    pub fn step(&mut self, grads: &HashMap<String, Vec<f32>>, lr: f64, visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut [f32]))) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        let velocity = &mut self.velocity;
        visit_mut(&mut |name, w| {
            let Some(g) = grads.get(name) else { return };
            let decay = if name.ends_with(".weight") { wd } else { 0.0 };
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi + decay * *wi;
                *wi -= lr * *vi;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_and_decay() {
        let mut sgd = Sgd::new(0.9, 0.1);
        let grads = HashMap::from([("a.weight".to_string(), vec![1.0f32]), ("a.bias".to_string(), vec![1.0f32])]);
        let mut w = [2.0f32];
        let mut b = [2.0f32];
        for _ in 0..2 {
            sgd.step(&grads, 0.5, |f| {
                f("a.weight", &mut w);
                f("a.bias", &mut b);
                f("untouched", &mut [0.0]);
            });
        }
        // weight: v1 = 1 + 0.2 = 1.2, w1 = 1.4; v2 = 1.08 + 1 + 0.14 = 2.22, w2 = 0.29
        assert!((w[0] - 0.29).abs() < 1e-6);
        // bias: v1 = 1, b1 = 1.5; v2 = 1.9, b2 = 0.55
        assert!((b[0] - 0.55).abs() < 1e-6);
    }
}
