use super::params::{Grads, Params};

/// Adam over the trainable entries of a parameter vector. Frozen entries
/// (input statistics and the like) are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    mask: Vec<bool>,
    step: u64,
}

impl Adam {
    pub fn new(params: &Params, learning_rate: f64) -> Self {
        let n = params.values.len();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            mask: params.layout.trainable_mask(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Params, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.values.len() {
            if !self.mask[i] {
                continue;
            }
            let g = grads.values[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params.values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Layout;

    #[test]
    fn frozen_entries_untouched() {
        let mut layout = Layout::default();
        layout.add("w", 1, 2, true);
        layout.add("stat", 1, 2, false);
        let mut p = Params::zeros(layout);
        p.values = vec![1.0, 1.0, 5.0, 5.0];
        let mut adam = Adam::new(&p, 0.1);
        adam.update(&mut p, &Grads { values: vec![1.0, -1.0, 1.0, 1.0] });
        assert!((p.values[0] - 0.9).abs() < 1e-6);
        assert!((p.values[1] - 1.1).abs() < 1e-6);
        assert_eq!(&p.values[2..], &[5.0, 5.0]);
    }
}
