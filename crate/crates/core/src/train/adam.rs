use crate::mil::Gradients;

/// Adam with decoupled weight decay.
///
/// Moments are kept in `f64`; parameters are read from and written back to `f32`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &Gradients) {
        if self.first.is_empty() {
            self.first = grads.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (k, block) in params.into_iter().enumerate() {
            let g = &grads.blocks[k];
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..block.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let p = f64::from(block[i]);
                let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p;
                block[i] = (p - self.learning_rate * update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![1.0f32, -2.0, 0.5];
        let g = Gradients {
            blocks: vec![vec![0.3, -4.0, 0.0]],
        };
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(vec![p.as_mut_slice()], &g);
        assert!((f64::from(p[0]) - 0.99).abs() < 1e-6);
        assert!((f64::from(p[1]) + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut p = vec![1.0f32, -2.0];
        let g = Gradients {
            blocks: vec![vec![1.0, 1.0]],
        };
        let mut opt = AdamW::new(0.0, 1e-5);
        for _ in 0..5 {
            opt.step(vec![p.as_mut_slice()], &g);
        }
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = vec![2.0f32];
        let g = Gradients {
            blocks: vec![vec![0.0]],
        };
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(vec![p.as_mut_slice()], &g);
        assert!((f64::from(p[0]) - 1.9).abs() < 1e-6);
    }
}
