use crate::model::ModelParams;

/// Adam with decoupled weight decay; moments mirror the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let gb = grads.blocks();
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
            .zip(gb);
        for (((p, m), v), g) in blocks {
            let g = g.matrix.as_slice();
            for (((p, m), v), &g) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g)
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (step + wd * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            d: 4,
            heads: 1,
            top_x: 5,
            num_categories: 3,
            word_vocab_size: 5,
            d_c: 2,
            d_i: 2,
            d_w: 2,
            time_rows: 4,
            max_len: 6,
            ..ModelConfig::default()
        };
        build_model(&cfg).unwrap().params
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.fill(-3.0);
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8, 0.0);
        adam.update(&mut p, &g, 1e-3);
        for (a, b) in p.blocks().iter().zip(before.blocks()) {
            for (x, y) in a.matrix.as_slice().iter().zip(b.matrix.as_slice()) {
                assert!((x - y - 1e-3).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.fill(0.7);
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8, 0.01);
        adam.update(&mut p, &g, 0.0);
        assert_eq!(p, before);
        assert_eq!(adam.t, 1);
    }
}
