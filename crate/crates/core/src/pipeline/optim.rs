use std::collections::BTreeMap;

use segda_grad::{Gradients, ParamGroup, ParamStore, Tensor};

use super::config::OptimizerConfig;

/// SGD with heavy-ball momentum, per-group learning rates, linear warmup
/// and polynomial decay `(1 − t/T)^power` afterwards.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: OptimizerConfig,
    total_iters: usize,
    warmup_iters: usize,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: &OptimizerConfig, total_iters: usize) -> Self {
        let warmup_iters = (config.warmup_fraction * total_iters as f64).round() as usize;
        Self { config: config.clone(), total_iters, warmup_iters, velocity: BTreeMap::new() }
    }

    /// Learning rate of `group` at iteration `iter` (0-based).
    pub fn lr(&self, group: ParamGroup, iter: usize) -> f64 {
        let base = match group {
            ParamGroup::Encoder => self.config.encoder_lr,
            _ => self.config.decoder_lr,
        };
        if iter < self.warmup_iters {
            base * (iter + 1) as f64 / self.warmup_iters as f64
        } else {
            let left = 1.0 - iter as f64 / self.total_iters.max(1) as f64;
            base * left.max(0.0).powf(self.config.decay_power)
        }
    }

    /// Updates every parameter of `store` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, iter: usize) {
        let mu = self.config.momentum;
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.param(name) else { continue };
            let lr = self.lr(p.group, iter);
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use segda_grad::Graph;

    #[test]
    fn warmup_and_group_rates() {
        let sgd = Sgd::new(&OptimizerConfig { momentum: 0.0, encoder_lr: 0.1, decoder_lr: 1.0, warmup_fraction: 0.1, decay_power: 0.0 }, 100);
        assert_eq!(sgd.lr(ParamGroup::Encoder, 0), 0.01);
        assert_eq!(sgd.lr(ParamGroup::PixelDecoder, 4), 0.5);
        assert_eq!(sgd.lr(ParamGroup::SegmentDecoder, 10), 1.0);
        assert_eq!(sgd.lr(ParamGroup::SegmentDecoder, 99), 1.0);

        let sgd = Sgd::new(&OptimizerConfig { momentum: 0.0, encoder_lr: 0.1, decoder_lr: 1.0, warmup_fraction: 0.1, decay_power: 1.0 }, 100);
        assert_eq!(sgd.lr(ParamGroup::PixelDecoder, 9), 1.0);
        assert!((sgd.lr(ParamGroup::PixelDecoder, 10) - 0.9).abs() < 1e-15);
        assert!((sgd.lr(ParamGroup::Encoder, 75) - 0.025).abs() < 1e-15);
        assert!((sgd.lr(ParamGroup::PixelDecoder, 99) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn momentum_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        store.insert("x", ParamGroup::PixelDecoder, Tensor::vector(vec![1.0]));
        let mut sgd = Sgd::new(&OptimizerConfig { momentum: 0.5, encoder_lr: 0.0, decoder_lr: 0.1, warmup_fraction: 0.0, decay_power: 0.0 }, 10);
        let mut xs = vec![];
        for it in 0..2 {
            let mut g = Graph::new();
            let b = store.bind(&mut g).unwrap();
            let x = b.get("x").unwrap();
            let l = g.square(x);
            let l = g.sum(l);
            let grads = g.backward(l).unwrap();
            sgd.step(&mut store, &grads, it);
            xs.push(store.get("x").unwrap().data()[0]);
        }
        // v1 = 2, x1 = 0.8; v2 = 0.5·2 + 1.6 = 2.6, x2 = 0.54.
        assert!((xs[0] - 0.8).abs() < 1e-15);
        assert!((xs[1] - 0.54).abs() < 1e-15);
    }
}
