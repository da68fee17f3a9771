use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segda_grad::{Bound, Graph, ParamGroup, ParamStore, Tensor, Var};

use super::normal_tensor;
use crate::error::{CoreError, Result};

/// Learnable single linear layer `d → C`, the alternative to the fixed
/// ETF classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    params: ParamStore,
    num_classes: usize,
    feature_dim: usize,
}

impl LinearHead {
    pub fn new(feature_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert(
            "head.weight",
            ParamGroup::Head,
            normal_tensor(&mut rng, &[num_classes, feature_dim], (1.0 / feature_dim as f64).sqrt()),
        );
        params.insert("head.bias", ParamGroup::Head, Tensor::zeros(&[num_classes]));
        Self { params, num_classes, feature_dim }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let w = params.get("head.weight")?;
        let [c, d] = w.shape()[..] else {
            return Err(CoreError::Contract("head.weight must be C×d".into()));
        };
        if params.get("head.bias")?.shape() != [c] {
            return Err(CoreError::Contract("head.bias must have C entries".into()));
        }
        Ok(Self { params, num_classes: c, feature_dim: d })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Class logits `C × n` for a `d × n` feature matrix.
    pub fn logits(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        match g.shape(features) {
            [d, _] if *d == self.feature_dim => {}
            s => return Err(CoreError::UnsupportedDimension(format!("head expects {}×n, got {s:?}", self.feature_dim))),
        }
        let z = g.matmul(b.get("head.weight")?, features)?;
        Ok(g.add_bias(z, b.get("head.bias")?, 0)?)
    }

    /// Unit-normalized class weight vectors as columns (`d × C`).
    pub fn unit_prototypes(&self) -> Tensor {
        let w = self.params.get("head.weight").expect("head weight present");
        let mut t = w.transpose().expect("matrix");
        let (d, c) = (self.feature_dim, self.num_classes);
        for j in 0..c {
            let n = (0..d).map(|i| t.get(&[i, j]).powi(2)).sum::<f64>().sqrt().max(1e-12);
            for i in 0..d {
                let v = t.get(&[i, j]);
                t.set(&[i, j], v / n);
            }
        }
        t
    }
}
