use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use segda_grad::Tensor;

use crate::error::{CoreError, Result};

/// Seeded table of fixed unit-norm class embeddings used as segment
/// decoder queries. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbedder {
    dim: usize,
    table: Vec<Vec<f64>>,
}

impl ClassEmbedder {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim < 2 {
            return Err(CoreError::Config(format!("class embedder needs classes ≥ 1 and dim ≥ 2, got {num_classes}, {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        while table.len() < num_classes {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v: Vec<f64> = v.into_iter().map(|x| x / n).collect();
            let distinct = table.iter().all(|t| t.iter().zip(&v).any(|(a, b)| (a - b).abs() > 1e-9));
            if n > 1e-9 && distinct {
                table.push(v);
            }
        }
        Ok(Self { dim, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.table.len()
    }

    /// Embeddings of `class_ids` as columns of a `dim × len` tensor.
    pub fn embed(&self, class_ids: &[usize]) -> Result<Tensor> {
        if class_ids.is_empty() {
            return Err(CoreError::EmptyRepresentation);
        }
        let k = class_ids.len();
        let mut out = vec![0.0; self.dim * k];
        for (j, &id) in class_ids.iter().enumerate() {
            let v = self
                .table
                .get(id)
                .ok_or_else(|| CoreError::InvalidLabel(format!("unknown class id {id}")))?;
            for (i, &x) in v.iter().enumerate() {
                out[i * k + j] = x;
            }
        }
        Ok(Tensor::new(vec![self.dim, k], out)?)
    }
}

/// Frozen class embeddings for `class_ids`, in order.
pub fn class_embeddings(class_ids: &[usize], embedder: &ClassEmbedder) -> Result<Tensor> {
    embedder.embed(class_ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_contract() {
        let e = ClassEmbedder::new(6, 16, 5).unwrap();
        let t = class_embeddings(&[2, 5], &e).unwrap();
        assert_eq!(t.column(0), e.embed(&[2]).unwrap().column(0));
        assert_eq!(t.column(1), e.embed(&[5]).unwrap().column(0));
        let twice = e.embed(&[3, 3]).unwrap();
        assert_eq!(twice.column(0), twice.column(1));
        assert!(matches!(e.embed(&[6]), Err(CoreError::InvalidLabel(_))));
        for c in 0..6 {
            let v = e.embed(&[c]).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(ClassEmbedder::new(6, 16, 5).unwrap(), e);
    }
}
