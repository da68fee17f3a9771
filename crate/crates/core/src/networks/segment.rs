use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segda_grad::{Bound, Graph, ParamGroup, ParamStore, Tensor, Var};

use super::{normal_tensor, ArchConfig};
use crate::error::{CoreError, Result};

/// One single-head cross-attention block `θ_sd`. Frozen class queries
/// attend over the spatial positions of the encoder feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentModule {
    config: ArchConfig,
    params: ParamStore,
}

impl SegmentModule {
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ce, ff) = (config.feature_dim, config.encoder_channels, config.ff_dim);
        let sd = ParamGroup::SegmentDecoder;
        let mut params = ParamStore::new();
        let lin = |rng: &mut ChaCha8Rng, out: usize, inp: usize| normal_tensor(rng, &[out, inp], (1.0 / inp as f64).sqrt());
        params.insert("seg.query.weight", sd, lin(&mut rng, d, d));
        params.insert("seg.key.weight", sd, lin(&mut rng, d, ce));
        params.insert("seg.value.weight", sd, lin(&mut rng, d, ce));
        params.insert("seg.out.weight", sd, lin(&mut rng, d, d));
        params.insert("seg.ff1.weight", sd, lin(&mut rng, ff, d));
        params.insert("seg.ff1.bias", sd, Tensor::zeros(&[ff]));
        params.insert("seg.ff2.weight", sd, lin(&mut rng, d, ff));
        params.insert("seg.ff2.bias", sd, Tensor::zeros(&[d]));
        Ok(Self { config: config.clone(), params })
    }

    pub fn from_parts(config: ArchConfig, params: ParamStore) -> Result<Self> {
        if !Self::new(&config, 0)?.params.same_layout(&params) {
            return Err(CoreError::Contract("segment-module parameter layout mismatch".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Segment representation `S` (`d_S × C′`) for one image.
    ///
    /// `featmap` is that image's `C_E × h × w` encoder map; `queries` holds
    /// one frozen class embedding per column. Output columns follow query
    /// order and are L2-normalized.
    pub fn decode_segments(&self, g: &mut Graph, b: &Bound, featmap: Var, queries: &Tensor) -> Result<Var> {
        let d = self.config.feature_dim;
        let [ce, h, w] = g.shape(featmap)[..] else {
            return Err(CoreError::UnsupportedDimension(format!("featmap must be C_E×h×w, got {:?}", g.shape(featmap))));
        };
        if ce != self.config.encoder_channels {
            return Err(CoreError::UnsupportedDimension(format!("featmap has {ce} channels, expected {}", self.config.encoder_channels)));
        }
        match queries.shape() {
            [qd, _] if *qd == d => {}
            s => return Err(CoreError::UnsupportedDimension(format!("queries must be {d}×C′, got {s:?}"))),
        }
        let f = g.reshape(featmap, &[ce, h * w])?;
        let q0 = g.constant(queries.clone());
        let q = g.matmul(b.get("seg.query.weight")?, q0)?;
        let keys = g.matmul(b.get("seg.key.weight")?, f)?;
        let values = g.matmul(b.get("seg.value.weight")?, f)?;
        let kt = g.transpose(keys)?;
        let logits = g.matmul(kt, q)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        // P × C′, normalized over spatial positions.
        let attn = g.softmax(logits, 0)?;
        let ctx = g.matmul(values, attn)?;
        let proj = g.matmul(b.get("seg.out.weight")?, ctx)?;
        let hidden = g.add(q0, proj)?;
        let ff = g.matmul(b.get("seg.ff1.weight")?, hidden)?;
        let ff = g.add_bias(ff, b.get("seg.ff1.bias")?, 0)?;
        let ff = g.relu(ff);
        let ff = g.matmul(b.get("seg.ff2.weight")?, ff)?;
        let ff = g.add_bias(ff, b.get("seg.ff2.bias")?, 0)?;
        let out = g.add(hidden, ff)?;
        Ok(g.l2_normalize(out, 0)?)
    }
}
