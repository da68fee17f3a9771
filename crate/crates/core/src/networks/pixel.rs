use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segda_grad::{BnBatchStats, BnMode, Bound, Graph, ParamGroup, ParamStore, Tensor, Var};

use super::{normal_tensor, ArchConfig};
use crate::error::{CoreError, Result};

/// Spatial reduction of the encoder (two stride-2 convolutions).
pub const ENCODER_STRIDE: usize = 4;
const BN_MOMENTUM: f64 = 0.1;

/// Encoder `θ_e` and pixel decoder `θ_pd`, ending in batch normalization.
///
/// Encoder: conv3×3 → relu → conv3×3/2 → relu → conv3×3/2 → relu.
/// Decoder: up×2 → conv3×3 → relu → up×2 → conv3×3 → batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelModule {
    config: ArchConfig,
    params: ParamStore,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// Graph handles produced by one pixel-module forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PixelForward {
    /// `N × C_E × H/S × W/S`.
    pub featmap: Var,
    /// `N × d × H × W`, the output of the final batch norm (which carries
    /// the batch statistics in train mode, see [`Graph::bn_stats`]).
    pub features: Var,
}

fn conv_init(rng: &mut ChaCha8Rng, cout: usize, cin: usize) -> Tensor {
    normal_tensor(rng, &[cout, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt())
}

impl PixelModule {
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let mut params = ParamStore::new();
        let enc = ParamGroup::Encoder;
        let dec = ParamGroup::PixelDecoder;
        params.insert("enc.conv1.weight", enc, conv_init(&mut rng, c.stem_channels, c.in_channels));
        params.insert("enc.conv1.bias", enc, Tensor::zeros(&[c.stem_channels]));
        params.insert("enc.conv2.weight", enc, conv_init(&mut rng, c.mid_channels, c.stem_channels));
        params.insert("enc.conv2.bias", enc, Tensor::zeros(&[c.mid_channels]));
        params.insert("enc.conv3.weight", enc, conv_init(&mut rng, c.encoder_channels, c.mid_channels));
        params.insert("enc.conv3.bias", enc, Tensor::zeros(&[c.encoder_channels]));
        params.insert("dec.conv1.weight", dec, conv_init(&mut rng, c.decoder_channels, c.encoder_channels));
        params.insert("dec.conv1.bias", dec, Tensor::zeros(&[c.decoder_channels]));
        params.insert("dec.conv2.weight", dec, conv_init(&mut rng, c.feature_dim, c.decoder_channels));
        params.insert("dec.bn.gamma", dec, Tensor::ones(&[c.feature_dim]));
        params.insert("dec.bn.beta", dec, Tensor::zeros(&[c.feature_dim]));
        Ok(Self {
            config: config.clone(),
            params,
            running_mean: vec![0.0; c.feature_dim],
            running_var: vec![1.0; c.feature_dim],
        })
    }

    /// Reassembles a module from stored parts.
    pub fn from_parts(config: ArchConfig, params: ParamStore, running_mean: Vec<f64>, running_var: Vec<f64>) -> Result<Self> {
        let reference = Self::new(&config, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(CoreError::Contract("pixel-module parameter layout mismatch".into()));
        }
        if running_mean.len() != config.feature_dim || running_var.len() != config.feature_dim {
            return Err(CoreError::Contract("running statistics length mismatch".into()));
        }
        Ok(Self { config, params, running_mean, running_var })
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

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn running_stats_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.running_mean, &mut self.running_var)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(CoreError::UnsupportedDimension(format!("images must be N×C×H×W, got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(CoreError::UnsupportedDimension(format!("expected {} channels, got {c}", self.config.in_channels)));
        }
        if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(CoreError::UnsupportedDimension(format!(
                "image extent {h}×{w} not divisible by stride {ENCODER_STRIDE}"
            )));
        }
        Ok(())
    }

    /// Low-resolution feature map `F` of shape `N × C_E × H/S × W/S`.
    pub fn encode(&self, g: &mut Graph, b: &Bound, images: Var) -> Result<Var> {
        self.check_input(g.shape(images))?;
        let x = g.conv2d(images, b.get("enc.conv1.weight")?, Some(b.get("enc.conv1.bias")?), 1)?;
        let x = g.relu(x);
        let x = g.conv2d(x, b.get("enc.conv2.weight")?, Some(b.get("enc.conv2.bias")?), 2)?;
        let x = g.relu(x);
        let x = g.conv2d(x, b.get("enc.conv3.weight")?, Some(b.get("enc.conv3.bias")?), 2)?;
        Ok(g.relu(x))
    }

    /// Upsamples `F` back to full-resolution `N × d × H × W` features.
    pub fn decode_pixels(&self, g: &mut Graph, b: &Bound, featmap: Var, train: bool) -> Result<Var> {
        match g.shape(featmap) {
            [_, c, _, _] if *c == self.config.encoder_channels => {}
            s => {
                return Err(CoreError::UnsupportedDimension(format!(
                    "decoder expects N×{}×h×w, got {s:?}",
                    self.config.encoder_channels
                )))
            }
        }
        let x = g.upsample2(featmap)?;
        let x = g.conv2d(x, b.get("dec.conv1.weight")?, Some(b.get("dec.conv1.bias")?), 1)?;
        let x = g.relu(x);
        let x = g.upsample2(x)?;
        let x = g.conv2d(x, b.get("dec.conv2.weight")?, None, 1)?;
        let mode = if train {
            BnMode::Train
        } else {
            BnMode::Infer { mean: &self.running_mean, var: &self.running_var }
        };
        Ok(g.batch_norm(x, b.get("dec.bn.gamma")?, b.get("dec.bn.beta")?, mode)?)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, images: Var, train: bool) -> Result<PixelForward> {
        let featmap = self.encode(g, b, images)?;
        let features = self.decode_pixels(g, b, featmap, train)?;
        Ok(PixelForward { featmap, features })
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BnBatchStats, count: usize) {
        let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * stats.mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * stats.var[c] * unbias;
        }
    }

    /// Gradient-free inference-mode features `N × d × H × W`.
    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &b, x, false)?;
        Ok(g.value(out.features).clone())
    }
}
