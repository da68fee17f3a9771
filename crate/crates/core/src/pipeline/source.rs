use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segda_grad::{Graph, Tensor, Var};

use super::{
    evaluate, nc_report, pixel_embeddings, scene_features, stack_images, Classifier, ExperimentConfig, HeadKind, LogRecord,
    Sampler, Sgd, Stage,
};
use crate::error::{CoreError, Result};
use crate::etf::{dr_loss_graph, ClassMemory, EtfClassifier};
use crate::losses::cross_entropy;
use crate::networks::{LinearHead, PixelModule};
use crate::synthdata::{rotate_hue, LabeledScene};

/// Outputs of supervised training.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceArtifacts {
    pub pixel: PixelModule,
    pub classifier: Classifier,
    /// Per-class means of the final features over the training split.
    pub memory: ClassMemory,
    pub log: Vec<LogRecord>,
}

/// Random brightness, contrast, saturation and hue jitter.
pub fn color_augment(image: &Tensor, rng: &mut impl Rng) -> Tensor {
    let brightness = rng.gen_range(-0.1..0.1);
    let contrast = rng.gen_range(0.8..1.2);
    let saturation = rng.gen_range(0.8..1.2);
    let hue = rng.gen_range(-10.0..10.0);
    let hw = image.len() / 3;
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for j in 0..hw {
        let rgb = rotate_hue([d[j], d[hw + j], d[2 * hw + j]], hue);
        let grey = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
        for k in 0..3 {
            let v = grey + (rgb[k] - grey) * saturation;
            out[k * hw + j] = ((v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn onehot(labels: &[usize], classes: usize) -> Tensor {
    let n = labels.len();
    let mut t = Tensor::zeros(&[classes, n]);
    for (j, &l) in labels.iter().enumerate() {
        t.data_mut()[l * n + j] = 1.0;
    }
    t
}

/// Supervised loss of one item's `d × n` features against its labels.
pub(crate) fn supervised_loss(
    g: &mut Graph,
    classifier: &Classifier,
    head: Option<&segda_grad::Bound>,
    features: Var,
    labels: &[usize],
    config: &ExperimentConfig,
) -> Result<Var> {
    match classifier {
        Classifier::Etf(etf) => dr_loss_graph(g, features, labels, etf, config.reduction),
        Classifier::Linear(_) => {
            let z = classifier.logits(g, head, features, 1.0)?;
            let p = g.softmax(z, 0)?;
            let n = labels.len();
            cross_entropy(g, p, &onehot(labels, classifier.num_classes()), &Tensor::ones(&[n]), config.reduction)
        }
    }
}

/// Initial pixel module and classifier for `config`.
pub(crate) fn initial_models(config: &ExperimentConfig, num_classes: usize) -> Result<(PixelModule, Classifier)> {
    let pixel = PixelModule::new(&config.arch, config.derived_seed("pixel"))?;
    let classifier = match config.head {
        HeadKind::EtfHead => Classifier::Etf(EtfClassifier::new(num_classes, config.arch.feature_dim, config.derived_seed("etf"))?),
        HeadKind::MlpHead => Classifier::Linear(LinearHead::new(config.arch.feature_dim, num_classes, config.derived_seed("head"))),
    };
    Ok((pixel, classifier))
}

fn source_record(
    iter: usize,
    pixel: &PixelModule,
    classifier: &Classifier,
    nc_scenes: &[&LabeledScene],
    val: &[&LabeledScene],
    losses: BTreeMap<String, f64>,
) -> Result<LogRecord> {
    let report = evaluate(pixel, classifier, val, 0)?;
    let nc = nc_report(pixel, classifier, nc_scenes)?;
    Ok(LogRecord {
        stage: Stage::Source,
        iter,
        losses,
        miou: report.miou,
        nc1: nc.as_ref().map(|r| r.nc1),
        nc2: nc.as_ref().map(|r| r.nc2),
        nc3: nc.as_ref().map(|r| r.nc3),
        skipped_images: 0,
        clamp_counter: 0,
    })
}

/// Supervised training of the pixel module (and linear head, if any) on
/// `train`, logging validation mIoU and NC metrics every `eval_interval`
/// iterations, then one pass accumulating the class memory.
pub fn train_source(config: &ExperimentConfig, train: &[&LabeledScene], val: &[&LabeledScene]) -> Result<SourceArtifacts> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Contract("source training needs non-empty train and validation splits".into()));
    }
    let num_classes = train[0].num_classes;
    let (mut pixel, mut classifier) = initial_models(config, num_classes)?;
    let mut sgd = Sgd::new(&config.optimizer, config.source_iters);
    let mut sampler = Sampler::new(train.len(), config.derived_seed("source-order"))?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.derived_seed("color-aug"));
    let nc_scenes: Vec<&LabeledScene> = train.iter().take(config.nc_images.max(1)).copied().collect();
    let loss_name = match config.head {
        HeadKind::EtfHead => "dr",
        HeadKind::MlpHead => "ce",
    };

    let mut log = vec![source_record(0, &pixel, &classifier, &nc_scenes, val, BTreeMap::new())?];
    let mut sums = BTreeMap::new();
    let mut since = 0;
    for iter in 0..config.source_iters {
        let batch: Vec<&LabeledScene> = sampler.batch(config.batch_size).into_iter().map(|i| train[i]).collect();
        let mut images = stack_images(&batch)?;
        if config.color_aug {
            let per = images.len() / batch.len();
            for (i, s) in batch.iter().enumerate() {
                let a = color_augment(&s.image, &mut aug_rng);
                images.data_mut()[i * per..(i + 1) * per].copy_from_slice(a.data());
            }
        }

        let mut g = Graph::new();
        let b = pixel.params().bind(&mut g)?;
        let hb = classifier.params().map(|p| p.bind(&mut g)).transpose()?;
        let x = g.constant(images);
        let feats = pixel.forward(&mut g, &b, x, true)?.features;
        let mut total: Option<Var> = None;
        for (i, s) in batch.iter().enumerate() {
            let fi = pixel_embeddings(&mut g, feats, i)?;
            let l = supervised_loss(&mut g, &classifier, hb.as_ref(), fi, &s.mask, config)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = g.scale(total, 1.0 / batch.len() as f64);
        *sums.entry(loss_name.to_string()).or_insert(0.0) += g.value(loss).item();
        since += 1;

        let grads = g.backward(loss)?;
        let stats = g.bn_stats(feats).cloned().ok_or_else(|| CoreError::Contract("missing batch statistics".into()))?;
        sgd.step(pixel.params_mut(), &grads, iter);
        if let Some(p) = classifier.params_mut() {
            sgd.step(p, &grads, iter);
        }
        let count = feats_count(&g, feats);
        pixel.update_running_stats(&stats, count);

        if (iter + 1) % config.eval_interval == 0 || iter + 1 == config.source_iters {
            let losses = super::mean_losses(&sums, since);
            log.push(source_record(iter + 1, &pixel, &classifier, &nc_scenes, val, losses)?);
            sums.clear();
            since = 0;
        }
    }

    let mut memory = ClassMemory::new(config.arch.feature_dim, num_classes);
    for s in train {
        memory.accumulate(&scene_features(&pixel, s)?, &s.mask)?;
    }
    Ok(SourceArtifacts { pixel, classifier, memory, log })
}

/// Number of values per channel in a `N × C × H × W` tensor.
pub(crate) fn feats_count(g: &Graph, v: Var) -> usize {
    let s = g.shape(v);
    s[0] * s[2] * s[3]
}
