use std::collections::BTreeMap;

use segda_grad::{softmax_along, Graph, ParamGroup, Tensor, Var};

use super::source::{feats_count, supervised_loss};
use super::{
    evaluate, mean_losses, pixel_embeddings, stack_images, Classifier, ExperimentConfig, LogRecord, MemMode, ReferenceKind, Sampler, Sgd,
    SourceArtifacts,
    Stage, TeacherKind,
};
use crate::error::{CoreError, Result};
use crate::etf::ClassMemory;
use crate::losses::{
    adaptation_loss_with, combined_loss, corrected_loss, cross_entropy, discovery_loss, memory_loss_with, CorrectedLoss,
    LossBreakdown,
};
use crate::networks::{ClassEmbedder, PixelModule, SegmentModule};
use crate::noise::{crop_segments, noise_transition, normalize_transition, ReferenceEmbedder};
use crate::synthdata::LabeledScene;
use crate::teacher::{copy_update, ema_update, pseudo_label_bundle, PseudoLabelBundle, TeacherState};

/// Everything that evolves or is consulted during adaptation.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub student: PixelModule,
    pub segment: SegmentModule,
    pub teacher: TeacherState,
    pub classifier: Classifier,
    pub prototypes: Tensor,
    pub memory: ClassMemory,
    pub class_embedder: ClassEmbedder,
    pub reference: ReferenceEmbedder,
}

impl AdaptState {
    pub fn new(config: &ExperimentConfig, source: &SourceArtifacts) -> Result<Self> {
        let c = source.classifier.num_classes();
        if source.memory.num_classes() != c || !(0..c).any(|k| source.memory.is_present(k)) {
            return Err(CoreError::Missing("source class memory is empty or does not match the classifier".into()));
        }
        let d = config.arch.feature_dim;
        Ok(Self {
            student: source.pixel.clone(),
            segment: SegmentModule::new(&config.arch, config.derived_seed("segment"))?,
            teacher: TeacherState::new(&source.pixel, config.alpha)?,
            prototypes: source.classifier.prototypes(),
            classifier: source.classifier.clone(),
            memory: source.memory.clone(),
            class_embedder: ClassEmbedder::new(c, d, config.derived_seed("class-embed"))?,
            reference: match config.reference {
                ReferenceKind::SourceEncoder => ReferenceEmbedder::encoder(source.pixel.clone()),
                ReferenceKind::RandomProjection => {
                    ReferenceEmbedder::new(d, config.arch.in_channels, config.derived_seed("reference-embed"))?
                }
            },
        })
    }
}

/// Graph handles of one target image's loss terms.
#[derive(Clone, Debug)]
pub struct ImageTerms {
    pub dapt: Var,
    pub corr: CorrectedLoss,
    pub dis: Var,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub memory_skipped: usize,
    pub no_discovery: bool,
    pub degenerate_crops: usize,
}

/// One assembled adaptation step, before backpropagation.
#[derive(Debug)]
pub struct StepGraph {
    pub graph: Graph,
    pub bundles: Vec<PseudoLabelBundle>,
    /// `None` for images without present classes.
    pub terms: Vec<Option<ImageTerms>>,
    pub replay: Option<Var>,
    /// Mean image total plus the replay term; `None` when nothing trains.
    pub objective: Option<Var>,
    pub features: Var,
    /// Trainable parameters registered while running the teacher.
    pub teacher_graph_params: usize,
}

fn teacher_bundles(config: &ExperimentConfig, state: &AdaptState, images: &Tensor, batch: usize) -> Result<(Vec<PseudoLabelBundle>, usize)> {
    let module = state.teacher.module();
    let mut tg = Graph::new();
    let tb = module.params().bind_frozen(&mut tg);
    let hb = state.classifier.params().map(|p| p.bind_frozen(&mut tg));
    let x = tg.constant(images.clone());
    let feats = module.forward(&mut tg, &tb, x, false)?.features;
    let [_, _, h, w] = tg.shape(feats)[..] else { unreachable!("pixel features are 4-d") };
    let mut bundles = Vec::with_capacity(batch);
    for i in 0..batch {
        let fi = pixel_embeddings(&mut tg, feats, i)?;
        let z = state.classifier.logits(&mut tg, hb.as_ref(), fi, config.logit_scale)?;
        let p = softmax_along(tg.value(z), 0).reshape(&[state.classifier.num_classes(), h, w])?;
        bundles.push(pseudo_label_bundle(&p, config.tau_h, config.tau_l)?);
    }
    Ok((bundles, tg.param_names().count()))
}

/// Builds teacher pseudo labels and every student loss term for `batch`
/// (plus the replayed source image, if any) in one graph.
pub fn build_step(
    config: &ExperimentConfig,
    state: &AdaptState,
    batch: &[&LabeledScene],
    replay: Option<&LabeledScene>,
) -> Result<StepGraph> {
    let images = stack_images(batch)?;
    let (bundles, teacher_graph_params) = teacher_bundles(config, state, &images, batch.len())?;

    let mut g = Graph::new();
    let b = state.student.params().bind(&mut g)?;
    let sb = state.segment.params().bind(&mut g)?;
    let hb = state.classifier.params().map(|p| p.bind_frozen(&mut g));
    let x = g.constant(images);
    let fwd = state.student.forward(&mut g, &b, x, true)?;
    let [_, _, h, w] = g.shape(fwd.features)[..] else { unreachable!("pixel features are 4-d") };
    let hw = h * w;

    let mut terms = Vec::with_capacity(batch.len());
    for (i, (scene, bundle)) in batch.iter().zip(&bundles).enumerate() {
        if bundle.present_classes.is_empty() {
            terms.push(None);
            continue;
        }
        let present = &bundle.present_classes;
        let fi = pixel_embeddings(&mut g, fwd.features, i)?;
        let logits = state.classifier.logits(&mut g, hb.as_ref(), fi, config.logit_scale)?;

        let featmap = g.batch_item(fwd.featmap, i)?;
        let queries = state.class_embedder.embed(present)?;
        let segrep = state.segment.decode_segments(&mut g, &sb, featmap, &queries)?;
        let dapt = adaptation_loss_with(&mut g, segrep, present, &state.prototypes)?;

        let zc = g.index_select(logits, 0, present)?;
        let pc = g.softmax(zc, 0)?;
        let target = bundle.confident_onehot.reshape(&[present.len(), hw])?;
        let mask = bundle.confident_mask.reshape(&[hw])?;
        let mut degenerate_crops = 0;
        let corr = if config.noise_correction {
            let crops = crop_segments(&scene.image, bundle)?;
            let (noisy, degenerate) = state.reference.embed_all(&crops)?;
            degenerate_crops = degenerate;
            let n = normalize_transition(&noise_transition(g.value(segrep), &noisy)?, config.transition)?;
            corrected_loss(&mut g, pc, &n, &target, &mask, config.reduction)?
        } else {
            let loss = cross_entropy(&mut g, pc, &target, &mask, config.reduction)?;
            CorrectedLoss { loss, fallback_pixels: 0, pixels: bundle.confident_pixels() }
        };

        let dmask = bundle.discovery_mask.reshape(&[hw])?;
        let dis = if bundle.residual_classes.is_empty() {
            discovery_loss(&mut g, None, None, &dmask, config.reduction)?
        } else {
            let zr = g.index_select(logits, 0, &bundle.residual_classes)?;
            let pr = g.softmax(zr, 0)?;
            let dt = bundle.discovery_onehot.reshape(&[bundle.residual_classes.len(), hw])?;
            discovery_loss(&mut g, Some(pr), Some(&dt), &dmask, config.reduction)?
        };

        let mem = memory_loss_with(&state.memory, present, &state.prototypes)?;
        let (total, breakdown) = combined_loss(&mut g, dapt, mem.value, &corr, &dis)?;
        terms.push(Some(ImageTerms {
            dapt,
            corr,
            dis: dis.loss,
            total,
            breakdown,
            memory_skipped: mem.skipped,
            no_discovery: dis.no_discovery,
            degenerate_crops,
        }));
    }

    let replay = match replay {
        Some(s) => {
            let xs = g.constant(stack_images(&[s])?);
            let fs = state.student.forward(&mut g, &b, xs, true)?.features;
            let fs = pixel_embeddings(&mut g, fs, 0)?;
            Some(supervised_loss(&mut g, &state.classifier, hb.as_ref(), fs, &s.mask, config)?)
        }
        None => None,
    };

    let active: Vec<Var> = terms.iter().flatten().map(|t| t.total).collect();
    let mut objective = None;
    if !active.is_empty() {
        let mut sum = active[0];
        for &t in &active[1..] {
            sum = g.add(sum, t)?;
        }
        objective = Some(g.scale(sum, 1.0 / active.len() as f64));
    }
    if let Some(r) = replay {
        objective = Some(match objective {
            Some(o) => g.add(o, r)?,
            None => r,
        });
    }
    Ok(StepGraph { graph: g, bundles, terms, replay, objective, features: fwd.features, teacher_graph_params })
}

/// Per-step view handed to an observer.
#[derive(Debug)]
pub struct StepTrace<'a> {
    pub iter: usize,
    pub teacher_before: &'a TeacherState,
    pub teacher_after: &'a TeacherState,
    /// Student parameters the teacher update used.
    pub student: &'a PixelModule,
    pub teacher_graph_params: usize,
    /// Parameters that received gradients in this step.
    pub gradient_params: Vec<(String, ParamGroup)>,
    /// Mean breakdown over images with present classes.
    pub breakdown: LossBreakdown,
    pub replay: Option<f64>,
}

/// Outputs of target adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptArtifacts {
    pub student: PixelModule,
    pub segment: SegmentModule,
    pub teacher: TeacherState,
    pub log: Vec<LogRecord>,
    pub skipped_images: u64,
    pub clamp_counter: u64,
    pub degenerate_crops: u64,
    pub memory_skipped: u64,
    pub no_discovery_images: u64,
}

pub fn adapt_target(
    config: &ExperimentConfig,
    source: &SourceArtifacts,
    target_train: &[&LabeledScene],
    target_val: &[&LabeledScene],
    source_train: &[&LabeledScene],
) -> Result<AdaptArtifacts> {
    adapt_target_observed(config, source, target_train, target_val, source_train, |_| Ok(()))
}

fn adapt_record(
    iter: usize,
    state: &AdaptState,
    val: &[&LabeledScene],
    nc_images: usize,
    losses: BTreeMap<String, f64>,
    skipped: u64,
    clamp: u64,
) -> Result<LogRecord> {
    let report = evaluate(&state.student, &state.classifier, val, nc_images)?;
    Ok(LogRecord {
        stage: Stage::Adapt,
        iter,
        losses,
        miou: report.miou,
        nc1: report.nc.as_ref().map(|r| r.nc1),
        nc2: report.nc.as_ref().map(|r| r.nc2),
        nc3: report.nc.as_ref().map(|r| r.nc3),
        skipped_images: skipped,
        clamp_counter: clamp,
    })
}

/// Target adaptation; `observe` sees every step after the teacher update.
pub fn adapt_target_observed(
    config: &ExperimentConfig,
    source: &SourceArtifacts,
    target_train: &[&LabeledScene],
    target_val: &[&LabeledScene],
    source_train: &[&LabeledScene],
    mut observe: impl FnMut(&StepTrace<'_>) -> Result<()>,
) -> Result<AdaptArtifacts> {
    config.validate()?;
    if target_train.is_empty() || target_val.is_empty() {
        return Err(CoreError::Contract("adaptation needs non-empty target splits".into()));
    }
    let mut state = AdaptState::new(config, source)?;
    let mut sgd = Sgd::new(&config.optimizer, config.adapt_iters);
    let mut sampler = Sampler::new(target_train.len(), config.derived_seed("target-order"))?;
    let mut replay_sampler = match config.mem_mode {
        MemMode::Replay => Some(Sampler::new(source_train.len(), config.derived_seed("replay-order"))?),
        MemMode::Literal => None,
    };

    let (mut skipped, mut clamp, mut degenerate, mut mem_skipped, mut no_discovery) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut log = vec![adapt_record(0, &state, target_val, config.nc_images, BTreeMap::new(), 0, 0)?];
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut since = 0;
    for iter in 0..config.adapt_iters {
        let batch: Vec<&LabeledScene> = sampler.batch(config.batch_size).into_iter().map(|i| target_train[i]).collect();
        let replay = replay_sampler.as_mut().map(|s| source_train[s.next()]);
        let step = build_step(config, &state, &batch, replay)?;
        let g = &step.graph;

        let active: Vec<&ImageTerms> = step.terms.iter().flatten().collect();
        skipped += (step.terms.len() - active.len()) as u64;
        let mut mean = LossBreakdown::default();
        for t in &active {
            clamp += t.corr.fallback_pixels as u64;
            degenerate += t.degenerate_crops as u64;
            mem_skipped += t.memory_skipped as u64;
            no_discovery += u64::from(t.no_discovery);
            let k = active.len() as f64;
            mean.dapt += t.breakdown.dapt / k;
            mean.mem += t.breakdown.mem / k;
            mean.corr += t.breakdown.corr / k;
            mean.dis += t.breakdown.dis / k;
            mean.total += t.breakdown.total / k;
            mean.corr_pixels += t.breakdown.corr_pixels;
            mean.dis_pixels += t.breakdown.dis_pixels;
        }
        let replay_value = step.replay.map(|r| g.value(r).item());

        let mut gradient_params = Vec::new();
        if let Some(objective) = step.objective {
            let grads = g.backward(objective)?;
            gradient_params = grads.params().map(|(n, grp, _)| (n.to_string(), grp)).collect();
            sgd.step(state.student.params_mut(), &grads, iter);
            sgd.step(state.segment.params_mut(), &grads, iter);
            let stats = g.bn_stats(step.features).cloned().ok_or_else(|| CoreError::Contract("missing batch statistics".into()))?;
            state.student.update_running_stats(&stats, feats_count(g, step.features));
        }

        let next = match config.teacher {
            TeacherKind::EmaTeacher => ema_update(&state.teacher, &state.student)?,
            TeacherKind::LatestModel => copy_update(&state.teacher, &state.student),
        };
        observe(&StepTrace {
            iter,
            teacher_before: &state.teacher,
            teacher_after: &next,
            student: &state.student,
            teacher_graph_params: step.teacher_graph_params,
            gradient_params,
            breakdown: mean.clone(),
            replay: replay_value,
        })?;
        state.teacher = next;

        for (k, v) in [("dapt", mean.dapt), ("mem", mean.mem), ("corr", mean.corr), ("dis", mean.dis), ("total", mean.total)] {
            *sums.entry(k.into()).or_insert(0.0) += v;
        }
        if let Some(r) = replay_value {
            *sums.entry("replay".into()).or_insert(0.0) += r;
        }
        since += 1;
        if (iter + 1) % config.eval_interval == 0 || iter + 1 == config.adapt_iters {
            log.push(adapt_record(iter + 1, &state, target_val, config.nc_images, mean_losses(&sums, since), skipped, clamp)?);
            sums.clear();
            since = 0;
        }
    }
    Ok(AdaptArtifacts {
        student: state.student,
        segment: state.segment,
        teacher: state.teacher,
        log,
        skipped_images: skipped,
        clamp_counter: clamp,
        degenerate_crops: degenerate,
        memory_skipped: mem_skipped,
        no_discovery_images: no_discovery,
    })
}
