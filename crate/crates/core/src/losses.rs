//! Adaptation objectives: cross-entropy, segment adaptation, memory,
//! noise-corrected and pixel-discovery losses, and their unit-weight sum.
//!
//! Class-indexed tensors put classes on axis 0; all remaining axes are
//! pixels. Masks are `{0, 1}` tensors over the pixel axes.

use segda_grad::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::etf::{ClassMemory, EtfClassifier, Reduction};

/// Floor applied to noise-corrected probabilities before renormalizing.
pub const CORRECTION_FLOOR: f64 = 1e-12;
const PROB_TOLERANCE: f64 = 1e-6;

/// Per-step values of the four adaptation terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dapt: f64,
    pub mem: f64,
    pub corr: f64,
    pub dis: f64,
    pub total: f64,
    pub corr_pixels: usize,
    pub dis_pixels: usize,
}

fn class_and_pixels(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [c, rest @ ..] if !rest.is_empty() => Ok((*c, rest.iter().product())),
        _ => Err(CoreError::UnsupportedDimension(format!("expected classes × pixels, got {shape:?}"))),
    }
}

fn check_mask(mask: &Tensor, pixels: usize) -> Result<()> {
    if mask.len() != pixels {
        return Err(CoreError::UnsupportedDimension(format!("mask has {} entries for {pixels} pixels", mask.len())));
    }
    Ok(())
}

/// Mean (or sum) over valid pixels of `−Σ_c y log ŷ`. An empty mask gives a
/// constant zero.
pub fn cross_entropy(g: &mut Graph, probs: Var, target_onehot: &Tensor, valid_mask: &Tensor, reduction: Reduction) -> Result<Var> {
    let (classes, pixels) = class_and_pixels(g.shape(probs))?;
    if target_onehot.shape() != g.shape(probs) {
        return Err(CoreError::UnsupportedDimension(format!(
            "target {:?} vs probabilities {:?}",
            target_onehot.shape(),
            g.shape(probs)
        )));
    }
    check_mask(valid_mask, pixels)?;
    let p = g.value(probs).data();
    let y = target_onehot.data();
    let m = valid_mask.data();
    let mut picked = Vec::new();
    for j in (0..pixels).filter(|&j| m[j] != 0.0) {
        let s: f64 = (0..classes).map(|c| p[c * pixels + j]).sum();
        if (s - 1.0).abs() > PROB_TOLERANCE || (0..classes).any(|c| p[c * pixels + j] < 0.0) {
            return Err(CoreError::Contract(format!("probabilities at pixel {j} do not form a distribution (sum {s})")));
        }
        let hot: Vec<usize> = (0..classes).filter(|&c| y[c * pixels + j] != 0.0).collect();
        let [c] = hot[..] else {
            return Err(CoreError::Contract(format!("target at pixel {j} is not one-hot")));
        };
        if p[c * pixels + j] <= 0.0 {
            return Err(CoreError::Contract(format!("zero probability on the target class at pixel {j}")));
        }
        picked.push(c * pixels + j);
    }
    if picked.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let factor = reduction.factor(picked.len());
    let t = g.gather(probs, &picked)?;
    let logp = g.log(t)?;
    let s = g.sum(logp);
    Ok(g.scale(s, -factor))
}

/// `½(w_cᵀ S_c − 1)²` averaged over the present classes.
pub fn adaptation_loss(g: &mut Graph, segrep: Var, present_classes: &[usize], etf: &EtfClassifier) -> Result<Var> {
    adaptation_loss_with(g, segrep, present_classes, etf.weights())
}

/// [`adaptation_loss`] against arbitrary `d × C` prototype columns.
pub fn adaptation_loss_with(g: &mut Graph, segrep: Var, present_classes: &[usize], prototypes: &Tensor) -> Result<Var> {
    let [d, k] = g.shape(segrep)[..] else {
        return Err(CoreError::UnsupportedDimension(format!("segment representation must be d×C′, got {:?}", g.shape(segrep))));
    };
    if d != prototypes.shape()[0] {
        return Err(CoreError::UnsupportedDimension(format!("segment dim {d} ≠ feature dim {}", prototypes.shape()[0])));
    }
    if k != present_classes.len() {
        return Err(CoreError::Contract(format!("{k} segment columns for {} present classes", present_classes.len())));
    }
    let w = g.constant(select_columns(prototypes, present_classes)?);
    let prod = g.mul(segrep, w)?;
    let dots = g.sum_axis(prod, 0)?;
    let r = g.add_scalar(dots, -1.0);
    let sq = g.square(r);
    let m = g.mean(sq);
    Ok(g.scale(m, 0.5))
}

fn select_columns(prototypes: &Tensor, classes: &[usize]) -> Result<Tensor> {
    let [d, c] = prototypes.shape()[..] else {
        return Err(CoreError::UnsupportedDimension("prototypes must be d×C".into()));
    };
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(CoreError::InvalidLabel(format!("class {bad} outside [0, {c})")));
    }
    let mut out = Tensor::zeros(&[d, classes.len()]);
    for i in 0..d {
        for (j, &k) in classes.iter().enumerate() {
            out.set(&[i, j], prototypes.get(&[i, k]));
        }
    }
    Ok(out)
}

/// Value of the memory term plus how many present classes had no memory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryLoss {
    pub value: f64,
    pub skipped: usize,
}

/// `½(w_cᵀ M_c − 1)²` averaged over present classes with memory. The
/// memory and prototypes are both constants, so this term carries no
/// gradient.
pub fn memory_loss(memory: &ClassMemory, present_classes: &[usize], etf: &EtfClassifier) -> Result<MemoryLoss> {
    memory_loss_with(memory, present_classes, etf.weights())
}

/// [`memory_loss`] against arbitrary `d × C` prototype columns.
pub fn memory_loss_with(memory: &ClassMemory, present_classes: &[usize], prototypes: &Tensor) -> Result<MemoryLoss> {
    let [d, c] = prototypes.shape()[..] else {
        return Err(CoreError::UnsupportedDimension("prototypes must be d×C".into()));
    };
    if memory.feature_dim() != d {
        return Err(CoreError::UnsupportedDimension("memory and classifier dims differ".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for &k in present_classes {
        if k >= c {
            return Err(CoreError::InvalidLabel(format!("class {k} outside [0, {c})")));
        }
        match memory.mean(k) {
            Some(m) => {
                let s: f64 = m.iter().enumerate().map(|(i, v)| v * prototypes.get(&[i, k])).sum();
                total += 0.5 * (s - 1.0).powi(2);
                used += 1;
            }
            None => skipped += 1,
        }
    }
    let value = if used == 0 { 0.0 } else { total / used as f64 };
    Ok(MemoryLoss { value, skipped })
}

/// Noise-corrected cross-entropy output.
#[derive(Clone, Copy, Debug)]
pub struct CorrectedLoss {
    pub loss: Var,
    /// Confident pixels whose corrected vector was entirely clamped.
    pub fallback_pixels: usize,
    pub pixels: usize,
}

/// `q = normalize(max(N·p, ε))` per pixel, plus a flag per pixel whose
/// mixed vector was clamped everywhere (and so became uniform).
pub fn corrected_probs(g: &mut Graph, student_probs: Var, transition: &Tensor) -> Result<(Var, Vec<bool>)> {
    let (k, pixels) = class_and_pixels(g.shape(student_probs))?;
    if transition.shape() != [k, k] {
        return Err(CoreError::UnsupportedDimension(format!("transition {:?} for {k} classes", transition.shape())));
    }
    if !transition.all_finite() {
        return Err(CoreError::Contract("transition matrix has a non-finite entry".into()));
    }
    let shape = g.shape(student_probs).to_vec();
    let flat = g.reshape(student_probs, &[k, pixels])?;
    let n = g.constant(transition.clone());
    let mixed = g.matmul(n, flat)?;
    let mv = g.value(mixed).data();
    let fallback = (0..pixels).map(|j| (0..k).all(|c| mv[c * pixels + j] <= CORRECTION_FLOOR)).collect();
    let clamped = g.clamp_min(mixed, CORRECTION_FLOOR);
    let q = g.sum_normalize(clamped, 0)?;
    Ok((g.reshape(q, &shape)?, fallback))
}

/// Cross-entropy of the noise-corrected student distribution against the
/// confident pseudo labels. Loss is non-negative.
pub fn corrected_loss(
    g: &mut Graph,
    student_probs: Var,
    transition: &Tensor,
    pseudo_onehot: &Tensor,
    confident_mask: &Tensor,
    reduction: Reduction,
) -> Result<CorrectedLoss> {
    let (q, fallback) = corrected_probs(g, student_probs, transition)?;
    check_mask(confident_mask, fallback.len())?;
    let m = confident_mask.data();
    let pixels = m.iter().filter(|&&v| v != 0.0).count();
    let fallback_pixels = fallback.iter().zip(m).filter(|(f, &v)| **f && v != 0.0).count();
    let loss = cross_entropy(g, q, pseudo_onehot, confident_mask, reduction)?;
    Ok(CorrectedLoss { loss, fallback_pixels, pixels })
}

/// Discovery loss output.
#[derive(Clone, Copy, Debug)]
pub struct DiscoveryLoss {
    pub loss: Var,
    /// Set when every class is present, leaving nothing to discover.
    pub no_discovery: bool,
    pub pixels: usize,
}

/// Cross-entropy over the classes outside `C′` on discovery pixels only.
/// `student_probs_rest` is `None` when `C′ = C`.
pub fn discovery_loss(
    g: &mut Graph,
    student_probs_rest: Option<Var>,
    discovery_onehot: Option<&Tensor>,
    discovery_mask: &Tensor,
    reduction: Reduction,
) -> Result<DiscoveryLoss> {
    let pixels = discovery_mask.data().iter().filter(|&&v| v != 0.0).count();
    match (student_probs_rest, discovery_onehot) {
        (Some(p), Some(t)) => {
            let loss = cross_entropy(g, p, t, discovery_mask, reduction)?;
            Ok(DiscoveryLoss { loss, no_discovery: false, pixels })
        }
        (None, None) => Ok(DiscoveryLoss { loss: g.constant(Tensor::scalar(0.0)), no_discovery: true, pixels: 0 }),
        _ => Err(CoreError::Contract("discovery probabilities and targets must both be present or both absent".into())),
    }
}

/// Unit-weight sum of the four terms. `mem` is a constant value.
pub fn combined_loss(
    g: &mut Graph,
    dapt: Var,
    mem: f64,
    corr: &CorrectedLoss,
    dis: &DiscoveryLoss,
) -> Result<(Var, LossBreakdown)> {
    let m = g.constant(Tensor::scalar(mem));
    let a = g.add(dapt, m)?;
    let b = g.add(a, corr.loss)?;
    let total = g.add(b, dis.loss)?;
    let breakdown = LossBreakdown {
        dapt: g.value(dapt).item(),
        mem,
        corr: g.value(corr.loss).item(),
        dis: g.value(dis.loss).item(),
        total: g.value(total).item(),
        corr_pixels: corr.pixels,
        dis_pixels: dis.pixels,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use segda_grad::{finite_diff_check, softmax_along, FdOptions, ParamGroup, ParamStore};

    fn onehot(labels: &[usize], classes: usize) -> Tensor {
        let n = labels.len();
        let mut t = Tensor::zeros(&[classes, n]);
        for (j, &l) in labels.iter().enumerate() {
            t.set(&[l, j], 1.0);
        }
        t
    }

    fn value(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let p = g.constant(onehot(&[0, 2, 1], 3));
        let l = cross_entropy(&mut g, p, &onehot(&[0, 2, 1], 3), &Tensor::ones(&[3]), Reduction::Mean).unwrap();
        assert_eq!(value(&g, l), 0.0);

        let u = g.constant(Tensor::full(&[4, 2, 2], 0.25));
        let mut t = Tensor::zeros(&[4, 2, 2]);
        for j in 0..4 {
            t.data_mut()[(j % 4) * 4 + j] = 1.0;
        }
        let l = cross_entropy(&mut g, u, &t, &Tensor::ones(&[2, 2]), Reduction::Mean).unwrap();
        assert!((value(&g, l) - 4f64.ln()).abs() < 1e-15);
        let l = cross_entropy(&mut g, u, &t, &Tensor::zeros(&[2, 2]), Reduction::Mean).unwrap();
        assert_eq!(value(&g, l), 0.0);

        let bad = g.constant(Tensor::full(&[2, 3], 0.6));
        assert!(matches!(
            cross_entropy(&mut g, bad, &onehot(&[0, 1, 0], 2), &Tensor::ones(&[3]), Reduction::Mean),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn adaptation_and_memory_examples() {
        let etf = EtfClassifier::new(4, 8, 3).unwrap();
        let present = [1, 3];
        let aligned = etf.prototypes_for(&present).unwrap();
        let mut g = Graph::new();
        let s = g.constant(aligned.clone());
        let l = adaptation_loss(&mut g, s, &present, &etf).unwrap();
        assert!(value(&g, l).abs() < 1e-24);

        let null = etf.rotation().matmul(&Tensor::ones(&[4, 1])).unwrap();
        let null = null.scale(1.0 / null.norm());
        let mut orth = Tensor::zeros(&[8, 2]);
        let mut mixed = aligned.clone();
        for i in 0..8 {
            orth.set(&[i, 0], null.data()[i]);
            orth.set(&[i, 1], null.data()[i]);
            mixed.set(&[i, 1], null.data()[i]);
        }
        let s = g.constant(orth.clone());
        let l = adaptation_loss(&mut g, s, &present, &etf).unwrap();
        assert!((value(&g, l) - 0.5).abs() < 1e-12);
        let s = g.constant(mixed.clone());
        let l = adaptation_loss(&mut g, s, &present, &etf).unwrap();
        assert!((value(&g, l) - 0.25).abs() < 1e-12);

        let wrong = g.constant(Tensor::zeros(&[6, 2]));
        assert!(matches!(adaptation_loss(&mut g, wrong, &present, &etf), Err(CoreError::UnsupportedDimension(_))));

        // Memory term: aligned, zero, and the mixed case.
        let mut mem = ClassMemory::new(8, 4);
        mem.accumulate(&aligned, &present).unwrap();
        assert!(memory_loss(&mem, &present, &etf).unwrap().value.abs() < 1e-24);
        let mut zero = ClassMemory::new(8, 4);
        zero.accumulate(&Tensor::zeros(&[8, 2]), &present).unwrap();
        assert!((memory_loss(&zero, &present, &etf).unwrap().value - 0.5).abs() < 1e-15);
        let mut mix = ClassMemory::new(8, 4);
        mix.accumulate(&mixed, &present).unwrap();
        assert!((memory_loss(&mix, &present, &etf).unwrap().value - 0.25).abs() < 1e-12);
        let r = memory_loss(&mix, &[0, 1, 3], &etf).unwrap();
        assert_eq!(r.skipped, 1);
        assert!((r.value - 0.25).abs() < 1e-12);
    }

    #[test]
    fn corrected_loss_identity_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::new(vec![3, 10], (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let probs = softmax_along(&logits, 0);
        let labels: Vec<usize> = (0..10).map(|j| j % 3).collect();
        let t = onehot(&labels, 3);
        let mask = Tensor::new(vec![10], (0..10).map(|j| if j % 4 == 0 { 0.0 } else { 1.0 }).collect()).unwrap();

        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let plain = cross_entropy(&mut g, p, &t, &mask, Reduction::Mean).unwrap();
        let corr = corrected_loss(&mut g, p, &Tensor::eye(3), &t, &mask, Reduction::Mean).unwrap();
        assert!((value(&g, plain) - value(&g, corr.loss)).abs() <= 1e-12);
        assert_eq!(corr.fallback_pixels, 0);

        // N = P; pseudo labels permuted by P; student certain of the pre-image.
        let perm = [2usize, 0, 1];
        let mut pm = Tensor::zeros(&[3, 3]);
        for (src, &dst) in perm.iter().enumerate() {
            pm.set(&[dst, src], 1.0);
        }
        let pre = [0usize, 1, 2, 2];
        let student: Vec<f64> = {
            let mut s = onehot(&pre, 3);
            // Keep probabilities strictly positive.
            s.data_mut().iter_mut().for_each(|v| *v = if *v == 1.0 { 1.0 } else { 0.0 });
            s.into_data()
        };
        let pseudo: Vec<usize> = pre.iter().map(|&c| perm[c]).collect();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![3, 4], student).unwrap());
        let (q, _) = corrected_probs(&mut g, p, &pm).unwrap();
        let l = cross_entropy(&mut g, q, &onehot(&pseudo, 3), &Tensor::ones(&[4]), Reduction::Mean).unwrap();
        assert!(value(&g, l) < 1e-10);

        let c = corrected_loss(&mut g, p, &pm, &onehot(&pseudo, 3), &Tensor::zeros(&[4]), Reduction::Mean).unwrap();
        assert_eq!(value(&g, c.loss), 0.0);

        let mut nan = Tensor::eye(3);
        nan.set(&[0, 1], f64::NAN);
        assert!(matches!(corrected_loss(&mut g, p, &nan, &onehot(&pseudo, 3), &Tensor::ones(&[4]), Reduction::Mean), Err(CoreError::Contract(_))));
    }

    #[test]
    fn discovery_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[3, 2], 1.0 / 3.0));
        let t = onehot(&[1, 2], 3);
        let none = discovery_loss(&mut g, Some(p), Some(&t), &Tensor::zeros(&[2]), Reduction::Mean).unwrap();
        assert_eq!(value(&g, none.loss), 0.0);
        let one = discovery_loss(&mut g, Some(p), Some(&t), &Tensor::vector(vec![1.0, 0.0]), Reduction::Mean).unwrap();
        assert!((value(&g, one.loss) - 3f64.ln()).abs() < 1e-15);
        assert_eq!(one.pixels, 1);
        let sure = g.constant(onehot(&[1, 0], 3));
        let ok = discovery_loss(&mut g, Some(sure), Some(&t), &Tensor::vector(vec![1.0, 0.0]), Reduction::Mean).unwrap();
        assert_eq!(value(&g, ok.loss), 0.0);
        let full = discovery_loss(&mut g, None, None, &Tensor::zeros(&[2]), Reduction::Mean).unwrap();
        assert!(full.no_discovery);
        assert_eq!(value(&g, full.loss), 0.0);
    }

    #[test]
    fn combined_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let corr = CorrectedLoss { loss: z, fallback_pixels: 0, pixels: 0 };
        let dis = DiscoveryLoss { loss: z, no_discovery: false, pixels: 0 };
        let (t, b) = combined_loss(&mut g, z, 0.0, &corr, &dis).unwrap();
        assert_eq!(value(&g, t), 0.0);
        assert_eq!(b.total, 0.0);

        let q = g.constant(Tensor::scalar(0.25));
        let ln4 = g.constant(Tensor::scalar(4f64.ln()));
        let corr = CorrectedLoss { loss: ln4, fallback_pixels: 0, pixels: 3 };
        let (t, b) = combined_loss(&mut g, q, 0.25, &corr, &dis).unwrap();
        assert!((value(&g, t) - (0.5 + 4f64.ln())).abs() < 1e-15);
        assert_eq!(b.total, b.dapt + b.mem + b.corr + b.dis);
    }

    #[test]
    fn corrected_and_discovery_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore::new();
        store.insert("z", ParamGroup::PixelDecoder, Tensor::new(vec![5, 2, 3], (0..30).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap());
        let n = Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-0.4..1.0)).collect()).unwrap();
        let labels = [0usize, 2, 1, 1, 0, 2];
        let t3 = onehot(&labels, 3).reshape(&[3, 2, 3]).unwrap();
        let t2 = onehot(&[1, 0, 0, 1, 1, 0], 2).reshape(&[2, 2, 3]).unwrap();
        let mask = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let build = |g: &mut Graph, b: &segda_grad::Bound| -> Result<Var> {
            let z = b.get("z")?;
            let zc = g.index_select(z, 0, &[0, 2, 4])?;
            let pc = g.softmax(zc, 0)?;
            let corr = corrected_loss(g, pc, &n, &t3, &mask, Reduction::Mean)?;
            let zr = g.index_select(z, 0, &[1, 3])?;
            let pr = g.softmax(zr, 0)?;
            let dis = discovery_loss(g, Some(pr), Some(&t2), &mask, Reduction::Mean)?;
            Ok(g.add(corr.loss, dis.loss)?)
        };
        let rep = finite_diff_check(&store, build, &FdOptions::default()).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }
}
