//! EMA teacher and pseudo-label production.

use segda_grad::{ParamStore, Tensor};

use crate::error::{CoreError, Result};
use crate::networks::PixelModule;

/// Teacher snapshot of the pixel module. It is never bound as trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    module: PixelModule,
    alpha: f64,
    step: u64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::Config(format!("EMA momentum {alpha} outside [0, 1]")));
    }
    Ok(())
}

impl TeacherState {
    /// Starts the teacher as a copy of the student.
    pub fn new(student: &PixelModule, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { module: student.clone(), alpha, step: 0 })
    }

    pub fn module(&self) -> &PixelModule {
        &self.module
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// `α φ + (1 − α) θ` for every tensor.
pub fn ema_params(teacher: &ParamStore, student: &ParamStore, alpha: f64) -> Result<ParamStore> {
    check_alpha(alpha)?;
    if !teacher.same_layout(student) {
        return Err(CoreError::Contract("teacher and student parameter layouts differ".into()));
    }
    let mut out = teacher.clone();
    for (name, p) in out.iter_mut() {
        let s = student.get(name).expect("layout checked");
        for (a, b) in p.value.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(out)
}

fn ema_vec(teacher: &[f64], student: &[f64], alpha: f64) -> Vec<f64> {
    teacher.iter().zip(student).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect()
}

/// One EMA step towards the student. Batch-norm running statistics are
/// averaged the same way as the weights.
pub fn ema_update(teacher: &TeacherState, student: &PixelModule) -> Result<TeacherState> {
    let params = ema_params(teacher.module.params(), student.params(), teacher.alpha)?;
    let mean = ema_vec(teacher.module.running_mean(), student.running_mean(), teacher.alpha);
    let var = ema_vec(teacher.module.running_var(), student.running_var(), teacher.alpha);
    let module = PixelModule::from_parts(teacher.module.config().clone(), params, mean, var)?;
    Ok(TeacherState { module, alpha: teacher.alpha, step: teacher.step + 1 })
}

/// Replaces the teacher with the current student (latest-model ablation).
pub fn copy_update(teacher: &TeacherState, student: &PixelModule) -> TeacherState {
    TeacherState { module: student.clone(), alpha: teacher.alpha, step: teacher.step + 1 }
}

/// Confident pseudo labels, discovery targets and the present-class set of
/// one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBundle {
    pub height: usize,
    pub width: usize,
    /// Sorted class ids with at least one confident pixel.
    pub present_classes: Vec<usize>,
    /// `C′ × H × W`, rows ordered by `present_classes`.
    pub confident_onehot: Tensor,
    pub confident_mask: Tensor,
    /// Classes outside `C′`, ascending.
    pub residual_classes: Vec<usize>,
    /// `(C − C′) × H × W`, rows ordered by `residual_classes`.
    pub discovery_onehot: Tensor,
    pub discovery_mask: Tensor,
    /// Teacher argmax class per pixel.
    pub argmax: Vec<usize>,
}

impl PseudoLabelBundle {
    pub fn confident_pixels(&self) -> usize {
        self.confident_mask.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn discovery_pixels(&self) -> usize {
        self.discovery_mask.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Confident class of pixel `j`, if any.
    pub fn confident_label(&self, j: usize) -> Option<usize> {
        (self.confident_mask.data()[j] != 0.0).then(|| self.argmax[j])
    }
}

fn argmax_max(probs: &Tensor) -> Result<(usize, usize, usize, Vec<usize>, Vec<f64>)> {
    let [c, h, w] = probs.shape()[..] else {
        return Err(CoreError::UnsupportedDimension(format!("teacher probabilities must be C×H×W, got {:?}", probs.shape())));
    };
    let hw = h * w;
    let p = probs.data();
    let mut arg = vec![0usize; hw];
    let mut max = vec![f64::NEG_INFINITY; hw];
    for k in 0..c {
        for j in 0..hw {
            if p[k * hw + j] > max[j] {
                max[j] = p[k * hw + j];
                arg[j] = k;
            }
        }
    }
    Ok((c, h, w, arg, max))
}

fn onehot_rows(classes: &[usize], arg: &[usize], mask: &[bool], h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut t = Tensor::zeros(&[classes.len(), h, w]);
    for (row, &c) in classes.iter().enumerate() {
        for j in 0..hw {
            if mask[j] && arg[j] == c {
                t.data_mut()[row * hw + j] = 1.0;
            }
        }
    }
    t
}

fn mask_tensor(mask: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).expect("mask length")
}

/// Pixels with maximum teacher probability strictly above `tau_h` take the
/// argmax class. Returns the confident part of the bundle with empty
/// discovery targets.
pub fn generate_pseudo_labels(teacher_probs: &Tensor, tau_h: f64) -> Result<PseudoLabelBundle> {
    if !(tau_h > 0.0 && tau_h < 1.0) {
        return Err(CoreError::Config(format!("τ_h = {tau_h} outside (0, 1)")));
    }
    let (c, h, w, arg, max) = argmax_max(teacher_probs)?;
    let confident: Vec<bool> = max.iter().map(|&m| m > tau_h).collect();
    let mut seen = vec![false; c];
    for (j, &ok) in confident.iter().enumerate() {
        if ok {
            seen[arg[j]] = true;
        }
    }
    let present: Vec<usize> = (0..c).filter(|&k| seen[k]).collect();
    let residual: Vec<usize> = (0..c).filter(|&k| !seen[k]).collect();
    Ok(PseudoLabelBundle {
        height: h,
        width: w,
        confident_onehot: onehot_rows(&present, &arg, &confident, h, w),
        confident_mask: mask_tensor(&confident, h, w),
        present_classes: present,
        discovery_onehot: Tensor::zeros(&[residual.len(), h, w]),
        discovery_mask: Tensor::zeros(&[h, w]),
        residual_classes: residual,
        argmax: arg,
    })
}

/// Fills the discovery part: maximum probability strictly below `tau_l`
/// with the argmax outside the present classes.
pub fn discovery_targets(teacher_probs: &Tensor, tau_l: f64, bundle: &PseudoLabelBundle) -> Result<PseudoLabelBundle> {
    let (c, h, w, arg, max) = argmax_max(teacher_probs)?;
    if (h, w) != (bundle.height, bundle.width) || c != bundle.present_classes.len() + bundle.residual_classes.len() {
        return Err(CoreError::UnsupportedDimension("teacher probabilities do not match the bundle".into()));
    }
    if !(tau_l > 0.0 && tau_l < 1.0) {
        return Err(CoreError::Config(format!("τ_l = {tau_l} outside (0, 1)")));
    }
    let conf = bundle.confident_mask.data();
    let mut discover = vec![false; h * w];
    for j in 0..h * w {
        if max[j] < tau_l && bundle.present_classes.binary_search(&arg[j]).is_err() {
            if conf[j] != 0.0 {
                return Err(CoreError::Contract("τ_l must be below τ_h".into()));
            }
            discover[j] = true;
        }
    }
    let mut out = bundle.clone();
    out.discovery_onehot = onehot_rows(&bundle.residual_classes, &arg, &discover, h, w);
    out.discovery_mask = mask_tensor(&discover, h, w);
    Ok(out)
}

/// Both label sets from one teacher prediction.
pub fn pseudo_label_bundle(teacher_probs: &Tensor, tau_h: f64, tau_l: f64) -> Result<PseudoLabelBundle> {
    if tau_l >= tau_h {
        return Err(CoreError::Config(format!("τ_l = {tau_l} must be below τ_h = {tau_h}")));
    }
    let confident = generate_pseudo_labels(teacher_probs, tau_h)?;
    discovery_targets(teacher_probs, tau_l, &confident)
}
