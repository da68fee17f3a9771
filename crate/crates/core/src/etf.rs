//! Fixed simplex equiangular-tight-frame classifier, the dot-regression
//! loss, per-class feature memory and neural-collapse measurements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use segda_grad::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// How per-sample losses are combined over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub(crate) fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// `W = sqrt(C/(C-1)) · U (I − 11ᵀ/C)` with `U` a `d × C` matrix of
/// orthonormal columns. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct EtfClassifier {
    num_classes: usize,
    feature_dim: usize,
    rotation: Tensor,
    weights: Tensor,
}

impl EtfClassifier {
    /// Builds the frame for `num_classes` prototypes in `feature_dim`
    /// dimensions. `rotation_seed == 0` uses the first `C` standard basis
    /// vectors as `U`; any other seed draws `U` from the QR factor of a
    /// Gaussian matrix (positive-diagonal convention).
    pub fn new(num_classes: usize, feature_dim: usize, rotation_seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(CoreError::UnsupportedDimension(format!(
                "a simplex frame needs at least 2 classes, got {num_classes}"
            )));
        }
        if feature_dim < num_classes {
            return Err(CoreError::UnsupportedDimension(format!(
                "feature dim {feature_dim} < class count {num_classes}; U must have orthonormal columns"
            )));
        }
        let (c, d) = (num_classes, feature_dim);
        let rotation = if rotation_seed == 0 {
            let mut u = Tensor::zeros(&[d, c]);
            for i in 0..c {
                u.set(&[i, i], 1.0);
            }
            u
        } else {
            orthonormal_columns(d, c, rotation_seed)
        };
        // U (I − 11ᵀ/C): subtract each row's mean from that row.
        let scale = (c as f64 / (c as f64 - 1.0)).sqrt();
        let mut weights = rotation.clone();
        for row in weights.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            row.iter_mut().for_each(|v| *v = scale * (*v - mean));
        }
        Ok(Self { num_classes: c, feature_dim: d, rotation, weights })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn rotation(&self) -> &Tensor {
        &self.rotation
    }

    /// `d × C`, one prototype per column.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn prototype(&self, class: usize) -> Vec<f64> {
        self.weights.column(class)
    }

    /// Prototypes of `classes` stacked as columns (`d × classes.len()`).
    pub fn prototypes_for(&self, classes: &[usize]) -> Result<Tensor> {
        let d = self.feature_dim;
        let mut out = vec![0.0; d * classes.len()];
        for (j, &c) in classes.iter().enumerate() {
            self.check_label(c)?;
            for i in 0..d {
                out[i * classes.len() + j] = self.weights.get(&[i, c]);
            }
        }
        Ok(Tensor::new(vec![d, classes.len()], out)?)
    }

    pub fn verify(&self, tolerance: f64) -> EtfReport {
        verify_etf(&self.weights, tolerance)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes {
            return Err(CoreError::InvalidLabel(format!(
                "label {label} outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn check_features(&self, features: &Tensor) -> Result<usize> {
        match features.shape() {
            [d, n] if *d == self.feature_dim => Ok(*n),
            s => Err(CoreError::UnsupportedDimension(format!(
                "features {s:?} do not match feature dim {}",
                self.feature_dim
            ))),
        }
    }
}

/// CGS2 orthonormalization of a seeded Gaussian `rows × cols` matrix.
/// Gram–Schmidt yields the QR factor whose `R` has a positive diagonal.
fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
        let raw_norm = norm(&v);
        for _ in 0..2 {
            for q in &basis {
                let p = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = norm(&v);
        // Resample a (measure-zero) nearly dependent draw.
        if n < 1e-8 * raw_norm {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        basis.push(v);
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    for (j, q) in basis.iter().enumerate() {
        for (i, &v) in q.iter().enumerate() {
            out.set(&[i, j], v);
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Result of checking a `d × C` matrix against the simplex-ETF Gram matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtfReport {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// `max_c | ‖w_c‖ − 1 |`.
    pub max_norm_deviation: f64,
    /// `max_{c1≠c2} | w_c1ᵀ w_c2 + 1/(C−1) |`.
    pub max_offdiag_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares `WᵀW` with `(C/(C−1)) I − (1/(C−1)) 11ᵀ`.
pub fn verify_etf(weights: &Tensor, tolerance: f64) -> EtfReport {
    let (d, c) = match weights.shape() {
        [d, c] => (*d, *c),
        _ => (0, 0),
    };
    if c < 2 {
        return EtfReport {
            num_classes: c,
            feature_dim: d,
            max_norm_deviation: f64::INFINITY,
            max_offdiag_deviation: f64::INFINITY,
            tolerance,
            pass: false,
        };
    }
    let cols: Vec<Vec<f64>> = (0..c).map(|j| weights.column(j)).collect();
    let target = -1.0 / (c as f64 - 1.0);
    let mut max_norm_deviation: f64 = 0.0;
    let mut max_offdiag_deviation: f64 = 0.0;
    for i in 0..c {
        max_norm_deviation = max_norm_deviation.max((norm(&cols[i]) - 1.0).abs());
        for j in 0..c {
            if i != j {
                max_offdiag_deviation = max_offdiag_deviation.max((dot(&cols[i], &cols[j]) - target).abs());
            }
        }
    }
    let pass = max_norm_deviation <= tolerance && max_offdiag_deviation <= tolerance;
    EtfReport { num_classes: c, feature_dim: d, max_norm_deviation, max_offdiag_deviation, tolerance, pass }
}

/// Scores `⟨f, w_c⟩` for every pixel of a `d × H × W` feature field.
pub fn predict_scores(pixel_features: &Tensor, etf: &EtfClassifier) -> Result<Tensor> {
    let [d, h, w] = pixel_features.shape()[..] else {
        return Err(CoreError::UnsupportedDimension(format!(
            "pixel features must be d×H×W, got {:?}",
            pixel_features.shape()
        )));
    };
    let flat = pixel_features.reshape(&[d, h * w])?;
    etf.check_features(&flat)?;
    let scores = etf.weights.transpose()?.matmul(&flat)?;
    Ok(scores.reshape(&[etf.num_classes, h, w])?)
}

/// Dot-regression loss `½(w_cᵀ f − 1)²` over the columns of a `d × n`
/// feature matrix.
pub fn dr_loss(features: &Tensor, labels: &[usize], etf: &EtfClassifier, reduction: Reduction) -> Result<f64> {
    let n = etf.check_features(features)?;
    check_labels(labels, n, etf)?;
    let d = etf.feature_dim;
    let f = features.data();
    let w = etf.weights.data();
    let c = etf.num_classes;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            let s: f64 = (0..d).map(|i| w[i * c + l] * f[i * n + j]).sum();
            0.5 * (s - 1.0).powi(2)
        })
        .sum();
    Ok(total * reduction.factor(n))
}

fn check_labels(labels: &[usize], n: usize, etf: &EtfClassifier) -> Result<()> {
    if labels.len() != n {
        return Err(CoreError::InvalidLabel(format!("{} labels for {n} feature columns", labels.len())));
    }
    labels.iter().try_for_each(|&l| etf.check_label(l))
}

/// Graph version of [`dr_loss`], differentiable in `features` (`d × n`).
pub fn dr_loss_graph(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    etf: &EtfClassifier,
    reduction: Reduction,
) -> Result<Var> {
    let n = etf.check_features(g.value(features))?;
    check_labels(labels, n, etf)?;
    let wt = g.constant(etf.weights.transpose()?);
    let scores = g.matmul(wt, features)?;
    let picked: Vec<usize> = labels.iter().enumerate().map(|(j, &l)| l * n + j).collect();
    let s = g.gather(scores, &picked)?;
    let r = g.add_scalar(s, -1.0);
    let sq = g.square(r);
    let total = g.sum(sq);
    Ok(g.scale(total, 0.5 * reduction.factor(n)))
}

/// Analytic gradient `(w_cᵀ f − 1) w_c` of the per-sample DR loss. For
/// unit-norm `f` this equals `−(1 − cos∠(f, w_c)) w_c`.
pub fn dr_loss_grad(feature: &[f64], label: usize, etf: &EtfClassifier) -> Result<Vec<f64>> {
    if feature.len() != etf.feature_dim {
        return Err(CoreError::UnsupportedDimension(format!(
            "feature of length {} vs dim {}",
            feature.len(),
            etf.feature_dim
        )));
    }
    etf.check_label(label)?;
    let w = etf.prototype(label);
    let r = dot(&w, feature) - 1.0;
    Ok(w.iter().map(|v| r * v).collect())
}

/// Running per-class feature means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMemory {
    feature_dim: usize,
    num_classes: usize,
    /// Row-major `d × C` per-class sums.
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl ClassMemory {
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        Self { feature_dim, num_classes, sums: vec![0.0; feature_dim * num_classes], counts: vec![0; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Adds every column of a `d × n` feature matrix to its class.
    pub fn accumulate(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        let [d, n] = features.shape()[..] else {
            return Err(CoreError::UnsupportedDimension(format!("features {:?}", features.shape())));
        };
        if d != self.feature_dim || labels.len() != n {
            return Err(CoreError::UnsupportedDimension(format!(
                "features {:?} with {} labels into memory of dim {}",
                features.shape(),
                labels.len(),
                self.feature_dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(CoreError::InvalidLabel(format!("label {bad} outside [0, {})", self.num_classes)));
        }
        let f = features.data();
        let c = self.num_classes;
        for (j, &l) in labels.iter().enumerate() {
            for i in 0..d {
                self.sums[i * c + l] += f[i * n + j];
            }
            self.counts[l] += 1;
        }
        Ok(())
    }

    /// Rejects deserialized memories whose buffers disagree with their sizes.
    pub fn check(&self) -> Result<()> {
        if self.sums.len() != self.feature_dim * self.num_classes || self.counts.len() != self.num_classes {
            return Err(CoreError::Contract(format!(
                "class memory of dim {} with {} classes holds {} sums and {} counts",
                self.feature_dim,
                self.num_classes,
                self.sums.len(),
                self.counts.len()
            )));
        }
        if self.sums.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Contract("class memory holds non-finite sums".into()));
        }
        Ok(())
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts[class]
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.counts.get(class).is_some_and(|&n| n > 0)
    }

    /// Mean feature of `class`, or `None` when no sample was accumulated.
    pub fn mean(&self, class: usize) -> Option<Vec<f64>> {
        if !self.is_present(class) {
            return None;
        }
        let n = self.counts[class] as f64;
        Some((0..self.feature_dim).map(|i| self.sums[i * self.num_classes + class] / n).collect())
    }

    /// All means as a `d × C` matrix; absent classes are zero columns.
    pub fn means(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.feature_dim, self.num_classes]);
        for c in 0..self.num_classes {
            if let Some(m) = self.mean(c) {
                for (i, v) in m.into_iter().enumerate() {
                    out.set(&[i, c], v);
                }
            }
        }
        out
    }
}

/// Streaming form: returns the memory after adding `features`.
pub fn accumulate_class_means(features: &Tensor, labels: &[usize], mut memory: ClassMemory) -> Result<ClassMemory> {
    memory.accumulate(features, labels)?;
    Ok(memory)
}

/// Neural-collapse measurements of a labelled feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    /// `tr(Σ_W) / tr(Σ_B)`.
    pub nc1: f64,
    /// Max deviation of the Gram matrix of centered, normalized class means
    /// from the ideal simplex Gram over the present classes.
    pub nc2: f64,
    /// `1 − min_c cos(μ_c, w_c)` over present classes.
    pub nc3: f64,
    /// Set when the between-class scatter vanishes (NC1 reported as 0).
    pub degenerate: bool,
    pub classes_present: usize,
}

pub fn nc_metrics(features: &Tensor, labels: &[usize], etf: &EtfClassifier) -> Result<NcReport> {
    let n = etf.check_features(features)?;
    check_labels(labels, n, etf)?;
    let d = etf.feature_dim;
    let mut memory = ClassMemory::new(d, etf.num_classes);
    memory.accumulate(features, labels)?;
    let present: Vec<usize> = (0..etf.num_classes).filter(|&c| memory.count(c) >= 2).collect();
    if present.len() < 2 {
        return Err(CoreError::Contract("NC metrics need ≥ 2 classes with ≥ 2 samples each".into()));
    }
    if (0..etf.num_classes).any(|c| memory.count(c) == 1) {
        return Err(CoreError::Contract("NC metrics need ≥ 2 samples in every present class".into()));
    }
    let means: Vec<Vec<f64>> = present.iter().map(|&c| memory.mean(c).unwrap()).collect();
    let k = present.len() as f64;
    let global: Vec<f64> = (0..d).map(|i| means.iter().map(|m| m[i]).sum::<f64>() / k).collect();

    let f = features.data();
    let mut within = 0.0;
    for (j, &l) in labels.iter().enumerate() {
        let m = memory.mean(l).unwrap();
        within += (0..d).map(|i| (f[i * n + j] - m[i]).powi(2)).sum::<f64>();
    }
    within /= n as f64;
    let between = means
        .iter()
        .map(|m| m.iter().zip(&global).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / k;
    let (nc1, degenerate) = if between <= f64::EPSILON * (1.0 + within) {
        (0.0, true)
    } else {
        (within / between, false)
    };

    let centered: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let v: Vec<f64> = m.iter().zip(&global).map(|(a, b)| a - b).collect();
            let nv = norm(&v).max(1e-300);
            v.into_iter().map(|x| x / nv).collect()
        })
        .collect();
    let off = -1.0 / (k - 1.0);
    let mut nc2: f64 = 0.0;
    for (a, ca) in centered.iter().enumerate() {
        for (b, cb) in centered.iter().enumerate() {
            let ideal = if a == b { 1.0 } else { off };
            nc2 = nc2.max((dot(ca, cb) - ideal).abs());
        }
    }

    let min_cos = present
        .iter()
        .zip(&means)
        .map(|(&c, m)| {
            let w = etf.prototype(c);
            dot(m, &w) / (norm(m) * norm(&w)).max(1e-300)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(NcReport { nc1, nc2, nc3: 1.0 - min_cos, degenerate, classes_present: present.len() })
}
