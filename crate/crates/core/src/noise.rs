//! Noise transition estimation from segment crops and its application to
//! student predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segda_grad::{Tensor, NORM_FLOOR};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::losses::CORRECTION_FLOOR;
use crate::networks::{normal_tensor, PixelModule};
use crate::teacher::PseudoLabelBundle;

/// Side length of the resized crop patches.
pub const CROP_SIZE: usize = 16;

/// Inclusive pixel bounds of a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentCrop {
    pub class: usize,
    pub bbox: BoundingBox,
    /// `3 × 16 × 16`.
    pub patch: Tensor,
}

fn bilinear(src: &[f64], h: usize, w: usize, bbox: BoundingBox, out: usize) -> Vec<f64> {
    let bh = (bbox.row_max - bbox.row_min + 1) as f64;
    let bw = (bbox.col_max - bbox.col_min + 1) as f64;
    let coord = |i: usize, extent: f64, lo: usize, hi: usize| {
        let x = ((i as f64 + 0.5) * extent / out as f64 - 0.5).max(0.0) + lo as f64;
        let x0 = (x.floor() as usize).min(hi);
        let x1 = (x0 + 1).min(hi);
        (x0, x1, x - x0 as f64)
    };
    let mut dst = vec![0.0; out * out];
    for i in 0..out {
        let (r0, r1, fr) = coord(i, bh, bbox.row_min, bbox.row_max);
        for j in 0..out {
            let (c0, c1, fc) = coord(j, bw, bbox.col_min, bbox.col_max);
            let at = |r: usize, c: usize| src[r * w + c];
            debug_assert!(r1 < h && c1 < w);
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            dst[i * out + j] = top * (1.0 - fr) + bottom * fr;
        }
    }
    dst
}

/// One crop per present class: the tight box around the class's confident
/// pixels, bilinearly resized to `16 × 16`.
pub fn crop_segments(image: &Tensor, bundle: &PseudoLabelBundle) -> Result<Vec<SegmentCrop>> {
    let [ch, h, w] = image.shape()[..] else {
        return Err(CoreError::UnsupportedDimension(format!("image must be C×H×W, got {:?}", image.shape())));
    };
    if (h, w) != (bundle.height, bundle.width) {
        return Err(CoreError::UnsupportedDimension("image and pseudo labels differ in extent".into()));
    }
    if bundle.present_classes.is_empty() {
        return Err(CoreError::EmptyRepresentation);
    }
    let mut crops = Vec::with_capacity(bundle.present_classes.len());
    for &class in &bundle.present_classes {
        let mut bbox: Option<BoundingBox> = None;
        for j in 0..h * w {
            if bundle.confident_label(j) != Some(class) {
                continue;
            }
            let (r, c) = (j / w, j % w);
            bbox = Some(match bbox {
                None => BoundingBox { row_min: r, row_max: r, col_min: c, col_max: c },
                Some(b) => BoundingBox {
                    row_min: b.row_min.min(r),
                    row_max: b.row_max.max(r),
                    col_min: b.col_min.min(c),
                    col_max: b.col_max.max(c),
                },
            });
        }
        let Some(bbox) = bbox else { continue };
        let mut patch = Vec::with_capacity(ch * CROP_SIZE * CROP_SIZE);
        for k in 0..ch {
            patch.extend(bilinear(&image.data()[k * h * w..(k + 1) * h * w], h, w, bbox, CROP_SIZE));
        }
        crops.push(SegmentCrop { class, bbox, patch: Tensor::new(vec![ch, CROP_SIZE, CROP_SIZE], patch)? });
    }
    Ok(crops)
}

/// Frozen embedder of crops onto the unit sphere: either a seeded random
/// projection of the flattened patch, or the mean unit pixel embedding of a
/// frozen pixel module run on the patch.
#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceEmbedder {
    Projection(Tensor),
    Encoder(PixelModule),
}

/// A reference embedding; `degenerate` marks a zero crop replaced by the
/// fallback vector `e₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEmbedding {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

impl ReferenceEmbedder {
    pub fn new(dim: usize, channels: usize, seed: u64) -> Result<Self> {
        if dim == 0 || channels == 0 {
            return Err(CoreError::UnsupportedDimension("embedder sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = channels * CROP_SIZE * CROP_SIZE;
        Ok(Self::Projection(normal_tensor(&mut rng, &[dim, inputs], (1.0 / inputs as f64).sqrt())))
    }

    pub fn encoder(pixel: PixelModule) -> Self {
        Self::Encoder(pixel)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Projection(p) => p.shape()[0],
            Self::Encoder(m) => m.config().feature_dim,
        }
    }

    fn raw(&self, crop: &SegmentCrop) -> Result<Vec<f64>> {
        match self {
            Self::Projection(p) => Ok(p.matmul(&crop.patch.reshape(&[crop.patch.len(), 1])?)?.data().to_vec()),
            Self::Encoder(m) => {
                let feats = m.infer(&crop.patch.reshape(&[1, crop.patch.shape()[0], CROP_SIZE, CROP_SIZE])?)?;
                let d = m.config().feature_dim;
                let n = CROP_SIZE * CROP_SIZE;
                let f = feats.data();
                let mut sum = vec![0.0; d];
                for j in 0..n {
                    let norm = (0..d).map(|i| f[i * n + j].powi(2)).sum::<f64>().sqrt().max(NORM_FLOOR);
                    for (i, s) in sum.iter_mut().enumerate() {
                        *s += f[i * n + j] / norm;
                    }
                }
                Ok(sum)
            }
        }
    }

    pub fn embed(&self, crop: &SegmentCrop) -> Result<ReferenceEmbedding> {
        let y = self.raw(crop)?;
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= NORM_FLOOR || crop.patch.data().iter().all(|&v| v == 0.0) {
            let mut vector = vec![0.0; self.dim()];
            vector[0] = 1.0;
            return Ok(ReferenceEmbedding { vector, degenerate: true });
        }
        Ok(ReferenceEmbedding { vector: y.iter().map(|v| v / norm).collect(), degenerate: false })
    }

    /// Stacks the embeddings of `crops` as columns of a `d × k` matrix and
    /// counts degenerate crops.
    pub fn embed_all(&self, crops: &[SegmentCrop]) -> Result<(Tensor, usize)> {
        let d = self.dim();
        let k = crops.len();
        let mut out = Tensor::zeros(&[d, k]);
        let mut degenerate = 0;
        for (col, crop) in crops.iter().enumerate() {
            let e = self.embed(crop)?;
            degenerate += usize::from(e.degenerate);
            for (i, v) in e.vector.iter().enumerate() {
                out.data_mut()[i * k + col] = *v;
            }
        }
        Ok((out, degenerate))
    }
}

fn unit_columns(m: &Tensor) -> Tensor {
    let [rows, cols] = m.shape()[..] else { unreachable!("checked by caller") };
    let mut out = m.clone();
    for c in 0..cols {
        let norm = (0..rows).map(|r| m.data()[r * cols + c].powi(2)).sum::<f64>().sqrt().max(NORM_FLOOR);
        for r in 0..rows {
            out.data_mut()[r * cols + c] /= norm;
        }
    }
    out
}

/// `N = SᵀS_noisy` with both column sets unit-normalized.
pub fn noise_transition(segrep: &Tensor, noisy: &Tensor) -> Result<Tensor> {
    match (segrep.shape(), noisy.shape()) {
        ([d, k], [d2, k2]) if d == d2 && k == k2 => {}
        (a, b) => return Err(CoreError::UnsupportedDimension(format!("segment representations {a:?} vs {b:?}"))),
    }
    Ok(unit_columns(segrep).transpose()?.matmul(&unit_columns(noisy))?)
}

/// How the raw cosine matrix is made into a transition before use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionNorm {
    /// Raw cosines; the correction clamps and renormalizes.
    Clamp,
    /// Softmax down each column, so `N·p` stays on the simplex.
    ColumnSoftmax,
    /// Softmax along each row.
    RowSoftmax,
}

pub fn normalize_transition(n: &Tensor, norm: TransitionNorm) -> Result<Tensor> {
    let [rows, cols] = n.shape()[..] else {
        return Err(CoreError::UnsupportedDimension(format!("transition must be a matrix, got {:?}", n.shape())));
    };
    let mut out = n.clone();
    let softmax = |idx: &mut dyn Iterator<Item = usize>, out: &mut Tensor| {
        let idx: Vec<usize> = idx.collect();
        let m = idx.iter().map(|&i| n.data()[i]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = idx.iter().map(|&i| (n.data()[i] - m).exp()).sum();
        for &i in &idx {
            out.data_mut()[i] = (n.data()[i] - m).exp() / z;
        }
    };
    match norm {
        TransitionNorm::Clamp => {}
        TransitionNorm::ColumnSoftmax => (0..cols).for_each(|c| softmax(&mut (0..rows).map(|r| r * cols + c), &mut out)),
        TransitionNorm::RowSoftmax => (0..rows).for_each(|r| softmax(&mut (0..cols).map(|c| r * cols + c), &mut out)),
    }
    Ok(out)
}

/// Per pixel `q = normalize(max(N·p, ε))`. Returns the corrected
/// probabilities and how many pixels fell back to uniform.
pub fn apply_correction(transition: &Tensor, probs: &Tensor) -> Result<(Tensor, usize)> {
    let k = probs.shape().first().copied().unwrap_or(0);
    if probs.rank() < 2 || transition.shape() != [k, k] {
        return Err(CoreError::UnsupportedDimension(format!("transition {:?} for probabilities {:?}", transition.shape(), probs.shape())));
    }
    if !transition.all_finite() {
        return Err(CoreError::Contract("transition matrix has a non-finite entry".into()));
    }
    let pixels = probs.len() / k;
    let mixed = transition.matmul(&probs.reshape(&[k, pixels])?)?;
    let mut out = mixed.clone();
    let mut fallback = 0;
    for j in 0..pixels {
        if (0..k).all(|c| mixed.data()[c * pixels + j] <= CORRECTION_FLOOR) {
            fallback += 1;
        }
        let col: Vec<f64> = (0..k).map(|c| mixed.data()[c * pixels + j].max(CORRECTION_FLOOR)).collect();
        let s: f64 = col.iter().sum();
        for c in 0..k {
            out.data_mut()[c * pixels + j] = col[c] / s;
        }
    }
    Ok((out.reshape(probs.shape())?, fallback))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::generate_pseudo_labels;
    use rand::Rng;

    fn bundle_from_labels(labels: &[Option<usize>], classes: usize, h: usize, w: usize) -> PseudoLabelBundle {
        let mut p = Tensor::full(&[classes, h, w], 1.0 / classes as f64);
        for (j, l) in labels.iter().enumerate() {
            if let Some(c) = l {
                for k in 0..classes {
                    p.data_mut()[k * h * w + j] = if k == *c { 1.0 } else { 0.0 };
                }
            }
        }
        generate_pseudo_labels(&p, 0.8).unwrap()
    }

    fn ramp_image(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap()
    }

    #[test]
    fn crop_boxes() {
        let (h, w) = (12, 10);
        let mut labels = vec![None; h * w];
        for r in 2..6 {
            for c in 3..7 {
                labels[r * w + c] = Some(3);
            }
        }
        let b = bundle_from_labels(&labels, 5, h, w);
        let crops = crop_segments(&ramp_image(h, w), &b).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].bbox, BoundingBox { row_min: 2, row_max: 5, col_min: 3, col_max: 6 });
        assert_eq!(crops[0].patch.shape(), &[3, 16, 16]);

        // A second class touching the corner; the first box is unchanged.
        for r in 9..12 {
            for c in 8..10 {
                labels[r * w + c] = Some(1);
            }
        }
        let b = bundle_from_labels(&labels, 5, h, w);
        let crops = crop_segments(&ramp_image(h, w), &b).unwrap();
        assert_eq!(crops.iter().map(|c| c.class).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(crops[0].bbox, BoundingBox { row_min: 9, row_max: 11, col_min: 8, col_max: 9 });
        assert_eq!(crops[1].bbox, BoundingBox { row_min: 2, row_max: 5, col_min: 3, col_max: 6 });
        assert!(crops[0].patch.all_finite());
    }

    #[test]
    fn single_pixel_crop_is_constant() {
        let (h, w) = (4, 4);
        let mut labels = vec![None; 16];
        labels[5] = Some(0);
        let img = ramp_image(h, w);
        let crops = crop_segments(&img, &bundle_from_labels(&labels, 2, h, w)).unwrap();
        for k in 0..3 {
            let expect = img.data()[k * 16 + 5];
            assert!(crops[0].patch.data()[k * 256..(k + 1) * 256].iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn embedder_contract() {
        let e = ReferenceEmbedder::new(16, 3, 9).unwrap();
        let mut labels = vec![None; 64];
        labels[10] = Some(1);
        labels[20] = Some(1);
        let crops = crop_segments(&ramp_image(8, 8), &bundle_from_labels(&labels, 3, 8, 8)).unwrap();
        let a = e.embed(&crops[0]).unwrap();
        assert_eq!(a, e.embed(&crops[0]).unwrap());
        let n: f64 = a.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-12);
        assert!(!a.degenerate);

        let zero = SegmentCrop { patch: Tensor::zeros(&[3, 16, 16]), ..crops[0].clone() };
        let z = e.embed(&zero).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.vector[0], 1.0);
    }

    #[test]
    fn transition_algebra() {
        let s = crate::etf::EtfClassifier::new(3, 8, 4).unwrap().rotation().clone();
        let n = noise_transition(&s, &s).unwrap();
        assert!(n.max_abs_diff(&Tensor::eye(3)) <= 1e-12);

        let perm = [1usize, 2, 0];
        let mut sp = s.clone();
        for i in 0..8 {
            for (c, &pc) in perm.iter().enumerate() {
                sp.set(&[i, c], s.get(&[i, pc]));
            }
        }
        let n = noise_transition(&s, &sp).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == perm[c] { 1.0 } else { 0.0 };
                assert!((n.get(&[r, c]) - expect).abs() <= 1e-12);
            }
        }
        assert!(noise_transition(&s, &Tensor::zeros(&[7, 3])).is_err());
    }

    #[test]
    fn transition_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let n = noise_transition(&a, &b).unwrap();
        let col = |m: &Tensor, c: usize| -> Vec<f64> {
            let v: Vec<f64> = (0..6).map(|r| m.get(&[r, c])).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        };
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = col(&a, i).iter().zip(col(&b, j)).map(|(x, y)| x * y).sum();
                assert!((n.get(&[i, j]) - dot).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn correction_examples() {
        let p = Tensor::new(vec![3, 2], vec![0.2, 0.5, 0.3, 0.25, 0.5, 0.25]).unwrap();
        let (q, f) = apply_correction(&Tensor::eye(3), &p).unwrap();
        assert_eq!(q, p);
        assert_eq!(f, 0);

        let mut pm = Tensor::zeros(&[3, 3]);
        pm.set(&[1, 0], 1.0);
        pm.set(&[2, 1], 1.0);
        pm.set(&[0, 2], 1.0);
        let (q, _) = apply_correction(&pm, &p).unwrap();
        assert!(q.max_abs_diff(&pm.matmul(&p).unwrap()) <= 1e-15);

        // Second row negative: N p = (0.6, −0.2) → clamp → (0.6, ε) → renormalize.
        let n = Tensor::new(vec![2, 2], vec![1.0, 0.0, -0.5, 0.0]).unwrap();
        let p2 = Tensor::new(vec![2, 1], vec![0.6, 0.4]).unwrap();
        let (q, f) = apply_correction(&n, &p2).unwrap();
        assert_eq!(f, 0);
        let s = 0.6 + 1e-12;
        assert!((q.data()[0] - 0.6 / s).abs() <= 1e-15);
        assert!((q.data()[1] - 1e-12 / s).abs() <= 1e-24);

        let (q, f) = apply_correction(&Tensor::full(&[2, 2], -1.0), &p2).unwrap();
        assert_eq!(f, 1);
        assert_eq!(q.data(), &[0.5, 0.5]);
    }

    #[test]
    fn encoder_embedder_contract() {
        let pixel = PixelModule::new(&crate::networks::ArchConfig::default(), 5).unwrap();
        let e = ReferenceEmbedder::encoder(pixel);
        assert_eq!(e.dim(), 16);
        let mut labels = vec![None; 64];
        labels[9] = Some(2);
        labels[30] = Some(2);
        let crops = crop_segments(&ramp_image(8, 8), &bundle_from_labels(&labels, 3, 8, 8)).unwrap();
        let a = e.embed(&crops[0]).unwrap();
        assert_eq!(a, e.embed(&crops[0]).unwrap());
        assert!((a.vector.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);

        let zero = SegmentCrop { patch: Tensor::zeros(&[3, 16, 16]), ..crops[0].clone() };
        assert!(e.embed(&zero).unwrap().degenerate);
    }

    #[test]
    fn transition_normalizations() {
        let n = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.5]).unwrap();
        assert_eq!(normalize_transition(&n, TransitionNorm::Clamp).unwrap(), n);

        let col = normalize_transition(&n, TransitionNorm::ColumnSoftmax).unwrap();
        let e = std::f64::consts::E;
        assert!((col.get(&[0, 0]) - e / (e + 1.0)).abs() <= 1e-15);
        assert!((col.get(&[1, 1]) - 1.5f64.exp() / (1.5f64.exp() + 1.0)).abs() <= 1e-15);
        for c in 0..2 {
            assert!((col.get(&[0, c]) + col.get(&[1, c]) - 1.0).abs() <= 1e-15);
        }
        // Column-stochastic N keeps N·p on the simplex without clamping.
        let p = Tensor::new(vec![2, 1], vec![0.3, 0.7]).unwrap();
        let (q, _) = apply_correction(&col, &p).unwrap();
        assert!(q.max_abs_diff(&col.matmul(&p).unwrap()) <= 1e-15);

        let row = normalize_transition(&n, TransitionNorm::RowSoftmax).unwrap();
        assert!(row.max_abs_diff(&normalize_transition(&n.transpose().unwrap(), TransitionNorm::ColumnSoftmax).unwrap().transpose().unwrap()) <= 1e-15);
        assert!(normalize_transition(&Tensor::zeros(&[2]), TransitionNorm::Clamp).is_err());
    }
}
