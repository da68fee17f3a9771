//! Central finite-difference verification of backprop gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::GradError;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Perturbation size, in `(0, 1e-2]`.
    pub epsilon: f64,
    /// Absolute floor on the relative-error denominator.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { epsilon: 1e-6, floor: 1e-12, max_coords_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares backprop against `(L(θ+ε) − L(θ−ε)) / 2ε` coordinate by
/// coordinate. Errors are relative to the gradient scale of the tensor the
/// coordinate belongs to: `|a − n| / max(‖a‖∞, ‖n‖∞, floor)`, so that
/// near-zero entries of an otherwise large gradient do not turn round-off
/// into spurious failures. The worst value over all tensors is reported.
///
/// `build` must construct the same scalar loss each time it is called; it is
/// re-run on a fresh graph for every perturbation.
pub fn finite_diff_check<E>(
    params: &ParamStore,
    build: impl Fn(&mut Graph, &Bound) -> Result<Var, E>,
    opts: &FdOptions,
) -> Result<FdReport, E>
where
    E: From<GradError>,
{
    if !(opts.epsilon > 0.0 && opts.epsilon <= 1e-2) {
        return Err(GradError::Contract(format!("epsilon {} outside (0, 1e-2]", opts.epsilon)).into());
    }
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g)?;
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let loss = build(&mut g, &bound)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport { max_rel_error: 0.0, worst: None, coords_checked: 0 };
    let mut probe = params.clone();
    for (name, p) in params.iter() {
        let analytic = grads.param(name).expect("bound parameter has a gradient entry");
        let n = p.value.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = p.value.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + opts.epsilon;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - opts.epsilon;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * opts.epsilon));
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(opts.floor, |m, v| m.max(v.abs()));
        for (&i, n) in coords.iter().zip(&numeric) {
            let rel = (analytic.data()[i] - n).abs() / scale;
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), i));
            }
        }
    }
    Ok(report)
}
