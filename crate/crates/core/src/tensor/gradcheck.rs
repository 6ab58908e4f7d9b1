use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (chosen by `seed`).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            floor: 1e-4,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU gate or a pooling
    /// winner; finite differences are meaningless there.
    pub skipped: usize,
    /// `(tensor, coordinate, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, perturbing every input tensor (or a sample of coordinates).
pub fn grad_check<F>(inputs: &[Tensor<f64>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>], backward: bool| -> Result<(f64, u64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        let sig = g.kink_signature();
        let mut grads = Vec::new();
        if backward {
            g.backward(loss)?;
            grads = vars
                .iter()
                .zip(tensors)
                .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect();
        }
        Ok((value, sig, grads))
    };

    let (_, base_sig, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for ti in 0..inputs.len() {
        let len = inputs[ti].len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(cap) if cap < len => {
                let mut c = sample(&mut rng, len, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for ci in coords {
            let orig = inputs[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + opts.epsilon;
            let (plus, sig_p, _) = eval(&work, false)?;
            work[ti].data_mut()[ci] = orig - opts.epsilon;
            let (minus, sig_m, _) = eval(&work, false)?;
            work[ti].data_mut()[ci] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((ti, ci, a, numeric));
            }
        }
    }
    Ok(report)
}
