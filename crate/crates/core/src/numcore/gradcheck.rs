use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A set of named flat tensors that finite differences can perturb.
pub trait Parameterized {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl Parameterized for Vec<f64> {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![("x".to_string(), self.as_slice())]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("x".to_string(), self.as_mut_slice())]
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check every scalar when the model has at most this many; otherwise
    /// sample this many without replacement. Never below 200.
    pub max_scalars: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_scalars: 400,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index inside the tensor where the worst error occurred.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Set when the loss was non-finite at a perturbed point.
    pub non_finite_at: Option<(String, usize)>,
}

/// `|a - f| / max(1e-8, |a| + |f|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare an analytic gradient against central finite differences.
///
/// `grad` must have the same tensor layout as `params`.
pub fn grad_check<P, F>(
    params: &P,
    grad: &P,
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: Fn(&P) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::contract(format!(
            "grad_check eps {} outside [1e-6, 1e-3]",
            opts.eps
        )));
    }
    let layout: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let grad_layout: Vec<(String, usize)> = grad
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    if layout != grad_layout {
        return Err(Error::contract("gradient layout differs from parameter layout"));
    }
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    let budget = opts.max_scalars.max(200);
    let mut picks: Vec<usize> = if total <= budget {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        sample(&mut rng, total, budget).into_vec()
    };
    picks.sort_unstable();

    let flat_grad: Vec<f64> = grad
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().copied())
        .collect();

    let mut tensors: Vec<TensorCheck> = layout
        .iter()
        .map(|(name, _)| TensorCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
        })
        .collect();
    let mut non_finite_at = None;
    let mut work = params.clone();

    for flat in picks {
        let (ti, local) = locate(&layout, flat);
        let original = read_scalar(&work, ti, local);
        write_scalar(&mut work, ti, local, original + opts.eps);
        let plus = loss(&work);
        write_scalar(&mut work, ti, local, original - opts.eps);
        let minus = loss(&work);
        write_scalar(&mut work, ti, local, original);
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
            _ => {
                non_finite_at = Some((layout[ti].0.clone(), local));
                break;
            }
        };
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let err = relative_error(flat_grad[flat], numeric);
        let t = &mut tensors[ti];
        t.checked += 1;
        if err > t.max_rel_error {
            t.max_rel_error = err;
            t.worst_index = local;
        }
    }

    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    let pass = non_finite_at.is_none() && max_rel_error <= opts.tol;
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        tolerance: opts.tol,
        pass,
        non_finite_at,
    })
}

fn locate(layout: &[(String, usize)], mut flat: usize) -> (usize, usize) {
    for (i, (_, n)) in layout.iter().enumerate() {
        if flat < *n {
            return (i, flat);
        }
        flat -= n;
    }
    unreachable!("flat index beyond parameter count")
}

fn read_scalar<P: Parameterized>(p: &P, tensor: usize, idx: usize) -> f64 {
    p.tensors()[tensor].1[idx]
}

fn write_scalar<P: Parameterized>(p: &mut P, tensor: usize, idx: usize, v: f64) {
    p.tensors_mut()[tensor].1[idx] = v;
}
