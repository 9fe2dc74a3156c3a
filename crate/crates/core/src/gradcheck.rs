//! Central finite-difference verification of analytic gradients.
//!
//! Non-scalar outputs are contracted with a fixed random weight tensor so
//! that every output element contributes to the checked scalar.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub rel_tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// that are zero up to rounding are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4, floor: 1e-5, seed: 0x5eed }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input, flat index, analytic, numeric) at the worst relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.rel_tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn projection(out: &Tensor, seed: u64) -> Option<Tensor> {
    if out.len() == 1 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(Tensor::uniform(out.shape(), 0.5, 1.5, &mut rng))
}

fn project(out: &Tensor, weights: Option<&Tensor>) -> f64 {
    match weights {
        None => out.data()[0],
        Some(w) => out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
    }
}

/// Compare analytic gradients of `f` w.r.t. every element of every input
/// against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = values.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let weights = projection(g.value(out), cfg.seed);
    let loss = match &weights {
        None => out,
        Some(w) => {
            let w = g.constant(w.clone())?;
            let prod = g.mul(out, w)?;
            g.sum_all(prod)?
        }
    };
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: None, checked: 0, rel_tol: cfg.rel_tol };
    let mut values = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, *v);
        for j in 0..inputs[i].len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + cfg.step;
            let up = project(&eval(&values)?, weights.as_ref());
            values[i].data_mut()[j] = orig - cfg.step;
            let down = project(&eval(&values)?, weights.as_ref());
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            let rel = relative_error(a, numeric, cfg.floor);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((i, j, a, numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
