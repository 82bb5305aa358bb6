//! Central finite-difference oracle for reverse-mode gradients.

use crate::error::{NumError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst elementwise disagreement found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare reverse-mode gradients of a scalar `f` against the five-point
/// central difference `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`
/// for every element of every parameter. The fourth-order stencil allows a
/// larger `h` (around 1e-3) and so less cancellation error.
///
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(NumError::Oracle(format!("function returned shape {:?}", v.shape())));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(NumError::Oracle("function value is not finite".into()));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = params.to_vec();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; params[p].len()]);
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work[p].data_mut()[i] = orig + offset;
                eval(&work)
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            work[p].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst.checked += 1;
            if rel > worst.max_rel_error || worst.checked == 1 {
                worst = GradCheck {
                    max_rel_error: rel,
                    param: p,
                    index: i,
                    analytic: a,
                    numeric,
                    checked: worst.checked,
                };
            }
        }
    }
    Ok(worst)
}
