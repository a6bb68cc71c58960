use super::{Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar function with central
/// finite differences over every coordinate of every `requires_grad` input.
///
/// The per-coordinate error is `|g_a − g_fd| / max(1e-12, |g_a| + |g_fd|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        bail!(Contract, "grad_check step {h} outside [1e-7, 1e-3]");
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            bail!(Contract, "grad_check function must be scalar-valued");
        }
        Ok(tape.scalar_value(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let zeros = vec![0.0; input.len()];
        let analytic = tape.grad(vars[i]).unwrap_or(&zeros).to_vec();
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let ga = analytic[j];
            let err = (ga - fd).abs() / f64::max(1e-12, ga.abs() + fd.abs());
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
